//! Reconstruction and classification metrics, projections, and report files.

mod metrics;
mod pca;
mod report;

pub use metrics::{
    accuracy_stats, average_normalized, mean_std, psnr, silhouette, ConfusionMatrix, MeanStd, PSNR_CAP_DB,
};
pub use pca::{jacobi_eigen, pca_project, Pca, JACOBI_TOLERANCE};
pub use report::{
    confusion_csv, emit_report, pca_csv, pca_svg, psnr_csv, AccuracySummary, EvalReport, ProjectionSet, PsnrRow,
    ReportMetadata,
};
