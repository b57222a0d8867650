//! Simulated fiber: bend configurations, speckle ensembles, and the
//! measurement model.

mod config;
mod ensemble;
mod measure;

pub use config::{config_id, default_grid, make_config_grid, FiberConfiguration, ARM_RANGE_MM, ROTATION_RANGE_DEG};
pub use ensemble::{
    pearson, speckle_correlation, IlluminationMode, MatrixView, SpeckleEnsemble, DEFAULT_DECORRELATION_SCALE,
    ENSEMBLE_MAGIC, ENSEMBLE_VERSION,
};
pub use measure::{
    add_noise, apply_normalization, forward_measure, project_batch, range_normalize, Backgrounds, ChannelSelection,
    Normalized, RawMeasurement, DAMPING_EXPERIMENT_1, DAMPING_EXPERIMENT_2, DARK_FRACTION, DEFAULT_NOISE_STD,
    NOISE_CLIP_SIGMAS,
};
