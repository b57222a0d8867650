use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::MeanStd;
use crate::error::{Error, Result};

/// PSNR summary of one method on one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsnrRow {
    pub config: String,
    pub method: String,
    /// `seen` or `unseen`.
    pub group: String,
    pub mean: f64,
    pub std: f64,
    /// Mean over records of trained classes only.
    pub mean_trained_classes: Option<f64>,
    /// Mean over records of classes never trained on.
    pub mean_new_classes: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub per_config: BTreeMap<String, f64>,
    pub seen: Option<MeanStd>,
    pub unseen: Option<MeanStd>,
}

/// 3-D projection of a point set with its grouping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSet {
    pub points: Vec<[f64; 3]>,
    pub labels: Vec<usize>,
    pub configs: Vec<String>,
    pub explained: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub experiment: u8,
    pub seeds: BTreeMap<String, u64>,
    pub train_configs: Vec<String>,
    pub unseen_configs: Vec<String>,
    pub classes: Vec<String>,
    pub ensemble_hash: String,
    pub model_hashes: BTreeMap<String, String>,
}

/// All quantitative results of one evaluation run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub psnr: Vec<PsnrRow>,
    /// Row-normalized confusion matrices averaged over configurations, by method.
    pub confusion: BTreeMap<String, Vec<Vec<f64>>>,
    pub accuracy: BTreeMap<String, AccuracySummary>,
    /// Keyed by point set, e.g. `raw` and `latent`.
    pub pca: BTreeMap<String, ProjectionSet>,
    pub silhouette: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Shortest text that parses back to the same `f64` (at most 17 significant digits).
fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        String::new()
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn psnr_csv(report: &EvalReport) -> String {
    let mut s = String::from("config,method,mean,std\n");
    for r in &report.psnr {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            csv_field(&r.config),
            csv_field(&r.method),
            num(r.mean),
            num(r.std)
        );
    }
    s
}

pub fn confusion_csv(matrix: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for row in matrix {
        let cells: Vec<String> = row.iter().map(|v| num(*v)).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn pca_csv(set: &ProjectionSet) -> String {
    let mut s = String::from("x,y,z,label,config\n");
    for ((p, l), c) in set.points.iter().zip(&set.labels).zip(&set.configs) {
        let _ = writeln!(s, "{},{},{},{},{}", num(p[0]), num(p[1]), num(p[2]), l, csv_field(c));
    }
    s
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Scatter of the first two components: fill color by class, marker shape
/// by configuration (circle, square, triangle, diamond, then repeating).
pub fn pca_svg(set: &ProjectionSet, title: &str) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 30.0;
    let xs = set.points.iter().map(|p| p[0]);
    let ys = set.points.iter().map(|p| p[1]);
    let range = |it: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if lo.is_finite() && hi > lo {
            (lo, hi)
        } else {
            (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0)
        }
    };
    let (x0, x1) = range(&mut xs.into_iter());
    let (y0, y1) = range(&mut ys.into_iter());
    let sx = |v: f64| PAD + (v - x0) / (x1 - x0) * (SIZE - 2.0 * PAD);
    let sy = |v: f64| SIZE - PAD - (v - y0) / (y1 - y0) * (SIZE - 2.0 * PAD);

    let mut configs: Vec<&String> = set.configs.iter().collect();
    configs.sort();
    configs.dedup();

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\" style=\"background:#ffffff\">"
    );
    let _ = writeln!(s, "<title>{}</title>", escape_xml(title));
    for ((p, &label), cfg) in set.points.iter().zip(&set.labels).zip(&set.configs) {
        let (x, y) = (sx(p[0]), sy(p[1]));
        let color = PALETTE[label % PALETTE.len()];
        let shape = configs.iter().position(|c| *c == cfg).unwrap_or(0) % 4;
        let _ = match shape {
            0 => writeln!(s, "<circle cx=\"{x:.3}\" cy=\"{y:.3}\" r=\"3\" fill=\"{color}\"/>"),
            1 => writeln!(
                s,
                "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"6\" height=\"6\" fill=\"{color}\"/>",
                x - 3.0,
                y - 3.0
            ),
            2 => writeln!(
                s,
                "<polygon points=\"{:.3},{:.3} {:.3},{:.3} {:.3},{:.3}\" fill=\"{color}\"/>",
                x,
                y - 3.5,
                x - 3.5,
                y + 3.0,
                x + 3.5,
                y + 3.0
            ),
            _ => writeln!(
                s,
                "<polygon points=\"{:.3},{:.3} {:.3},{:.3} {:.3},{:.3} {:.3},{:.3}\" fill=\"{color}\"/>",
                x,
                y - 4.0,
                x + 4.0,
                y,
                x,
                y + 4.0,
                x - 4.0,
                y
            ),
        };
    }
    for (i, c) in configs.iter().enumerate() {
        let marker = ["circle", "square", "triangle", "diamond"][i % 4];
        let _ = writeln!(
            s,
            "<text x=\"{PAD}\" y=\"{:.1}\" font-size=\"11\" font-family=\"sans-serif\">{}: {marker}</text>",
            14.0 + 13.0 * i as f64,
            escape_xml(c)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes the report files into `dir` and returns their paths in writing order.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io_context(e, format_args!("cannot create {}", dir.display())))?;
    let mut files: Vec<(PathBuf, String)> = vec![
        (dir.join("report.json"), report.to_json()?),
        (dir.join("psnr.csv"), psnr_csv(report)),
    ];
    for (method, m) in &report.confusion {
        files.push((
            dir.join(format!("confusion_{}.csv", safe_name(method))),
            confusion_csv(m),
        ));
    }
    for (which, set) in &report.pca {
        let name = safe_name(which);
        files.push((dir.join(format!("pca_{name}.csv")), pca_csv(set)));
        files.push((
            dir.join(format!("pca_{name}.svg")),
            pca_svg(set, &format!("PCA of {which} vectors")),
        ));
    }
    let mut out = Vec::with_capacity(files.len());
    for (path, content) in files {
        fs::write(&path, content).map_err(|e| Error::io_context(e, format_args!("cannot write {}", path.display())))?;
        out.push(path);
    }
    Ok(out)
}
