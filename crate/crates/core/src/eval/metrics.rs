use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value reported when the two images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &[f64], x_hat: &[f64], peak: f64) -> Result<f64> {
    if x.len() != x_hat.len() || x.is_empty() {
        return Err(Error::shape("psnr", &[x.len()], &[x_hat.len()]));
    }
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("peak must be positive, got {peak}")));
    }
    let mse = x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Counts of true class (row) against predicted class (column).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(predictions: &[usize], labels: &[usize], k: usize) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::shape("confusion_matrix", &[labels.len()], &[predictions.len()]));
        }
        let mut counts = vec![vec![0; k]; k];
        for (&p, &l) in predictions.iter().zip(labels) {
            if p >= k || l >= k {
                return Err(Error::invalid(format!("class {} out of range for k = {k}", p.max(l))));
            }
            counts[l][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let hits: usize = (0..self.k()).map(|i| self.counts[i][i]).sum();
        hits as f64 / self.total().max(1) as f64
    }

    /// Rows divided by their sums; rows of absent classes stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: usize = row.iter().sum();
                row.iter()
                    .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }
}

/// Entrywise mean of the row-normalized forms.
pub fn average_normalized(matrices: &[ConfusionMatrix]) -> Result<Vec<Vec<f64>>> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::invalid("no confusion matrices to average"))?;
    let k = first.k();
    let mut out = vec![vec![0.0; k]; k];
    for m in matrices {
        if m.k() != k {
            return Err(Error::shape("average_normalized", &[k], &[m.k()]));
        }
        for (o, r) in out.iter_mut().zip(m.normalized()) {
            for (a, b) in o.iter_mut().zip(r) {
                *a += b;
            }
        }
    }
    let n = matrices.len() as f64;
    out.iter_mut().flatten().for_each(|v| *v /= n);
    Ok(out)
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::invalid("mean of an empty set"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(MeanStd { mean, std: var.sqrt() })
}

/// Accuracy summary over configurations.
pub fn accuracy_stats(per_config: &[f64]) -> Result<MeanStd> {
    mean_std(per_config)
}

/// Mean silhouette with Euclidean distance.
///
/// Needs at least two clusters, each with at least two points.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::shape("silhouette", &[points.len()], &[labels.len()]));
    }
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    let sizes: Vec<usize> = clusters
        .iter()
        .map(|c| labels.iter().filter(|&&l| l == *c).count())
        .collect();
    if clusters.len() < 2 || sizes.iter().any(|&s| s < 2) {
        return Err(Error::invalid("silhouette needs >= 2 clusters with >= 2 points each"));
    }
    let index = |l: usize| clusters.binary_search(&l).expect("label listed");
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![0.0; clusters.len()];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[index(labels[j])] += dist(p, q);
            }
        }
        let own = index(labels[i]);
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..clusters.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        total += if denom == 0.0 { 0.0 } else { (b - a) / denom };
    }
    Ok(total / points.len() as f64)
}
