//! Observation model: projection onto speckle rows, two-channel
//! normalization, and additive detector noise.

use serde::{Deserialize, Serialize};

use super::ensemble::MatrixView;
use crate::error::{Error, Result};
use crate::tensor::kernels::{matmul, MatRef};
use crate::tensor::Rng;

pub const DEFAULT_NOISE_STD: f64 = 0.015;
/// Collection-fiber damping factor for the wavefront-shaped experiment.
pub const DAMPING_EXPERIMENT_1: f64 = 10.0;
/// Collection-fiber damping factor for the speckle experiment.
pub const DAMPING_EXPERIMENT_2: f64 = 200.0;
/// Dark level as a fraction of the white background.
pub const DARK_FRACTION: f64 = 0.02;
/// Noise draws are truncated at this many standard deviations.
pub const NOISE_CLIP_SIGMAS: f64 = 5.0;

/// Noise-free projection `Ax` and the noise level to apply downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct RawMeasurement {
    pub ax: Vec<f64>,
    pub noise_std: f64,
}

/// `A x` for one object. `x` must lie in `[0, 1]^N`.
pub fn forward_measure(a: MatrixView<'_>, x: &[f64], noise_std: f64) -> Result<RawMeasurement> {
    if x.len() != a.cols {
        return Err(Error::shape("forward_measure", &[a.cols], &[x.len()]));
    }
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("object values must lie in [0, 1]"));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::invalid(format!("noise std {noise_std} must be non-negative")));
    }
    let ax = (0..a.rows)
        .map(|i| a.row(i).iter().zip(x).map(|(p, v)| p * v).sum())
        .collect();
    Ok(RawMeasurement { ax, noise_std })
}

/// `A x` for a batch of objects stored row-wise in `xs` (`count × N`),
/// returned as `count × M`.
pub fn project_batch(a: MatrixView<'_>, xs: &[f64], count: usize) -> Result<Vec<f64>> {
    if xs.len() != count * a.cols {
        return Err(Error::shape("project_batch", &[count, a.cols], &[xs.len()]));
    }
    Ok(matmul(
        MatRef::new(xs, count, a.cols),
        MatRef::new(a.data, a.rows, a.cols).t(),
    ))
}

/// White and black background levels per illumination pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct Backgrounds {
    pub white: Vec<f64>,
    pub black: Vec<f64>,
}

impl Backgrounds {
    /// White = response to an all-ones object; black = a fixed dark fraction of it.
    pub fn simulate(a: MatrixView<'_>) -> Self {
        let white: Vec<f64> = (0..a.rows).map(|i| a.row(i).iter().sum()).collect();
        let black = white.iter().map(|w| DARK_FRACTION * w).collect();
        Self { white, black }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSelection {
    #[default]
    Both,
    First,
    Second,
}

impl ChannelSelection {
    pub fn count(self) -> usize {
        match self {
            ChannelSelection::Both => 2,
            _ => 1,
        }
    }

    /// Picks the configured channels out of a two-channel measurement.
    pub fn select(self, y: &[f64]) -> &[f64] {
        let m = y.len() / 2;
        match self {
            ChannelSelection::Both => y,
            ChannelSelection::First => &y[..m],
            ChannelSelection::Second => &y[m..],
        }
    }
}

/// Two-channel normalized measurement `[norm(Ax), norm((Ax/s − b)/(w − b))]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub y: Vec<f64>,
    /// Set when a channel had zero range and was emitted as zeros.
    pub degenerate: bool,
}

/// Affine map onto `[0, 1]`; `None` when the input is constant.
pub fn range_normalize(v: &[f64]) -> Option<Vec<f64>> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return None;
    }
    Some(v.iter().map(|x| (x - lo) / range).collect())
}

pub fn apply_normalization(ax: &[f64], s: f64, white: &[f64], black: &[f64]) -> Result<Normalized> {
    let m = ax.len();
    if white.len() != m || black.len() != m {
        return Err(Error::shape("apply_normalization", &[m], &[white.len()]));
    }
    if !(s > 0.0) {
        return Err(Error::invalid(format!("damping factor s = {s} must be positive")));
    }
    if white.iter().zip(black).any(|(w, b)| !(w > b)) {
        return Err(Error::invalid("white background must exceed black background"));
    }
    let damped: Vec<f64> = ax
        .iter()
        .zip(white.iter().zip(black))
        .map(|(a, (w, b))| (a / s - b) / (w - b))
        .collect();
    let mut degenerate = false;
    let mut channel = |v: &[f64]| {
        range_normalize(v).unwrap_or_else(|| {
            degenerate = true;
            vec![0.0; m]
        })
    };
    let mut y = channel(ax);
    y.extend(channel(&damped));
    Ok(Normalized { y, degenerate })
}

/// Adds i.i.d. Gaussian noise truncated at ±5σ.
pub fn add_noise(y: &mut [f64], std: f64, rng: &mut Rng) {
    if std == 0.0 {
        return;
    }
    let bound = NOISE_CLIP_SIGMAS * std;
    for v in y {
        *v += (std * rng.normal()).clamp(-bound, bound);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_projection() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        let a = MatrixView::new(2, 2, &eye).unwrap();
        assert_eq!(forward_measure(a, &[1.0, 0.0], 0.0).unwrap().ax, vec![1.0, 0.0]);
        assert_eq!(forward_measure(a, &[0.0, 0.0], 0.0).unwrap().ax, vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        let a = MatrixView::new(2, 2, &eye).unwrap();
        assert!(forward_measure(a, &[1.0], 0.0).is_err());
        assert!(forward_measure(a, &[1.5, 0.0], 0.0).is_err());
    }

    #[test]
    fn normalization_hand_example() {
        let n = apply_normalization(&[2.0, 4.0], 2.0, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(n.y, vec![0.0, 1.0, 0.0, 1.0]);
        assert!(!n.degenerate);
    }

    #[test]
    fn constant_projection_is_degenerate() {
        let n = apply_normalization(&[3.0, 3.0, 3.0], 10.0, &[5.0; 3], &[0.1; 3]).unwrap();
        assert_eq!(n.y, vec![0.0; 6]);
        assert!(n.degenerate);
    }

    #[test]
    fn normalization_preconditions() {
        assert!(apply_normalization(&[1.0, 2.0], 0.0, &[1.0, 1.0], &[0.0, 0.0]).is_err());
        assert!(apply_normalization(&[1.0, 2.0], 1.0, &[1.0, 0.0], &[0.0, 0.0]).is_err());
        assert!(apply_normalization(&[1.0, 2.0], 1.0, &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn batch_projection_matches_single() {
        let data: Vec<f64> = (0..12).map(|v| (v as f64 * 0.3).cos().abs()).collect();
        let a = MatrixView::new(3, 4, &data).unwrap();
        let xs = [0.1, 0.2, 0.3, 0.4, 1.0, 0.0, 0.5, 0.25];
        let batch = project_batch(a, &xs, 2).unwrap();
        for k in 0..2 {
            let single = forward_measure(a, &xs[k * 4..(k + 1) * 4], 0.0).unwrap().ax;
            for (b, s) in batch[k * 3..(k + 1) * 3].iter().zip(&single) {
                assert!((b - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn noise_is_truncated() {
        let mut y = vec![0.0; 100_000];
        add_noise(&mut y, 0.015, &mut Rng::new(0));
        assert!(y.iter().all(|v| v.abs() <= 5.0 * 0.015));
        let var = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
        assert!((var.sqrt() - 0.015).abs() < 3e-4);
    }

    #[test]
    fn default_constants() {
        assert_eq!(DEFAULT_NOISE_STD, 0.015);
        assert_eq!(DAMPING_EXPERIMENT_1, 10.0);
        assert_eq!(DAMPING_EXPERIMENT_2, 200.0);
    }
}
