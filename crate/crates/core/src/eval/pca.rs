use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::{matmul, MatRef};

/// Off-diagonal magnitude at which Jacobi sweeps stop.
pub const JACOBI_TOLERANCE: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    /// `n × components` projected coordinates.
    pub projected: Vec<Vec<f64>>,
    /// Fraction of total variance per kept component.
    pub explained: Vec<f64>,
    /// Unit principal axes, one per component.
    pub axes: Vec<Vec<f64>>,
}

/// Eigen-decomposition of a symmetric `d × d` matrix (row-major) by
/// cyclic Jacobi rotations. Returns eigenvalues and column eigenvectors
/// sorted by decreasing eigenvalue.
pub fn jacobi_eigen(matrix: &[f64], d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale = a.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1.0);
    for _ in 0..MAX_SWEEPS {
        let off = (0..d)
            .flat_map(|p| (p + 1..d).map(move |q| (p, q)))
            .map(|(p, q)| a[p * d + q].abs())
            .fold(0.0, f64::max);
        if off <= JACOBI_TOLERANCE * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j * d + j].total_cmp(&a[i * d + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * d + i]).collect();
    let vectors = order.iter().map(|&i| (0..d).map(|k| v[k * d + i]).collect()).collect();
    (values, vectors)
}

/// Projects `vectors` onto their top principal axes.
///
/// Each axis is signed so that its largest-magnitude entry is positive.
pub fn pca_project(vectors: &[Vec<f64>], components: usize) -> Result<Pca> {
    let n = vectors.len();
    let d = vectors.first().map_or(0, Vec::len);
    if d < components || d < 3 {
        return Err(Error::invalid(format!(
            "PCA needs dimension >= 3 and >= {components}, got {d}"
        )));
    }
    if n < components {
        return Err(Error::invalid(format!(
            "PCA needs at least {components} points, got {n}"
        )));
    }
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::invalid("PCA input rows differ in length"));
    }
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = vectors
        .iter()
        .flat_map(|v| v.iter().zip(&mean).map(|(x, m)| x - m))
        .collect();
    let denom = (n.max(2) - 1) as f64;
    let mut cov = matmul(MatRef::new(&centered, n, d).t(), MatRef::new(&centered, n, d));
    cov.iter_mut().for_each(|c| *c /= denom);
    for i in 0..d {
        for j in i + 1..d {
            let s = 0.5 * (cov[i * d + j] + cov[j * d + i]);
            cov[i * d + j] = s;
            cov[j * d + i] = s;
        }
    }
    let (values, vectors_) = jacobi_eigen(&cov, d);
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let mut axes: Vec<Vec<f64>> = vectors_.into_iter().take(components).collect();
    for axis in &mut axes {
        let big = axis
            .iter()
            .copied()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if big < 0.0 {
            axis.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let explained = values
        .iter()
        .take(components)
        .map(|v| if total > 0.0 { v.max(0.0) / total } else { 0.0 })
        .collect();
    let projected = centered
        .chunks_exact(d)
        .map(|row| {
            axes.iter()
                .map(|a| a.iter().zip(row).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        projected,
        explained,
        axes,
    })
}
