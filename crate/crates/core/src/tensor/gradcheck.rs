//! Central-difference verification of analytic gradients.

use super::graph::Var;
use super::params::{Mode, ParamStore, Session};
use super::rng::Rng;
use crate::error::{Error, Result};

/// Absolute tolerance for parameters whose true gradient vanishes.
pub const ZERO_GRAD_TOLERANCE: f64 = 1e-8;
/// Gradient magnitude below which a parameter counts as zero-gradient.
const DEGENERATE_SCALE: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub mode: Mode,
    /// Upper bound on probed entries per parameter; `None` probes all.
    pub max_entries: Option<usize>,
    /// Selects the probed subset when `max_entries` applies.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            mode: Mode::Train,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub probed: usize,
    pub max_abs_diff: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }
}

/// Compares analytic gradients of `loss_fn` with central differences.
///
/// For each trainable parameter the error is
/// `max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)` over
/// the probed entries; the report's maximum is taken over parameters.
/// Parameters whose gradients are all numerically zero (a bias feeding a
/// batchnorm, say) are compared absolutely: they score 0 when the
/// difference stays within [`ZERO_GRAD_TOLERANCE`], otherwise the raw
/// difference. The
/// closure must be deterministic: any sampling noise has to be replayed from
/// a fixed seed on every call.
pub fn grad_check<F>(store: &ParamStore, opts: &GradCheckOptions, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&opts.eps) {
        return Err(Error::invalid(format!("eps {} outside [1e-6, 1e-3]", opts.eps)));
    }
    for (name, p) in store.iter() {
        if !p.tensor.is_finite() {
            return Err(Error::invalid(format!("parameter `{name}` is not finite")));
        }
    }

    let analytic = {
        let mut sess = Session::new(store, opts.mode);
        let loss = loss_fn(&mut sess)?;
        let grads = sess.graph.backward(loss)?;
        sess.param_grads(&grads)
    };

    let eval = |probe: &ParamStore| -> Result<f64> {
        let mut sess = Session::new(probe, opts.mode);
        let loss = loss_fn(&mut sess)?;
        Ok(sess.graph.value(loss).item())
    };

    let mut rng = Rng::new(opts.seed);
    let mut probe = store.clone();
    let mut params = Vec::new();
    for (name, g) in &analytic {
        let n = g.numel();
        let mut idx: Vec<usize> = (0..n).collect();
        if let Some(limit) = opts.max_entries {
            if limit < n {
                rng.shuffle(&mut idx);
                idx.truncate(limit);
                idx.sort_unstable();
            }
        }
        let mut max_diff = 0.0f64;
        let mut max_a = 0.0f64;
        let mut max_n = 0.0f64;
        for &i in &idx {
            let orig = probe.tensor(name)?.data()[i];
            probe.tensor_mut(name)?.data_mut()[i] = orig + opts.eps;
            let plus = eval(&probe)?;
            probe.tensor_mut(name)?.data_mut()[i] = orig - opts.eps;
            let minus = eval(&probe)?;
            probe.tensor_mut(name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = g.data()[i];
            max_diff = max_diff.max((a - numeric).abs());
            max_a = max_a.max(a.abs());
            max_n = max_n.max(numeric.abs());
        }
        params.push(ParamCheck {
            name: name.clone(),
            probed: idx.len(),
            max_abs_diff: max_diff,
            rel_error: if max_a.max(max_n) <= DEGENERATE_SCALE {
                if max_diff <= ZERO_GRAD_TOLERANCE {
                    0.0
                } else {
                    max_diff
                }
            } else {
                max_diff / max_a.max(max_n).max(ZERO_GRAD_TOLERANCE)
            },
        });
    }
    Ok(GradCheckReport { params })
}
