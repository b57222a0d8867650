//! Objective terms, as plain functions and as graph builders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Graph, Rng, Tensor, Var};

/// Relaxed categorical sample `softmax((logits + g) / tau)` with Gumbel `g`.
pub fn gumbel_softmax_sample(logits: &[f64], tau: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let mut out: Vec<f64> = logits.iter().map(|l| (l + rng.gumbel()) / tau).collect();
    softmax_in_place(&mut out);
    Ok(out)
}

/// KL divergence between diagonal Gaussians given means and variances,
/// summed over dimensions.
pub fn kl_gaussian_diag(mu_q: &[f64], var_q: &[f64], mu_p: &[f64], var_p: &[f64]) -> f64 {
    mu_q.iter()
        .zip(var_q)
        .zip(mu_p.iter().zip(var_p))
        .map(|((mq, vq), (mp, vp))| 0.5 * (vp.ln() - vq.ln() + (vq + (mq - mp).powi(2)) / vp - 1.0))
        .sum()
}

/// KL divergence from `pi` to the uniform distribution over `pi.len()` classes.
pub fn kl_categorical_uniform(pi: &[f64]) -> f64 {
    let k = pi.len() as f64;
    pi.iter().filter(|&&p| p > 0.0).map(|p| p * (k * p).ln()).sum()
}

/// Unit-variance Gaussian log-likelihood up to constants: `-½‖x − μ‖²`.
pub fn reconstruction_term(x: &[f64], mu: &[f64]) -> f64 {
    -0.5 * x.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
}

/// Gumbel-softmax in the graph; `gumbel` is the frozen noise for `logits`.
pub fn gumbel_softmax_graph(g: &mut Graph, logits: Var, gumbel: &Tensor, tau: f64) -> Result<Var> {
    let noisy = g.add_const(logits, gumbel)?;
    let scaled = g.scale(noisy, 1.0 / tau);
    g.softmax(scaled)
}

fn batch_len(g: &Graph, v: Var) -> f64 {
    g.shape(v).first().copied().unwrap_or(1).max(1) as f64
}

/// Batch mean of the per-sample Gaussian KL, from log-variances.
pub fn kl_gaussian_graph(g: &mut Graph, mu_q: Var, logvar_q: Var, mu_p: Var, logvar_p: Var) -> Result<Var> {
    let n = batch_len(g, mu_q);
    let diff = g.sub(mu_q, mu_p)?;
    let diff2 = g.square(diff);
    let var_q = g.exp(logvar_q);
    let num = g.add(var_q, diff2)?;
    let neg = g.scale(logvar_p, -1.0);
    let inv_var_p = g.exp(neg);
    let ratio = g.mul(num, inv_var_p)?;
    let log_ratio = g.sub(logvar_p, logvar_q)?;
    let t = g.add(log_ratio, ratio)?;
    let t = g.add_scalar(t, -1.0);
    let s = g.sum(t);
    Ok(g.scale(s, 0.5 / n))
}

/// Batch mean of `KL(softmax(logits) ‖ uniform)`.
pub fn kl_categorical_graph(g: &mut Graph, logits: Var) -> Result<Var> {
    let n = batch_len(g, logits);
    let k = g.shape(logits)[1] as f64;
    let p = g.softmax(logits)?;
    let logp = g.log_softmax(logits)?;
    let shifted = g.add_scalar(logp, k.ln());
    let t = g.mul(p, shifted)?;
    let s = g.sum(t);
    Ok(g.scale(s, 1.0 / n))
}

/// Batch mean of `-½‖x − μ‖²`.
pub fn reconstruction_graph(g: &mut Graph, target: &Tensor, mu: Var) -> Result<Var> {
    let n = batch_len(g, mu);
    let neg = g.scale(mu, -1.0);
    let diff = g.add_const(neg, target)?;
    let sq = g.square(diff);
    let s = g.sum(sq);
    Ok(g.scale(s, -0.5 / n))
}

/// Batch mean cross-entropy of `logits` against integer labels.
pub fn cross_entropy_graph(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let (n, k) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::shape("cross_entropy labels", &[n], &[labels.len()]));
    }
    let mut onehot = vec![0.0; n * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::invalid(format!("label {l} out of range for {k} classes")));
        }
        onehot[i * k + l] = 1.0;
    }
    let logp = g.log_softmax(logits)?;
    let picked = g.mul_const(logp, Tensor::new(&shape, onehot)?)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// Weights of the objective terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub omega: f64,
    pub gamma: f64,
    /// Weight of the optional label cross-entropy on the class logits.
    pub supervised: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 200.0,
            omega: 50.0,
            gamma: 50.0,
            supervised: 0.0,
        }
    }
}

/// Per-term values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub kl_gauss: f64,
    pub kl_cat: f64,
    pub recon: f64,
    pub triplet: f64,
    pub supervised: f64,
}

impl LossTerms {
    /// The minimized objective `αKL_g + βKL_c − ω·recon + γ·triplet (+ λ·CE)`.
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.alpha * self.kl_gauss + w.beta * self.kl_cat - w.omega * self.recon
            + w.gamma * self.triplet
            + w.supervised * self.supervised
    }

    /// Fails with the name of the first non-finite term.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("kl_gauss", self.kl_gauss),
            ("kl_cat", self.kl_cat),
            ("recon", self.recon),
            ("triplet", self.triplet),
            ("supervised", self.supervised),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { term: name.into() });
            }
        }
        Ok(())
    }
}
