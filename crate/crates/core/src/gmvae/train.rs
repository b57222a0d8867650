use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::loss::{
    cross_entropy_graph, kl_categorical_graph, kl_gaussian_graph, reconstruction_graph, LossTerms, LossWeights,
};
use super::model::{argmax_row, CategoryPath, ForwardVars, GmvaeConfig, GmvaeModel, SamplingNoise};
use crate::dataset::{measurement_side, stack_images, stack_measurements, MeasurementDataset, MeasurementRecord};
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, AdamState, Mode, Rng, Session, Tensor, TripletSummary, Var};

/// Records per forward pass at inference time.
const INFER_CHUNK: usize = 256;

/// Inputs, targets and labels of one mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[n, 2, side, side]`.
    pub inputs: Tensor,
    /// `[n, side²]`.
    pub targets: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_records(records: &[&MeasurementRecord]) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let side = measurement_side(first.y.len())?;
        Ok(Self {
            inputs: stack_measurements(records, side)?,
            targets: stack_images(records, side * side)?,
            labels: records.iter().map(|r| r.label).collect(),
        })
    }
}

/// Graph output of [`objective`].
#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: Var,
    pub terms: LossTerms,
    pub triplet: TripletSummary,
    pub vars: ForwardVars,
}

/// Builds the minimized objective for one batch under fixed noise.
pub fn objective(
    model: &GmvaeModel,
    sess: &mut Session<'_>,
    batch: &Batch,
    noise: &SamplingNoise,
    tau: f64,
    w: &LossWeights,
) -> Result<Objective> {
    let y = sess.graph.constant(batch.inputs.clone());
    let v = model.forward(sess, y, noise, CategoryPath::Sampled, tau)?;
    let g = &mut sess.graph;
    let klg = kl_gaussian_graph(g, v.mu_q, v.logvar_q, v.mu_p, v.logvar_p)?;
    let klc = kl_categorical_graph(g, v.logits)?;
    let rec = reconstruction_graph(g, &batch.targets, v.x_mean)?;
    let (tri, summary) = g.triplet_batch_hard(v.mu_q, &batch.labels, model.config.margin)?;

    let a = g.scale(klg, w.alpha);
    let b = g.scale(klc, w.beta);
    let c = g.scale(rec, -w.omega);
    let d = g.scale(tri, w.gamma);
    let mut loss = g.add(a, b)?;
    loss = g.add(loss, c)?;
    loss = g.add(loss, d)?;
    let mut supervised = 0.0;
    if w.supervised > 0.0 {
        let ce = cross_entropy_graph(g, v.logits, &batch.labels)?;
        supervised = g.value(ce).item();
        let e = g.scale(ce, w.supervised);
        loss = g.add(loss, e)?;
    }
    let terms = LossTerms {
        kl_gauss: g.value(klg).item(),
        kl_cat: g.value(klc).item(),
        recon: g.value(rec).item(),
        triplet: g.value(tri).item(),
        supervised,
    };
    terms.check_finite()?;
    Ok(Objective {
        loss,
        terms,
        triplet: summary,
        vars: v,
    })
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub kl_gauss: f64,
    pub kl_cat: f64,
    pub recon: f64,
    pub triplet: f64,
    pub train_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Batches whose triplet term was undefined because only one class was present.
    pub degenerate_triplet_batches: usize,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,kl_gauss,kl_cat,recon,triplet,train_acc\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                e.epoch, e.loss, e.kl_gauss, e.kl_cat, e.recon, e.triplet, e.train_acc
            );
        }
        s
    }
}

/// Category-to-label assignment maximizing agreement in a `k × k`
/// confusion table (rows: category, columns: label).
///
/// Exhaustive for `k ≤ 8`, greedy beyond.
pub fn best_label_map(confusion: &[Vec<usize>]) -> Vec<usize> {
    let k = confusion.len();
    if k <= 8 {
        let mut perm: Vec<usize> = (0..k).collect();
        let mut best = perm.clone();
        let mut best_score = 0;
        permute(&mut perm, 0, &mut |p| {
            let s: usize = p.iter().enumerate().map(|(c, &l)| confusion[c][l]).sum();
            if s > best_score {
                best_score = s;
                best = p.to_vec();
            }
        });
        return best;
    }
    let mut map = vec![usize::MAX; k];
    let mut used = vec![false; k];
    let mut cells: Vec<(usize, usize, usize)> = (0..k)
        .flat_map(|c| (0..k).map(move |l| (c, l)))
        .map(|(c, l)| (confusion[c][l], c, l))
        .collect();
    cells.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (_, c, l) in cells {
        if map[c] == usize::MAX && !used[l] {
            map[c] = l;
            used[l] = true;
        }
    }
    map
}

fn permute(p: &mut Vec<usize>, i: usize, f: &mut dyn FnMut(&[usize])) {
    if i == p.len() {
        f(p);
        return;
    }
    for j in i..p.len() {
        p.swap(i, j);
        permute(p, i + 1, f);
        p.swap(i, j);
    }
}

fn mapped_accuracy(confusion: &[Vec<usize>]) -> f64 {
    let map = best_label_map(confusion);
    let total: usize = confusion.iter().flatten().sum();
    let hit: usize = map.iter().enumerate().map(|(c, &l)| confusion[c][l]).sum();
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Trains on the records of `train` whose label is below `classes`.
///
/// Parameters, batch order and sampling noise all derive from
/// `config.seed`, so equal inputs give equal models.
pub fn train_gmvae(
    train: &MeasurementDataset,
    classes: usize,
    config: &GmvaeConfig,
) -> Result<(GmvaeModel, TrainingLog)> {
    let records: Vec<&MeasurementRecord> = train.records.iter().filter(|r| r.label < classes).collect();
    let labels: HashSet<usize> = records.iter().map(|r| r.label).collect();
    let configs: HashSet<&str> = records.iter().map(|r| r.config_id.as_str()).collect();
    if labels.len() < 2 || configs.len() < 2 {
        return Err(Error::invalid(format!(
            "training needs at least 2 classes and 2 configurations, got {} and {}",
            labels.len(),
            configs.len()
        )));
    }
    let side = measurement_side(records[0].y.len())?;
    let mut model = GmvaeModel::new(config.clone(), side, classes)?;
    let mut adam = AdamState::new(&model.store, config.lr);
    let mut order_rng = Rng::stream(config.seed, 1);
    let mut noise_rng = Rng::stream(config.seed, 2);
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..records.len()).collect();

    for epoch in 0..config.epochs {
        order_rng.shuffle(&mut order);
        let tau = config.tau_at(epoch);
        let weights = config.weights_at(epoch);
        let mut sums = LossTerms::default();
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (step, idx) in order.chunks(config.batch).enumerate() {
            let diverged = |e: Error| match e {
                Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) => Error::Diverged {
                    epoch,
                    step,
                    reason: e.to_string(),
                },
                other => other,
            };
            let batch_records: Vec<&MeasurementRecord> = idx.iter().map(|&i| records[i]).collect();
            let batch = Batch::from_records(&batch_records)?;
            let noise = model.draw_noise(idx.len(), true, &mut noise_rng);
            let (grads, stats, obj_terms, logits) = {
                let mut sess = Session::new(&model.store, Mode::Train);
                let obj = objective(&model, &mut sess, &batch, &noise, tau, &weights).map_err(diverged)?;
                let total = sess.graph.value(obj.loss).item();
                if !total.is_finite() {
                    return Err(diverged(Error::NonFiniteLoss { term: "total".into() }));
                }
                if obj.triplet.degenerate {
                    log.degenerate_triplet_batches += 1;
                }
                let g = sess.graph.backward(obj.loss)?;
                let grads = sess.param_grads(&g);
                let logits = sess.graph.value(obj.vars.logits).clone();
                (grads, sess.take_batch_stats(), obj.terms, logits)
            };
            adam.step(&mut model.store, &grads).map_err(diverged)?;
            model.store.apply_batch_stats(&stats)?;

            let n = idx.len() as f64;
            loss_sum += obj_terms.total(&weights) * n;
            sums.kl_gauss += obj_terms.kl_gauss * n;
            sums.kl_cat += obj_terms.kl_cat * n;
            sums.recon += obj_terms.recon * n;
            sums.triplet += obj_terms.triplet * n;
            seen += idx.len();
            for (i, &l) in batch.labels.iter().enumerate() {
                confusion[argmax_row(logits.row(i))][l] += 1;
            }
        }
        let n = seen.max(1) as f64;
        let row = EpochLog {
            epoch: epoch + 1,
            loss: loss_sum / n,
            kl_gauss: sums.kl_gauss / n,
            kl_cat: sums.kl_cat / n,
            recon: sums.recon / n,
            triplet: sums.triplet / n,
            train_acc: mapped_accuracy(&confusion),
        };
        log::debug!(
            "gmvae epoch {}: loss {:.4} acc {:.3}",
            row.epoch,
            row.loss,
            row.train_acc
        );
        log.epochs.push(row);
    }

    fit_label_map(&mut model, &records)?;
    Ok((model, log))
}

/// Sets the label map from eval-mode category predictions on `records`.
pub fn fit_label_map(model: &mut GmvaeModel, records: &[&MeasurementRecord]) -> Result<()> {
    let identity: Vec<usize> = (0..model.classes).collect();
    model.set_label_map(&identity)?;
    let inf = model.infer_records(records)?;
    let mut confusion = vec![vec![0usize; model.classes]; model.classes];
    for (cat, r) in inf.categories.iter().zip(records) {
        if r.label < model.classes {
            confusion[*cat][r.label] += 1;
        }
    }
    model.set_label_map(&best_label_map(&confusion))
}

/// Deterministic inference outputs for a set of measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// Class probabilities indexed by label.
    pub probabilities: Vec<Vec<f64>>,
    pub predicted: Vec<usize>,
    /// Raw argmax category before the label map.
    pub categories: Vec<usize>,
    pub latent_means: Vec<Vec<f64>>,
    pub reconstructions: Vec<Vec<f64>>,
}

/// Tensors produced by [`GmvaeModel::encode`].
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub logits: Tensor,
    pub category: Tensor,
    pub mu: Tensor,
    pub var: Tensor,
    pub z: Tensor,
}

impl GmvaeModel {
    /// Encoder outputs under explicit noise. Eval mode uses running
    /// batch-norm statistics; the category is still the relaxed sample.
    pub fn encode(&self, inputs: &Tensor, mode: Mode, noise: &SamplingNoise) -> Result<Encoded> {
        let mut sess = Session::new(&self.store, mode);
        let y = sess.graph.constant(inputs.clone());
        let v = self.forward(&mut sess, y, noise, CategoryPath::Sampled, self.config.tau)?;
        let g = &sess.graph;
        Ok(Encoded {
            logits: g.value(v.logits).clone(),
            category: g.value(v.category).clone(),
            mu: g.value(v.mu_q).clone(),
            var: g.value(v.logvar_q).map(f64::exp),
            z: g.value(v.z).clone(),
        })
    }

    /// Argmax category, mean latent and the decoded image, in eval mode.
    pub fn infer(&self, inputs: &Tensor) -> Result<Inference> {
        let shape = inputs.shape();
        if shape.len() != 4 {
            return Err(Error::shape("gmvae input", &[0, 2, self.side, self.side], shape));
        }
        let n = shape[0];
        let per = inputs.numel() / n.max(1);
        let map = self.label_map()?;
        let mut out = Inference {
            probabilities: Vec::with_capacity(n),
            predicted: Vec::with_capacity(n),
            categories: Vec::with_capacity(n),
            latent_means: Vec::with_capacity(n),
            reconstructions: Vec::with_capacity(n),
        };
        for start in (0..n).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(n);
            let chunk = Tensor::new(
                &[end - start, shape[1], shape[2], shape[3]],
                inputs.data()[start * per..end * per].to_vec(),
            )?;
            let mut sess = self.eval_session();
            let y = sess.graph.constant(chunk);
            let noise = self.zero_noise(end - start);
            let v = self.forward(&mut sess, y, &noise, CategoryPath::Argmax, self.config.tau)?;
            let g = &sess.graph;
            let (logits, mu, x) = (g.value(v.logits), g.value(v.mu_q), g.value(v.x_mean));
            for i in 0..end - start {
                let mut p = logits.row(i).to_vec();
                softmax_in_place(&mut p);
                let cat = argmax_row(&p);
                let mut by_label = vec![0.0; self.classes];
                for (c, &l) in map.iter().enumerate() {
                    by_label[l] = p[c];
                }
                out.categories.push(cat);
                out.predicted.push(map[cat]);
                out.probabilities.push(by_label);
                out.latent_means.push(mu.row(i).to_vec());
                out.reconstructions.push(x.row(i).to_vec());
            }
        }
        Ok(out)
    }

    pub fn infer_records(&self, records: &[&MeasurementRecord]) -> Result<Inference> {
        if records.is_empty() {
            return Ok(Inference {
                probabilities: vec![],
                predicted: vec![],
                categories: vec![],
                latent_means: vec![],
                reconstructions: vec![],
            });
        }
        self.infer(&stack_measurements(records, self.side)?)
    }

    fn single(&self, y: &[f64]) -> Result<Inference> {
        let m = self.side * self.side;
        if y.len() != 2 * m {
            return Err(Error::shape("gmvae measurement", &[2 * m], &[y.len()]));
        }
        self.infer(&Tensor::new(&[1, 2, self.side, self.side], y.to_vec())?)
    }

    /// Predicted label and per-label probabilities.
    pub fn classify(&self, y: &[f64]) -> Result<(usize, Vec<f64>)> {
        let mut inf = self.single(y)?;
        Ok((inf.predicted[0], inf.probabilities.swap_remove(0)))
    }

    /// Image estimate from the argmax category and mean latent.
    pub fn reconstruct(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.single(y)?.reconstructions.swap_remove(0))
    }

    /// Mean latent `μ_zφ` for one measurement.
    pub fn latent_mean(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.single(y)?.latent_means.swap_remove(0))
    }
}
