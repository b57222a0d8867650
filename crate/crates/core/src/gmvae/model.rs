use serde::{Deserialize, Serialize};

use super::loss::{gumbel_softmax_graph, LossWeights};
use crate::error::{Error, Result};
use crate::tensor::kernels::conv_out_len;
use crate::tensor::{Layer, LayerSpec, Mode, ParamStore, Rng, Sequential, Session, Tensor, Var};

/// Log-variance outputs are clamped to this range.
pub const LOGVAR_BOUNDS: (f64, f64) = (-10.0, 10.0);
/// Dropout rate on the encoder features and inside the classifier.
pub const DROPOUT_RATE: f64 = 0.2;
/// Name of the non-trainable category-to-label permutation.
pub const LABEL_MAP_PARAM: &str = "classify.label_map";

/// Hyperparameters and architecture sizes of the GMVAE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmvaeConfig {
    pub alpha: f64,
    pub beta: f64,
    pub omega: f64,
    pub gamma: f64,
    /// Gumbel-softmax temperature.
    pub tau: f64,
    /// When set, `tau` is annealed linearly to this value over training.
    #[serde(default)]
    pub tau_final: Option<f64>,
    pub margin: f64,
    /// Epochs over which the triplet weight ramps linearly from 0 to `gamma`.
    #[serde(default)]
    pub triplet_warmup: usize,
    /// Latent dimension.
    pub d: usize,
    pub classifier_hidden: usize,
    pub conv_channels: Vec<usize>,
    /// Weight of an extra label cross-entropy on the class logits.
    #[serde(default)]
    pub supervised_weight: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for GmvaeConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 200.0,
            omega: 50.0,
            gamma: 50.0,
            tau: 0.5,
            tau_final: None,
            margin: 1.0,
            triplet_warmup: 0,
            d: 64,
            classifier_hidden: 128,
            conv_channels: vec![8, 16, 32],
            supervised_weight: 0.0,
            epochs: 60,
            lr: 1e-3,
            batch: 64,
            seed: 0,
        }
    }
}

impl GmvaeConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            omega: self.omega,
            gamma: self.gamma,
            supervised: self.supervised_weight,
        }
    }

    /// Weights in effect during `epoch` (0-based).
    pub fn weights_at(&self, epoch: usize) -> LossWeights {
        let mut w = self.weights();
        if self.triplet_warmup > 0 {
            w.gamma *= (epoch as f64 / self.triplet_warmup as f64).min(1.0);
        }
        w
    }

    /// Temperature used during `epoch` (0-based).
    pub fn tau_at(&self, epoch: usize) -> f64 {
        match self.tau_final {
            Some(end) if self.epochs > 1 => {
                let f = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
                self.tau + f * (end - self.tau)
            }
            _ => self.tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(what.to_string()))
            }
        };
        check(self.tau > 0.0, "tau must be positive")?;
        check(self.tau_final.is_none_or(|t| t > 0.0), "tau_final must be positive")?;
        check(self.margin >= 0.0, "margin must be non-negative")?;
        check(self.d > 0 && self.classifier_hidden > 0, "layer sizes must be positive")?;
        check(!self.conv_channels.is_empty(), "conv_channels must not be empty")?;
        check(
            self.conv_channels.iter().all(|&c| c > 0),
            "conv channels must be positive",
        )?;
        check(self.batch > 0, "batch must be positive")?;
        check(self.lr > 0.0, "lr must be positive")?;
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("omega", self.omega),
            ("gamma", self.gamma),
            ("supervised_weight", self.supervised_weight),
        ] {
            check(
                v >= 0.0 && v.is_finite(),
                &format!("{name} must be finite and non-negative"),
            )?;
        }
        Ok(())
    }
}

/// How the category fed to the latent heads is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CategoryPath {
    /// Gumbel-softmax relaxed sample.
    Sampled,
    /// One-hot of the argmax logit.
    Argmax,
}

/// Noise consumed by one forward pass, drawn up front so a pass can be
/// replayed exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingNoise {
    /// Gumbel draws, `[n, k]`.
    pub gumbel: Tensor,
    /// Standard normal draws for the reparameterization, `[n, d]`.
    pub eps: Tensor,
    pub feature_dropout: Option<Tensor>,
    pub classifier_dropout: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub(crate) struct Networks {
    encoder: Sequential,
    pub(crate) feature_len: usize,
    cls_hidden: Layer,
    cls_out: Layer,
    inf_hidden: Layer,
    inf_mu: Layer,
    inf_logvar: Layer,
    prior_mu: Layer,
    prior_logvar: Layer,
    dec_dense: Layer,
    dec_grid: [usize; 3],
    dec_convs: Sequential,
    dec_out: Layer,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub category: Var,
    pub mu_q: Var,
    pub logvar_q: Var,
    pub z: Var,
    pub mu_p: Var,
    pub logvar_p: Var,
    pub x_mean: Var,
}

/// Trained or freshly initialized GMVAE.
#[derive(Clone, Debug)]
pub struct GmvaeModel {
    pub config: GmvaeConfig,
    pub side: usize,
    pub classes: usize,
    pub store: ParamStore,
    pub(crate) nets: Networks,
}

fn dense(name: &str, i: usize, o: usize) -> Result<Layer> {
    Layer::new(
        name,
        LayerSpec::Dense {
            in_features: i,
            out_features: o,
        },
    )
}

fn build_networks(cfg: &GmvaeConfig, side: usize, k: usize) -> Result<Networks> {
    let mut enc = Vec::new();
    let (mut ch, mut hw) = (2, side);
    for (i, &c) in cfg.conv_channels.iter().enumerate() {
        enc.push(Layer::new(
            format!("enc.conv{i}"),
            LayerSpec::Conv2d {
                in_channels: ch,
                out_channels: c,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
        )?);
        enc.push(Layer::new(format!("enc.bn{i}"), LayerSpec::Batchnorm { features: c })?);
        enc.push(Layer::new(format!("enc.relu{i}"), LayerSpec::Relu)?);
        ch = c;
        hw = conv_out_len(hw, 3, 2, 1).ok_or_else(|| Error::invalid("image too small for the conv stack"))?;
    }
    let feature_len = ch * hw * hw;
    let d = cfg.d;
    let h = cfg.classifier_hidden;

    let mut dec = Vec::new();
    let mut dch = ch;
    let mut dhw = hw;
    for (i, &c) in cfg.conv_channels.iter().rev().skip(1).enumerate() {
        dec.push(Layer::new(
            format!("dec.tconv{i}"),
            LayerSpec::TransposedConv2d {
                in_channels: dch,
                out_channels: c,
                kernel: 3,
                stride: 2,
                padding: 1,
                output_padding: 1,
            },
        )?);
        dec.push(Layer::new(format!("dec.relu{i}"), LayerSpec::Relu)?);
        dch = c;
        dhw *= 2;
    }
    let dec_flat = dch * dhw * dhw;

    Ok(Networks {
        encoder: Sequential::new(enc),
        feature_len,
        cls_hidden: dense("cls.hidden", feature_len, h)?,
        cls_out: dense("cls.out", h, k)?,
        inf_hidden: dense("inf.hidden", feature_len + k, d)?,
        inf_mu: dense("inf.mu", d, d)?,
        inf_logvar: dense("inf.logvar", d, d)?,
        prior_mu: dense("prior.mu", k, d)?,
        prior_logvar: dense("prior.logvar", k, d)?,
        dec_dense: dense("dec.dense", d, feature_len)?,
        dec_grid: [ch, hw, hw],
        dec_convs: Sequential::new(dec),
        dec_out: dense("dec.out", dec_flat, side * side)?,
    })
}

impl Networks {
    fn all_layers(&self) -> Vec<&Layer> {
        let mut v: Vec<&Layer> = self.encoder.layers.iter().collect();
        v.extend([
            &self.cls_hidden,
            &self.cls_out,
            &self.inf_hidden,
            &self.inf_mu,
            &self.inf_logvar,
            &self.prior_mu,
            &self.prior_logvar,
            &self.dec_dense,
        ]);
        v.extend(self.dec_convs.layers.iter());
        v.push(&self.dec_out);
        v
    }
}

impl GmvaeModel {
    /// Builds the networks for `side × side` images and `classes` categories
    /// and initializes parameters from `config.seed`.
    pub fn new(config: GmvaeConfig, side: usize, classes: usize) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {classes}")));
        }
        let nets = build_networks(&config, side, classes)?;
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(config.seed, 0);
        for l in nets.all_layers() {
            l.init(&mut store, &mut rng);
        }
        let identity: Vec<f64> = (0..classes).map(|c| c as f64).collect();
        store.insert(LABEL_MAP_PARAM, Tensor::from_vec(identity), false);
        Ok(Self {
            config,
            side,
            classes,
            store,
            nets,
        })
    }

    /// Rebuilds a model and overwrites its parameters with checkpoint values.
    pub fn from_named(config: GmvaeConfig, side: usize, classes: usize, named: &[(String, Tensor)]) -> Result<Self> {
        let mut m = Self::new(config, side, classes)?;
        m.store.load_named(named)?;
        m.label_map()?;
        Ok(m)
    }

    pub fn feature_len(&self) -> usize {
        self.nets.feature_len
    }

    /// Category index to class label.
    pub fn label_map(&self) -> Result<Vec<usize>> {
        let t = self.store.tensor(LABEL_MAP_PARAM)?;
        let map: Vec<usize> = t.data().iter().map(|&v| v as usize).collect();
        let mut seen = vec![false; self.classes];
        for &m in &map {
            if m >= self.classes || std::mem::replace(&mut seen[m], true) {
                return Err(Error::invalid("label map is not a permutation"));
            }
        }
        Ok(map)
    }

    pub fn set_label_map(&mut self, map: &[usize]) -> Result<()> {
        let t = self.store.tensor_mut(LABEL_MAP_PARAM)?;
        if map.len() != t.numel() {
            return Err(Error::shape(LABEL_MAP_PARAM, t.shape(), &[map.len()]));
        }
        for (dst, &m) in t.data_mut().iter_mut().zip(map) {
            *dst = m as f64;
        }
        self.label_map().map(|_| ())
    }

    /// Draws the noise for a batch of `n`. Dropout masks are only drawn when
    /// `with_dropout` is set.
    pub fn draw_noise(&self, n: usize, with_dropout: bool, rng: &mut Rng) -> SamplingNoise {
        let mut fill = |shape: &[usize], f: &mut dyn FnMut(&mut Rng) -> f64| {
            let len = shape.iter().product();
            Tensor::new(shape, (0..len).map(|_| f(rng)).collect()).expect("shape matches length")
        };
        let gumbel = fill(&[n, self.classes], &mut |r| r.gumbel());
        let eps = fill(&[n, self.config.d], &mut |r| r.normal());
        let (feature_dropout, classifier_dropout) = if with_dropout {
            (
                Some(crate::tensor::dropout_mask(
                    &[n, self.nets.feature_len],
                    DROPOUT_RATE,
                    rng,
                )),
                Some(crate::tensor::dropout_mask(
                    &[n, self.config.classifier_hidden],
                    DROPOUT_RATE,
                    rng,
                )),
            )
        } else {
            (None, None)
        };
        SamplingNoise {
            gumbel,
            eps,
            feature_dropout,
            classifier_dropout,
        }
    }

    /// Noise with zero Gumbel and Gaussian draws and no dropout.
    pub fn zero_noise(&self, n: usize) -> SamplingNoise {
        SamplingNoise {
            gumbel: Tensor::zeros(&[n, self.classes]),
            eps: Tensor::zeros(&[n, self.config.d]),
            feature_dropout: None,
            classifier_dropout: None,
        }
    }

    /// Encoder features `ŷ`, `[n, feature_len]`.
    pub(crate) fn features(&self, sess: &mut Session<'_>, y: Var) -> Result<Var> {
        let shape = sess.graph.shape(y).to_vec();
        let want = [shape.first().copied().unwrap_or(0), 2, self.side, self.side];
        if shape != want {
            return Err(Error::shape("gmvae input", &want, &shape));
        }
        let mut unused = Rng::new(0);
        let f = self.nets.encoder.forward(sess, y, &mut unused)?;
        sess.graph.reshape(f, &[want[0], self.nets.feature_len])
    }

    fn layer(&self, sess: &mut Session<'_>, l: &Layer, x: Var) -> Result<Var> {
        l.forward(sess, x, &mut Rng::new(0))
    }

    fn clamp_logvar(sess: &mut Session<'_>, v: Var) -> Var {
        sess.graph.clamp(v, LOGVAR_BOUNDS.0, LOGVAR_BOUNDS.1)
    }

    /// Full forward pass on a `[n, 2, side, side]` input.
    pub fn forward(
        &self,
        sess: &mut Session<'_>,
        y: Var,
        noise: &SamplingNoise,
        path: CategoryPath,
        tau: f64,
    ) -> Result<ForwardVars> {
        let n = sess.graph.shape(y)[0];
        let feats = self.features(sess, y)?;

        let h = self.layer(sess, &self.nets.cls_hidden, feats)?;
        let mut h = sess.graph.relu(h);
        if let Some(mask) = &noise.classifier_dropout {
            h = sess.graph.mul_const(h, mask.clone())?;
        }
        let logits = self.layer(sess, &self.nets.cls_out, h)?;

        let category = match path {
            CategoryPath::Sampled => gumbel_softmax_graph(&mut sess.graph, logits, &noise.gumbel, tau)?,
            CategoryPath::Argmax => {
                let lv = sess.graph.value(logits).clone();
                let k = self.classes;
                let mut onehot = vec![0.0; n * k];
                for i in 0..n {
                    onehot[i * k + argmax_row(lv.row(i))] = 1.0;
                }
                sess.graph.constant(Tensor::new(&[n, k], onehot)?)
            }
        };

        let mut f = feats;
        if let Some(mask) = &noise.feature_dropout {
            f = sess.graph.mul_const(f, mask.clone())?;
        }
        let u = sess.graph.concat(f, category)?;
        let hi = self.layer(sess, &self.nets.inf_hidden, u)?;
        let hi = sess.graph.relu(hi);
        let mu_q = self.layer(sess, &self.nets.inf_mu, hi)?;
        let lq = self.layer(sess, &self.nets.inf_logvar, hi)?;
        let logvar_q = Self::clamp_logvar(sess, lq);

        let half = sess.graph.scale(logvar_q, 0.5);
        let std = sess.graph.exp(half);
        let spread = sess.graph.mul_const(std, noise.eps.clone())?;
        let z = sess.graph.add(mu_q, spread)?;

        let mu_p = self.layer(sess, &self.nets.prior_mu, category)?;
        let lp = self.layer(sess, &self.nets.prior_logvar, category)?;
        let logvar_p = Self::clamp_logvar(sess, lp);

        let x_mean = self.decode(sess, z)?;
        Ok(ForwardVars {
            logits,
            category,
            mu_q,
            logvar_q,
            z,
            mu_p,
            logvar_p,
            x_mean,
        })
    }

    /// Generative network: latent `[n, d]` to image means `[n, side²]`.
    pub fn decode(&self, sess: &mut Session<'_>, z: Var) -> Result<Var> {
        let n = sess.graph.shape(z)[0];
        let h = self.layer(sess, &self.nets.dec_dense, z)?;
        let h = sess.graph.relu(h);
        let [c, hh, ww] = self.nets.dec_grid;
        let h = sess.graph.reshape(h, &[n, c, hh, ww])?;
        let h = self.nets.dec_convs.forward(sess, h, &mut Rng::new(0))?;
        let flat: usize = sess.graph.shape(h)[1..].iter().product();
        let h = sess.graph.reshape(h, &[n, flat])?;
        let out = self.layer(sess, &self.nets.dec_out, h)?;
        Ok(sess.graph.sigmoid(out))
    }

    /// Eval-mode session over this model's parameters.
    pub fn eval_session(&self) -> Session<'_> {
        Session::new(&self.store, Mode::Eval)
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax_row(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
