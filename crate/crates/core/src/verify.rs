//! Gradient-check suite over every layer kind, every loss and the three
//! assembled training objectives, on small randomized shapes.

use crate::baseline::{mse_graph, AeConfig, AeModel, CaeModel};
use crate::error::Result;
use crate::gmvae::{
    cross_entropy_graph, kl_categorical_graph, kl_gaussian_graph, objective, reconstruction_graph, Batch, GmvaeConfig,
    GmvaeModel, LossWeights,
};
use crate::tensor::{
    dropout_mask, grad_check, GradCheckOptions, Layer, LayerSpec, Mode, ParamStore, Rng, Sequential, Session, Tensor,
    Var,
};

/// Pass threshold on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Worst result of one suite case over all seeds.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    /// Parameter responsible for `max_rel_error`.
    pub worst_param: String,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADCHECK_TOLERANCE
    }
}

fn random(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).expect("shape matches length")
}

/// Random labels with every class present at least twice.
fn labels(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut l: Vec<usize> = (0..n).map(|i| i % k).collect();
    rng.shuffle(&mut l);
    l
}

type LossFn = Box<dyn Fn(&mut Session<'_>) -> Result<Var>>;

struct Case {
    store: ParamStore,
    eps: f64,
    loss: LossFn,
}

/// A stack of layers applied to a fixed input, scored by MSE against a
/// fixed target.
fn layer_case(layers: Vec<Layer>, input: Tensor, seed: u64) -> Result<Case> {
    let mut rng = Rng::stream(seed, 1);
    let net = Sequential::new(layers);
    let mut store = ParamStore::new();
    net.init(&mut store, &mut rng);
    let out = net.output_shape(input.shape())?;
    let target = random(&out, &mut rng, -1.0, 1.0);
    Ok(Case {
        store,
        eps: 1e-6,
        loss: Box::new(move |sess| {
            let x = sess.graph.constant(input.clone());
            let mut drop_rng = Rng::stream(seed, 2);
            let y = net.forward(sess, x, &mut drop_rng)?;
            let n = out[0];
            let flat = sess.graph.reshape(y, &[n, out.iter().skip(1).product()])?;
            mse_graph(sess, flat, &target.clone().reshape(&[n, out.iter().skip(1).product()])?)
        }),
    })
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

fn conv(name: &str, i: usize, o: usize, stride: usize) -> Result<Layer> {
    Layer::new(
        name,
        LayerSpec::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride,
            padding: 1,
        },
    )
}

/// Parameters used directly as loss inputs.
fn leaf_case(params: Vec<(&str, Tensor)>, loss: LossFn) -> Case {
    let mut store = ParamStore::new();
    for (name, t) in params {
        store.insert(name, t, true);
    }
    Case { store, eps: 1e-6, loss }
}

/// Moves every trainable parameter off its initial value. Zero-initialized
/// biases would otherwise put ReLU inputs exactly on the kink.
fn jitter(store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
    let names: Vec<String> = store.trainable_names().map(str::to_string).collect();
    for name in names {
        store
            .tensor_mut(&name)?
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.1 * rng.normal());
    }
    Ok(())
}

fn build_case(name: &str, seed: u64) -> Result<Case> {
    let mut case = build_raw_case(name, seed)?;
    jitter(&mut case.store, &mut Rng::stream(seed, 3))?;
    Ok(case)
}

fn build_raw_case(name: &str, seed: u64) -> Result<Case> {
    let mut rng = Rng::stream(seed, 0);
    let n = 4 + rng.below(3);
    Ok(match name {
        "dense" => layer_case(vec![dense("d", 3, 2)?], random(&[n, 3], &mut rng, -1.0, 1.0), seed)?,
        "conv2d" => {
            let s = 1 + rng.below(2);
            layer_case(
                vec![conv("c", 2, 3, s)?],
                random(&[2, 2, 5, 5], &mut rng, -1.0, 1.0),
                seed,
            )?
        }
        "transposed_conv2d" => layer_case(
            vec![Layer::new(
                "t",
                LayerSpec::TransposedConv2d {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    output_padding: 1,
                },
            )?],
            random(&[2, 2, 3, 3], &mut rng, -1.0, 1.0),
            seed,
        )?,
        "batchnorm" => layer_case(
            vec![
                conv("c", 2, 3, 1)?,
                Layer::new("bn", LayerSpec::Batchnorm { features: 3 })?,
            ],
            random(&[n, 2, 3, 3], &mut rng, -1.0, 1.0),
            seed,
        )?,
        "batchnorm_dense" => layer_case(
            vec![
                dense("d", 3, 4)?,
                Layer::new("bn", LayerSpec::Batchnorm { features: 4 })?,
            ],
            random(&[n, 3], &mut rng, -1.0, 1.0),
            seed,
        )?,
        "relu" => layer_case(
            vec![dense("d", 3, 5)?, Layer::new("r", LayerSpec::Relu)?],
            random(&[n, 3], &mut rng, -1.0, 1.0),
            seed,
        )?,
        "sigmoid" => layer_case(
            vec![dense("d", 3, 5)?, Layer::new("s", LayerSpec::Sigmoid)?],
            random(&[n, 3], &mut rng, -2.0, 2.0),
            seed,
        )?,
        "dropout" => layer_case(
            vec![dense("d", 3, 6)?, Layer::new("p", LayerSpec::Dropout { rate: 0.3 })?],
            random(&[n, 3], &mut rng, -1.0, 1.0),
            seed,
        )?,
        "maxpool2d" => layer_case(
            vec![
                conv("c", 1, 2, 1)?,
                Layer::new("m", LayerSpec::Maxpool2d { window: 2 })?,
            ],
            random(&[2, 1, 4, 4], &mut rng, -1.0, 1.0),
            seed,
        )?,
        "upsample" => {
            let input = random(&[2, 1, 3, 3], &mut rng, -1.0, 1.0);
            let mut c = layer_case(vec![conv("c", 1, 2, 1)?], input.clone(), seed)?;
            let net = Sequential::new(vec![conv("c", 1, 2, 1)?]);
            let target = random(&[2, 2 * 36], &mut rng, -1.0, 1.0);
            c.loss = Box::new(move |sess| {
                let x = sess.graph.constant(input.clone());
                let y = net.forward(sess, x, &mut Rng::new(0))?;
                let up = sess.graph.upsample_nearest(y, 2)?;
                let flat = sess.graph.reshape(up, &[2, 72])?;
                mse_graph(sess, flat, &target)
            });
            c
        }
        "kl_gaussian" => {
            let d = 2 + rng.below(3);
            leaf_case(
                vec![
                    ("mu_q", random(&[n, d], &mut rng, -1.0, 1.0)),
                    ("lv_q", random(&[n, d], &mut rng, -1.0, 1.0)),
                    ("mu_p", random(&[n, d], &mut rng, -1.0, 1.0)),
                    ("lv_p", random(&[n, d], &mut rng, -1.0, 1.0)),
                ],
                Box::new(|sess| {
                    let (a, b, c, d) = (
                        sess.param("mu_q")?,
                        sess.param("lv_q")?,
                        sess.param("mu_p")?,
                        sess.param("lv_p")?,
                    );
                    kl_gaussian_graph(&mut sess.graph, a, b, c, d)
                }),
            )
        }
        "kl_categorical" => leaf_case(
            vec![("logits", random(&[n, 4], &mut rng, -2.0, 2.0))],
            Box::new(|sess| {
                let l = sess.param("logits")?;
                kl_categorical_graph(&mut sess.graph, l)
            }),
        ),
        "reconstruction" => {
            let target = random(&[n, 6], &mut rng, 0.0, 1.0);
            leaf_case(
                vec![("pre", random(&[n, 6], &mut rng, -2.0, 2.0))],
                Box::new(move |sess| {
                    let p = sess.param("pre")?;
                    let mu = sess.graph.sigmoid(p);
                    reconstruction_graph(&mut sess.graph, &target, mu)
                }),
            )
        }
        "triplet" => {
            let l = labels(n + 2, 3, &mut rng);
            leaf_case(
                vec![("emb", random(&[n + 2, 3], &mut rng, -1.0, 1.0))],
                Box::new(move |sess| {
                    let e = sess.param("emb")?;
                    Ok(sess.graph.triplet_batch_hard(e, &l, 1.0)?.0)
                }),
            )
        }
        "cross_entropy" => {
            let l = labels(n, 3, &mut rng);
            leaf_case(
                vec![("logits", random(&[n, 3], &mut rng, -2.0, 2.0))],
                Box::new(move |sess| {
                    let p = sess.param("logits")?;
                    cross_entropy_graph(&mut sess.graph, p, &l)
                }),
            )
        }
        "gmvae_objective" => {
            let config = GmvaeConfig {
                d: 3,
                classifier_hidden: 5,
                conv_channels: vec![2, 3],
                supervised_weight: 2.0,
                seed,
                ..GmvaeConfig::default()
            };
            let (side, k, n) = (8, 3, 6);
            let model = GmvaeModel::new(config, side, k)?;
            let batch = Batch {
                inputs: random(&[n, 2, side, side], &mut rng, 0.0, 1.0),
                targets: random(&[n, side * side], &mut rng, 0.0, 1.0),
                labels: labels(n, k, &mut rng),
            };
            let noise = model.draw_noise(n, true, &mut rng);
            let weights = LossWeights {
                supervised: 2.0,
                ..LossWeights::default()
            };
            let store = model.store.clone();
            Case {
                store,
                eps: 1e-5,
                loss: Box::new(move |sess| Ok(objective(&model, sess, &batch, &noise, 0.5, &weights)?.loss)),
            }
        }
        "ae_objective" => {
            let config = AeConfig {
                channels: vec![2, 2, 3],
                seed,
                ..AeConfig::default()
            };
            let side = 8;
            let model = AeModel::new(config, side)?;
            let inputs = random(&[3, 2, side, side], &mut rng, 0.0, 1.0);
            let targets = random(&[3, side * side], &mut rng, 0.0, 1.0);
            Case {
                store: model.store.clone(),
                eps: 1e-6,
                loss: Box::new(move |sess| {
                    let y = sess.graph.constant(inputs.clone());
                    let x = model.forward(sess, y)?;
                    mse_graph(sess, x, &targets)
                }),
            }
        }
        "cae_objective" => {
            let (side, k, hidden, n) = (8, 3, 5, 6);
            let model = CaeModel::new(side, k, &[2, 3], hidden, seed)?;
            let images = random(&[n, side * side], &mut rng, 0.0, 1.0);
            let l = labels(n, k, &mut rng);
            let mask = dropout_mask(&[n, hidden], 0.2, &mut rng);
            Case {
                store: model.store.clone(),
                eps: 1e-6,
                loss: Box::new(move |sess| {
                    let logits = model.logits(sess, &images, Some(mask.clone()))?;
                    cross_entropy_graph(&mut sess.graph, logits, &l)
                }),
            }
        }
        other => {
            return Err(crate::error::Error::invalid(format!(
                "unknown gradcheck case `{other}`"
            )))
        }
    })
}

/// Names of all suite cases.
pub const SUITE_CASES: [&str; 18] = [
    "dense",
    "conv2d",
    "transposed_conv2d",
    "batchnorm",
    "batchnorm_dense",
    "relu",
    "sigmoid",
    "dropout",
    "maxpool2d",
    "upsample",
    "kl_gaussian",
    "kl_categorical",
    "reconstruction",
    "triplet",
    "cross_entropy",
    "gmvae_objective",
    "ae_objective",
    "cae_objective",
];

/// Runs one case over `seeds` seeds, probing at most `max_entries` entries
/// per parameter tensor.
pub fn run_case(name: &str, seeds: usize, max_entries: Option<usize>) -> Result<CaseResult> {
    let mut worst = CaseResult {
        name: name.to_string(),
        seeds,
        max_rel_error: 0.0,
        worst_param: String::new(),
    };
    for seed in 0..seeds as u64 {
        let case = build_case(name, seed)?;
        let opts = GradCheckOptions {
            eps: case.eps,
            mode: Mode::Train,
            max_entries,
            seed,
        };
        let report = grad_check(&case.store, &opts, |s| (case.loss)(s))?;
        for p in report.params {
            if p.rel_error > worst.max_rel_error || worst.worst_param.is_empty() {
                worst.max_rel_error = p.rel_error;
                worst.worst_param = format!("{} (seed {seed})", p.name);
            }
        }
    }
    Ok(worst)
}

/// Runs every case in [`SUITE_CASES`].
pub fn gradcheck_suite(seeds: usize, max_entries: Option<usize>) -> Result<Vec<CaseResult>> {
    SUITE_CASES.iter().map(|c| run_case(c, seeds, max_entries)).collect()
}
