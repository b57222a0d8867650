use serde::{Deserialize, Serialize};

use super::array::Tensor;
use super::graph::Var;
use super::kernels::{conv_out_len, conv_transpose_out_len};
use super::params::{Mode, ParamStore, Session};
use super::rng::Rng;
use crate::error::{Error, Result};

/// Layer kinds and their size parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    TransposedConv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    },
    Batchnorm {
        features: usize,
    },
    Relu,
    Sigmoid,
    Dropout {
        rate: f64,
    },
    Maxpool2d {
        window: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::TransposedConv2d { .. } => "transposed_conv2d",
            LayerSpec::Batchnorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Maxpool2d { .. } => "maxpool2d",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |vals: &[usize]| vals.iter().all(|&v| v > 0);
        let ok = match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => positive(&[in_features, out_features]),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => positive(&[in_channels, out_channels, kernel, stride]),
            LayerSpec::TransposedConv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                output_padding,
                ..
            } => positive(&[in_channels, out_channels, kernel, stride]) && output_padding < stride,
            LayerSpec::Batchnorm { features } => features > 0,
            LayerSpec::Relu | LayerSpec::Sigmoid => true,
            LayerSpec::Dropout { rate } => (0.0..1.0).contains(&rate),
            LayerSpec::Maxpool2d { window } => window > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidLayer {
                layer: self.kind().into(),
                reason: format!("invalid size parameters {self:?}"),
            })
        }
    }

    /// Output shape for `input`, or a diagnostic naming both shapes.
    pub fn output_shape(&self, name: &str, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let mismatch = |expected: Vec<usize>| Error::ShapeMismatch {
            layer: format!("{name} ({})", self.kind()),
            expected,
            actual: input.to_vec(),
        };
        let empty = || Error::InvalidLayer {
            layer: name.into(),
            reason: format!("input {input:?} yields an empty output"),
        };
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => match *input {
                [n, f] if f == in_features => Ok(vec![n, out_features]),
                _ => Err(mismatch(vec![0, in_features])),
            },
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => match *input {
                [n, c, h, w] if c == in_channels => {
                    let oh = conv_out_len(h, kernel, stride, padding).ok_or_else(empty)?;
                    let ow = conv_out_len(w, kernel, stride, padding).ok_or_else(empty)?;
                    Ok(vec![n, out_channels, oh, ow])
                }
                _ => Err(mismatch(vec![0, in_channels, 0, 0])),
            },
            LayerSpec::TransposedConv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                output_padding,
            } => match *input {
                [n, c, h, w] if c == in_channels => {
                    let oh = conv_transpose_out_len(h, kernel, stride, padding, output_padding).ok_or_else(empty)?;
                    let ow = conv_transpose_out_len(w, kernel, stride, padding, output_padding).ok_or_else(empty)?;
                    Ok(vec![n, out_channels, oh, ow])
                }
                _ => Err(mismatch(vec![0, in_channels, 0, 0])),
            },
            LayerSpec::Batchnorm { features } => match input {
                [_, f] | [_, f, _, _] if *f == features => Ok(input.to_vec()),
                _ => Err(mismatch(vec![0, features])),
            },
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::Maxpool2d { window } => match *input {
                [n, c, h, w] if h % window == 0 && w % window == 0 => Ok(vec![n, c, h / window, w / window]),
                _ => Err(mismatch(vec![0, 0, window, window])),
            },
        }
    }
}

/// A named layer; parameters live in a [`ParamStore`] under `{name}.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

impl Layer {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            name: name.into(),
            spec,
        })
    }

    fn pname(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.name)
    }

    /// Registers this layer's parameters.
    ///
    /// Weights are drawn from `U(-b, b)` with `b = sqrt(3 / fan_in)`; biases
    /// start at zero, batch-norm scale at one.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = (3.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
            Tensor::new(shape, data).expect("shape matches length")
        };
        match self.spec {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                store.insert(
                    self.pname("weight"),
                    uniform(&[in_features, out_features], in_features),
                    true,
                );
                store.insert(self.pname("bias"), Tensor::zeros(&[out_features]), true);
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                store.insert(
                    self.pname("weight"),
                    uniform(&[out_channels, in_channels, kernel, kernel], fan_in),
                    true,
                );
                store.insert(self.pname("bias"), Tensor::zeros(&[out_channels]), true);
            }
            LayerSpec::TransposedConv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                store.insert(
                    self.pname("weight"),
                    uniform(&[in_channels, out_channels, kernel, kernel], fan_in),
                    true,
                );
                store.insert(self.pname("bias"), Tensor::zeros(&[out_channels]), true);
            }
            LayerSpec::Batchnorm { features } => {
                store.insert(self.pname("gamma"), Tensor::ones(&[features]), true);
                store.insert(self.pname("beta"), Tensor::zeros(&[features]), true);
                store.insert(self.pname("running_mean"), Tensor::zeros(&[features]), false);
                store.insert(self.pname("running_var"), Tensor::ones(&[features]), false);
            }
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Dropout { .. } | LayerSpec::Maxpool2d { .. } => {}
        }
    }

    pub fn forward(&self, sess: &mut Session<'_>, x: Var, rng: &mut Rng) -> Result<Var> {
        self.spec.output_shape(&self.name, sess.graph.shape(x))?;
        match self.spec {
            LayerSpec::Dense { .. } => {
                let w = sess.param(&self.pname("weight"))?;
                let b = sess.param(&self.pname("bias"))?;
                let y = sess.graph.matmul(x, w)?;
                sess.graph.add_row_bias(y, b)
            }
            LayerSpec::Conv2d { stride, padding, .. } => {
                let w = sess.param(&self.pname("weight"))?;
                let b = sess.param(&self.pname("bias"))?;
                sess.graph.conv2d(x, w, b, stride, padding)
            }
            LayerSpec::TransposedConv2d {
                stride,
                padding,
                output_padding,
                ..
            } => {
                let w = sess.param(&self.pname("weight"))?;
                let b = sess.param(&self.pname("bias"))?;
                sess.graph.conv_transpose2d(x, w, b, stride, padding, output_padding)
            }
            LayerSpec::Batchnorm { .. } => {
                let gamma = sess.param(&self.pname("gamma"))?;
                let beta = sess.param(&self.pname("beta"))?;
                match sess.mode {
                    Mode::Train => {
                        let (y, stats) = sess.graph.batch_norm(x, gamma, beta, None)?;
                        if let Some(stats) = stats {
                            sess.record_batch_stats(&self.name, stats);
                        }
                        Ok(y)
                    }
                    Mode::Eval => {
                        let store = sess.store();
                        let rm = store.tensor(&self.pname("running_mean"))?.data().to_vec();
                        let rv = store.tensor(&self.pname("running_var"))?.data().to_vec();
                        let (y, _) = sess.graph.batch_norm(x, gamma, beta, Some((&rm, &rv)))?;
                        Ok(y)
                    }
                }
            }
            LayerSpec::Relu => Ok(sess.graph.relu(x)),
            LayerSpec::Sigmoid => Ok(sess.graph.sigmoid(x)),
            LayerSpec::Dropout { rate } => match sess.mode {
                Mode::Eval => Ok(x),
                Mode::Train => {
                    let mask = dropout_mask(sess.graph.shape(x), rate, rng);
                    sess.graph.mul_const(x, mask)
                }
            },
            LayerSpec::Maxpool2d { window } => sess.graph.max_pool2d(x, window),
        }
    }
}

/// Inverted-dropout mask: entries are `0` or `1 / (1 - rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut Rng) -> Tensor {
    let keep = 1.0 - rate;
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor::new(shape, data).expect("shape matches length")
}

/// A chain of layers applied in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    pub fn forward(&self, sess: &mut Session<'_>, mut x: Var, rng: &mut Rng) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(sess, x, rng)?;
        }
        Ok(x)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for l in &self.layers {
            shape = l.spec.output_shape(&l.name, &shape)?;
        }
        Ok(shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(layer: &Layer, store: &ParamStore, x: Tensor, mode: Mode) -> Result<Tensor> {
        let mut sess = Session::new(store, mode);
        let xv = sess.graph.constant(x);
        let y = layer.forward(&mut sess, xv, &mut Rng::new(0))?;
        Ok(sess.graph.value(y).clone())
    }

    #[test]
    fn dense_identity() {
        let layer = Layer::new(
            "d",
            LayerSpec::Dense {
                in_features: 3,
                out_features: 3,
            },
        )
        .unwrap();
        let mut store = ParamStore::new();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        store.insert("d.weight", eye, true);
        store.insert("d.bias", Tensor::zeros(&[3]), true);
        let x = Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.25, 0.0, -7.0]).unwrap();
        assert_eq!(run(&layer, &store, x.clone(), Mode::Train).unwrap(), x);
    }

    #[test]
    fn conv_identity_kernel() {
        let spec = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let layer = Layer::new("c", spec).unwrap();
        let mut store = ParamStore::new();
        store.insert("c.weight", Tensor::ones(&[1, 1, 1, 1]), true);
        store.insert("c.bias", Tensor::zeros(&[1]), true);
        let x = Tensor::new(&[1, 1, 3, 3], (0..9).map(|v| v as f64 / 9.0).collect()).unwrap();
        assert_eq!(run(&layer, &store, x.clone(), Mode::Eval).unwrap(), x);
    }

    #[test]
    fn shape_mismatch_names_layer_and_shapes() {
        let layer = Layer::new(
            "enc.fc",
            LayerSpec::Dense {
                in_features: 4,
                out_features: 2,
            },
        )
        .unwrap();
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut Rng::new(0));
        let err = run(&layer, &store, Tensor::zeros(&[2, 3]), Mode::Train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("enc.fc"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(msg.contains("[0, 4]"), "{msg}");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(Layer::new("x", LayerSpec::Dropout { rate: 1.0 }).is_err());
        assert!(Layer::new(
            "x",
            LayerSpec::Dense {
                in_features: 0,
                out_features: 2
            }
        )
        .is_err());
        let conv = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: 5,
            stride: 1,
            padding: 0,
        };
        assert!(conv.output_shape("c", &[1, 1, 3, 3]).is_err());
    }

    #[test]
    fn dropout_eval_is_identity() {
        let layer = Layer::new("drop", LayerSpec::Dropout { rate: 0.2 }).unwrap();
        let store = ParamStore::new();
        let x = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(run(&layer, &store, x.clone(), Mode::Eval).unwrap(), x);
    }

    #[test]
    fn dropout_train_mean_is_preserved() {
        let rate = 0.2;
        let mut rng = Rng::new(11);
        let n = 200_000;
        let mask = dropout_mask(&[n], rate, &mut rng);
        let mean = mask.data().iter().sum::<f64>() / n as f64;
        // Mask entries are 0 or 1/keep; var = 1/keep - 1.
        let keep = 1.0 - rate;
        let se = ((1.0 / keep - 1.0) / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn batchnorm_train_output_standardized() {
        let layer = Layer::new("bn", LayerSpec::Batchnorm { features: 3 }).unwrap();
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut Rng::new(0));
        let mut rng = Rng::new(5);
        let x = Tensor::new(&[8, 3], (0..24).map(|_| 3.0 * rng.normal() + 1.5).collect()).unwrap();
        let y = run(&layer, &store, x, Mode::Train).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..8).map(|i| y.data()[i * 3 + c]).collect();
            let mean = col.iter().sum::<f64>() / 8.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let layer = Layer::new("bn", LayerSpec::Batchnorm { features: 1 }).unwrap();
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut Rng::new(0));
        store.tensor_mut("bn.running_mean").unwrap().data_mut()[0] = 2.0;
        store.tensor_mut("bn.running_var").unwrap().data_mut()[0] = 4.0;
        let y = run(&layer, &store, Tensor::new(&[1, 1], vec![4.0]).unwrap(), Mode::Eval).unwrap();
        assert!((y.item() - 2.0 / (4.0f64 + crate::tensor::BN_EPS).sqrt()).abs() < 1e-12);
    }
}
