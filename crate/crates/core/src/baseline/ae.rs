use serde::{Deserialize, Serialize};

use crate::dataset::{measurement_side, stack_images, stack_measurements, MeasurementDataset, MeasurementRecord};
use crate::error::{Error, Result};
use crate::tensor::{AdamState, Layer, LayerSpec, Mode, ParamStore, Rng, Sequential, Session, Tensor, Var};

const INFER_CHUNK: usize = 256;

/// Training settings of the AE and of the classifier trained on its output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeConfig {
    /// Output channels of the three encoder blocks.
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Epochs for the C-AE classifier.
    pub cae_epochs: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32],
            epochs: 30,
            lr: 1e-3,
            batch: 64,
            seed: 0,
            cae_epochs: 20,
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 3 || self.channels.contains(&0) {
            return Err(Error::invalid("ae.channels must hold three positive widths"));
        }
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::invalid("ae batch and lr must be positive"));
        }
        Ok(())
    }
}

/// Per-epoch mean training loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub epochs: Vec<f64>,
}

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (i, l) in self.epochs.iter().enumerate() {
            s.push_str(&format!("{},{:.17e}\n", i + 1, l));
        }
        s
    }
}

fn conv_block(prefix: &str, cin: usize, cout: usize) -> Result<Vec<Layer>> {
    let mut layers = Vec::new();
    for (i, ci) in [cin, cout].into_iter().enumerate() {
        layers.push(Layer::new(
            format!("{prefix}.conv{i}"),
            LayerSpec::Conv2d {
                in_channels: ci,
                out_channels: cout,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
        )?);
        layers.push(Layer::new(
            format!("{prefix}.bn{i}"),
            LayerSpec::Batchnorm { features: cout },
        )?);
        layers.push(Layer::new(format!("{prefix}.relu{i}"), LayerSpec::Relu)?);
    }
    Ok(layers)
}

/// Fully convolutional encoder-decoder from measurements to images.
///
/// Encoder blocks are joined by 2×2 max pooling, decoder blocks by
/// nearest-neighbour upsampling; a 1×1 convolution and a sigmoid produce
/// the image.
#[derive(Clone, Debug)]
pub struct AeModel {
    pub config: AeConfig,
    pub side: usize,
    pub store: ParamStore,
    encoder: Vec<Sequential>,
    decoder: Vec<Sequential>,
    head: Layer,
}

impl AeModel {
    pub fn new(config: AeConfig, side: usize) -> Result<Self> {
        config.validate()?;
        if !side.is_multiple_of(4) {
            return Err(Error::invalid(format!(
                "AE needs an image side divisible by 4, got {side}"
            )));
        }
        let c = &config.channels;
        let encoder = vec![
            Sequential::new(conv_block("ae.enc0", 2, c[0])?),
            Sequential::new(conv_block("ae.enc1", c[0], c[1])?),
            Sequential::new(conv_block("ae.enc2", c[1], c[2])?),
        ];
        let decoder = vec![
            Sequential::new(conv_block("ae.dec0", c[2], c[1])?),
            Sequential::new(conv_block("ae.dec1", c[1], c[0])?),
            Sequential::new(conv_block("ae.dec2", c[0], c[0])?),
        ];
        let head = Layer::new(
            "ae.head",
            LayerSpec::Conv2d {
                in_channels: c[0],
                out_channels: 1,
                kernel: 1,
                stride: 1,
                padding: 0,
            },
        )?;
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(config.seed, 0);
        for s in encoder.iter().chain(&decoder) {
            s.init(&mut store, &mut rng);
        }
        head.init(&mut store, &mut rng);
        Ok(Self {
            config,
            side,
            store,
            encoder,
            decoder,
            head,
        })
    }

    pub fn from_named(config: AeConfig, side: usize, named: &[(String, Tensor)]) -> Result<Self> {
        let mut m = Self::new(config, side)?;
        m.store.load_named(named)?;
        Ok(m)
    }

    /// Every layer in forward order.
    pub fn layers(&self) -> Vec<&Layer> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|s| s.layers.iter())
            .chain(std::iter::once(&self.head))
            .collect()
    }

    /// True when a fully connected layer sits anywhere in the network.
    pub fn has_dense_layer(&self) -> bool {
        self.layers().iter().any(|l| matches!(l.spec, LayerSpec::Dense { .. }))
    }

    /// `[n, 2, side, side]` measurements to `[n, side²]` images.
    pub fn forward(&self, sess: &mut Session<'_>, y: Var) -> Result<Var> {
        let shape = sess.graph.shape(y).to_vec();
        let n = shape.first().copied().unwrap_or(0);
        let want = [n, 2, self.side, self.side];
        if shape != want {
            return Err(Error::shape("ae input", &want, &shape));
        }
        let mut rng = Rng::new(0);
        let mut h = y;
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = sess.graph.max_pool2d(h, 2)?;
            }
            h = block.forward(sess, h, &mut rng)?;
        }
        for (i, block) in self.decoder.iter().enumerate() {
            if i > 0 {
                h = sess.graph.upsample_nearest(h, 2)?;
            }
            h = block.forward(sess, h, &mut rng)?;
        }
        let out = self.head.forward(sess, h, &mut rng)?;
        let out = sess.graph.sigmoid(out);
        sess.graph.reshape(out, &[n, self.side * self.side])
    }

    /// Eval-mode reconstructions of `[n, 2, side, side]` inputs.
    pub fn reconstruct_batch(&self, inputs: &Tensor) -> Result<Vec<Vec<f64>>> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        let per = inputs.numel() / n.max(1);
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(n);
            let chunk = Tensor::new(
                &[end - start, 2, self.side, self.side],
                inputs.data()[start * per..end * per].to_vec(),
            )?;
            let mut sess = Session::new(&self.store, Mode::Eval);
            let y = sess.graph.constant(chunk);
            let x = self.forward(&mut sess, y)?;
            let v = sess.graph.value(x);
            out.extend((0..end - start).map(|i| v.row(i).to_vec()));
        }
        Ok(out)
    }

    pub fn reconstruct_records(&self, records: &[&MeasurementRecord]) -> Result<Vec<Vec<f64>>> {
        if records.is_empty() {
            return Ok(Vec::new());
        }
        self.reconstruct_batch(&stack_measurements(records, self.side)?)
    }

    pub fn reconstruct(&self, y: &[f64]) -> Result<Vec<f64>> {
        let m = self.side * self.side;
        if y.len() != 2 * m {
            return Err(Error::shape("ae measurement", &[2 * m], &[y.len()]));
        }
        let t = Tensor::new(&[1, 2, self.side, self.side], y.to_vec())?;
        Ok(self.reconstruct_batch(&t)?.swap_remove(0))
    }
}

/// Mean squared error between `[n, N]` predictions and targets.
pub fn mse_graph(sess: &mut Session<'_>, pred: Var, target: &Tensor) -> Result<Var> {
    let g = &mut sess.graph;
    let neg = g.scale(pred, -1.0);
    let diff = g.add_const(neg, target)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

pub(crate) fn diverged(epoch: usize, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) => Error::Diverged {
            epoch,
            step,
            reason: e.to_string(),
        },
        other => other,
    }
}

/// Trains the AE with an MSE objective from measurements to images.
pub fn train_ae(train: &MeasurementDataset, classes: usize, config: &AeConfig) -> Result<(AeModel, LossLog)> {
    let records: Vec<&MeasurementRecord> = train.records.iter().filter(|r| r.label < classes).collect();
    let first = records.first().ok_or_else(|| Error::invalid("empty training set"))?;
    let side = measurement_side(first.y.len())?;
    let mut model = AeModel::new(config.clone(), side)?;
    let mut adam = AdamState::new(&model.store, config.lr);
    let mut order_rng = Rng::stream(config.seed, 1);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut log = LossLog::default();
    for epoch in 0..config.epochs {
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        for (step, idx) in order.chunks(config.batch).enumerate() {
            let batch: Vec<&MeasurementRecord> = idx.iter().map(|&i| records[i]).collect();
            let inputs = stack_measurements(&batch, side)?;
            let targets = stack_images(&batch, side * side)?;
            let (grads, stats, loss) = {
                let mut sess = Session::new(&model.store, Mode::Train);
                let y = sess.graph.constant(inputs);
                let x = model.forward(&mut sess, y)?;
                let loss = mse_graph(&mut sess, x, &targets)?;
                let value = sess.graph.value(loss).item();
                if !value.is_finite() {
                    return Err(diverged(epoch, step)(Error::NonFiniteLoss { term: "mse".into() }));
                }
                let g = sess.graph.backward(loss)?;
                (sess.param_grads(&g), sess.take_batch_stats(), value)
            };
            adam.step(&mut model.store, &grads).map_err(diverged(epoch, step))?;
            model.store.apply_batch_stats(&stats)?;
            total += loss * idx.len() as f64;
        }
        let mean = total / records.len() as f64;
        log::debug!("ae epoch {}: mse {mean:.5}", epoch + 1);
        log.epochs.push(mean);
    }
    Ok((model, log))
}
