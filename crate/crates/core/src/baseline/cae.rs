use super::ae::{diverged, AeModel};
use crate::dataset::{MeasurementDataset, MeasurementRecord};
use crate::error::{Error, Result};
use crate::gmvae::cross_entropy_graph;
use crate::tensor::kernels::conv_out_len;
use crate::tensor::{dropout_mask, AdamState, Layer, LayerSpec, Mode, ParamStore, Rng, Sequential, Session, Tensor};

const DROPOUT_RATE: f64 = 0.2;

/// Classifier on AE reconstructions, shaped like the GMVAE classification
/// network: strided conv stack, hidden dense layer, dropout, logits.
#[derive(Clone, Debug)]
pub struct CaeModel {
    pub side: usize,
    pub classes: usize,
    pub hidden: usize,
    pub store: ParamStore,
    convs: Sequential,
    feature_len: usize,
    dense_hidden: Layer,
    dense_out: Layer,
}

impl CaeModel {
    pub fn new(side: usize, classes: usize, conv_channels: &[usize], hidden: usize, seed: u64) -> Result<Self> {
        if classes < 2 || hidden == 0 || conv_channels.is_empty() {
            return Err(Error::invalid(
                "C-AE needs >= 2 classes, a hidden layer and a conv stack",
            ));
        }
        let mut layers = Vec::new();
        let (mut ch, mut hw) = (1, side);
        for (i, &c) in conv_channels.iter().enumerate() {
            layers.push(Layer::new(
                format!("cae.conv{i}"),
                LayerSpec::Conv2d {
                    in_channels: ch,
                    out_channels: c,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
            )?);
            layers.push(Layer::new(format!("cae.bn{i}"), LayerSpec::Batchnorm { features: c })?);
            layers.push(Layer::new(format!("cae.relu{i}"), LayerSpec::Relu)?);
            ch = c;
            hw = conv_out_len(hw, 3, 2, 1).ok_or_else(|| Error::invalid("image too small for the conv stack"))?;
        }
        let feature_len = ch * hw * hw;
        let dense_hidden = Layer::new(
            "cae.hidden",
            LayerSpec::Dense {
                in_features: feature_len,
                out_features: hidden,
            },
        )?;
        let dense_out = Layer::new(
            "cae.out",
            LayerSpec::Dense {
                in_features: hidden,
                out_features: classes,
            },
        )?;
        let convs = Sequential::new(layers);
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(seed, 0);
        convs.init(&mut store, &mut rng);
        dense_hidden.init(&mut store, &mut rng);
        dense_out.init(&mut store, &mut rng);
        Ok(Self {
            side,
            classes,
            hidden,
            store,
            convs,
            feature_len,
            dense_hidden,
            dense_out,
        })
    }

    pub fn from_named(
        side: usize,
        classes: usize,
        conv_channels: &[usize],
        hidden: usize,
        named: &[(String, Tensor)],
    ) -> Result<Self> {
        let mut m = Self::new(side, classes, conv_channels, hidden, 0)?;
        m.store.load_named(named)?;
        Ok(m)
    }

    /// Logits `[n, k]` for `[n, side²]` images; `mask` is the dropout mask.
    pub(crate) fn logits(
        &self,
        sess: &mut Session<'_>,
        images: &Tensor,
        mask: Option<Tensor>,
    ) -> Result<crate::tensor::Var> {
        let n = images.shape()[0];
        let x = sess
            .graph
            .constant(images.clone().reshape(&[n, 1, self.side, self.side])?);
        let mut rng = Rng::new(0);
        let f = self.convs.forward(sess, x, &mut rng)?;
        let f = sess.graph.reshape(f, &[n, self.feature_len])?;
        let h = self.dense_hidden.forward(sess, f, &mut rng)?;
        let mut h = sess.graph.relu(h);
        if let Some(m) = mask {
            h = sess.graph.mul_const(h, m)?;
        }
        self.dense_out.forward(sess, h, &mut rng)
    }

    /// Predicted classes for `[n, side²]` images.
    pub fn classify_images(&self, images: &[Vec<f64>]) -> Result<Vec<usize>> {
        let pixels = self.side * self.side;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(256) {
            let data: Vec<f64> = chunk.iter().flat_map(|v| v.iter().copied()).collect();
            let t = Tensor::new(&[chunk.len(), pixels], data)?;
            let mut sess = Session::new(&self.store, Mode::Eval);
            let l = self.logits(&mut sess, &t, None)?;
            let v = sess.graph.value(l);
            out.extend((0..chunk.len()).map(|i| crate::gmvae::argmax_row(v.row(i))));
        }
        Ok(out)
    }
}

/// Architecture and optimizer settings of the C-AE.
#[derive(Clone, Debug, PartialEq)]
pub struct CaeSettings {
    pub conv_channels: Vec<usize>,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

/// Trains the C-AE on AE reconstructions of the training measurements.
/// Fails when no AE is given.
pub fn train_cae(
    ae: Option<&AeModel>,
    train: &MeasurementDataset,
    classes: usize,
    settings: &CaeSettings,
) -> Result<CaeModel> {
    let CaeSettings {
        conv_channels,
        hidden,
        epochs,
        lr,
        batch,
        seed,
    } = settings.clone();
    let ae = ae.ok_or_else(|| Error::MissingPrerequisite("C-AE training needs a trained AE model".into()))?;
    let records: Vec<&MeasurementRecord> = train.records.iter().filter(|r| r.label < classes).collect();
    if records.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let recon = ae.reconstruct_records(&records)?;
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let mut model = CaeModel::new(ae.side, classes, &conv_channels, hidden, seed)?;
    let mut adam = AdamState::new(&model.store, lr);
    let mut order_rng = Rng::stream(seed, 1);
    let mut mask_rng = Rng::stream(seed, 2);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let pixels = ae.side * ae.side;
    for epoch in 0..epochs {
        order_rng.shuffle(&mut order);
        for (step, idx) in order.chunks(batch.max(1)).enumerate() {
            let data: Vec<f64> = idx.iter().flat_map(|&i| recon[i].iter().copied()).collect();
            let images = Tensor::new(&[idx.len(), pixels], data)?;
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mask = dropout_mask(&[idx.len(), hidden], DROPOUT_RATE, &mut mask_rng);
            let (grads, stats) = {
                let mut sess = Session::new(&model.store, Mode::Train);
                let logits = model.logits(&mut sess, &images, Some(mask))?;
                let loss = cross_entropy_graph(&mut sess.graph, logits, &batch_labels)?;
                if !sess.graph.value(loss).item().is_finite() {
                    return Err(diverged(epoch, step)(Error::NonFiniteLoss {
                        term: "cross_entropy".into(),
                    }));
                }
                let g = sess.graph.backward(loss)?;
                (sess.param_grads(&g), sess.take_batch_stats())
            };
            adam.step(&mut model.store, &grads).map_err(diverged(epoch, step))?;
            model.store.apply_batch_stats(&stats)?;
        }
    }
    Ok(model)
}

/// Classes predicted by running the AE and then the C-AE.
pub fn cae_classify(ae: &AeModel, cae: &CaeModel, records: &[&MeasurementRecord]) -> Result<Vec<usize>> {
    cae.classify_images(&ae.reconstruct_records(records)?)
}
