//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only arena. Every operation evaluates eagerly,
//! stores its result, and records the inputs it needs for the adjoint pass.
//! Nodes are topologically ordered by construction, so [`Graph::backward`]
//! is a single reverse sweep.

use super::array::Tensor;
use super::kernels::{self, matmul, ConvGeom, MatRef};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Tensor),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Reshape(Var),
    Concat(Var, Var),
    Triplet {
        emb: Var,
        active: Vec<(usize, usize, usize)>,
        anchors: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics computed by a train-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

/// Result of batch-hard triplet mining.
#[derive(Clone, Debug, Default)]
pub struct TripletSummary {
    /// Anchors that had both a positive and a negative in the batch.
    pub anchors: usize,
    /// True when the batch held fewer than two classes.
    pub degenerate: bool,
}

pub const BN_EPS: f64 = 1e-8;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// Elementwise product with a constant tensor (dropout masks, frozen noise).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        if c.shape() != self.shape(x) {
            return Err(Error::shape("mul_const", self.shape(x), c.shape()));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::from_parts(c.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(value, Op::MulConst(x, c), rg))
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if c.shape() != self.shape(x) {
            return Err(Error::shape("add_const", self.shape(x), c.shape()));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let value = Tensor::from_parts(c.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(value, Op::AddConst(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    fn rank2(&self, name: &str, x: Var) -> Result<(usize, usize)> {
        match *self.shape(x) {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidLayer {
                layer: name.into(),
                reason: format!("expected a rank-2 input, got {:?}", self.shape(x)),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.rank2("matmul", a)?;
        let (k2, m) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", &[k, m], &[k2, m]));
        }
        let data = matmul(
            MatRef::new(self.value(a).data(), n, k),
            MatRef::new(self.value(b).data(), k, m),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::MatMul(a, b), rg))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.rank2("bias", x)?;
        if self.shape(b) != [m] {
            return Err(Error::shape("bias", &[m], self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(m) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::AddRowBias(x, b), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, k) = self.rank2("softmax", x)?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(k) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, k], data), Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, k) = self.rank2("log_softmax", x)?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, k], data), Op::LogSoftmax(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Concatenates two rank-2 tensors along the feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca) = self.rank2("concat", a)?;
        let (n2, cb) = self.rank2("concat", b)?;
        if n != n2 {
            return Err(Error::shape("concat", &[n, cb], &[n2, cb]));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(&va[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&vb[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![n, ca + cb], data), Op::Concat(a, b), rg))
    }

    /// `x: [n, c, h, w]`, `w: [o, c, kh, kw]`, `b: [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = rank4("conv2d", self.shape(x))?;
        let (o, c2, kh, kw) = rank4("conv2d weight", self.shape(w))?;
        if c != c2 {
            return Err(Error::shape("conv2d", &[n, c2, h, wd], self.shape(x)));
        }
        if self.shape(b) != [o] {
            return Err(Error::shape("conv2d bias", &[o], self.shape(b)));
        }
        let (oh, ow) = match (
            kernels::conv_out_len(h, kh, stride, pad),
            kernels::conv_out_len(wd, kw, stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::InvalidLayer {
                    layer: "conv2d".into(),
                    reason: format!("empty output for input {:?}", self.shape(x)),
                })
            }
        };
        let geom = ConvGeom {
            channels: c,
            in_h: h,
            in_w: wd,
            kh,
            kw,
            stride,
            pad,
            out_h: oh,
            out_w: ow,
        };
        let p = geom.positions();
        let cols = batch_im2col(&geom, self.value(x).data(), n);
        let rows = matmul(
            MatRef::new(&cols, n * p, geom.patch_len()),
            MatRef::new(self.value(w).data(), o, geom.patch_len()).t(),
        );
        let mut out = kernels::rows_to_nchw(&rows, n, o, p);
        add_channel_bias(&mut out, self.value(b).data(), p);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![n, o, oh, ow], out),
            Op::Conv2d { x, w, b, geom },
            rg,
        ))
    }

    /// `x: [n, ci, h, w]`, `w: [ci, co, kh, kw]`, `b: [co]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let (n, ci, h, wd) = rank4("conv_transpose2d", self.shape(x))?;
        let (ci2, co, kh, kw) = rank4("conv_transpose2d weight", self.shape(w))?;
        if ci != ci2 {
            return Err(Error::shape("conv_transpose2d", &[n, ci2, h, wd], self.shape(x)));
        }
        if self.shape(b) != [co] {
            return Err(Error::shape("conv_transpose2d bias", &[co], self.shape(b)));
        }
        let (oh, ow) = match (
            kernels::conv_transpose_out_len(h, kh, stride, pad, output_pad),
            kernels::conv_transpose_out_len(wd, kw, stride, pad, output_pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::InvalidLayer {
                    layer: "conv_transpose2d".into(),
                    reason: format!("empty output for input {:?}", self.shape(x)),
                })
            }
        };
        let geom = ConvGeom {
            channels: co,
            in_h: oh,
            in_w: ow,
            kh,
            kw,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        let p = h * wd;
        let x_rows = kernels::nchw_to_rows(self.value(x).data(), n, ci, p);
        let cols = matmul(
            MatRef::new(&x_rows, n * p, ci),
            MatRef::new(self.value(w).data(), ci, geom.patch_len()),
        );
        let mut out = vec![0.0; n * geom.image_len()];
        let chunk = p * geom.patch_len();
        for (i, img) in out.chunks_mut(geom.image_len()).enumerate() {
            geom.col2im(&cols[i * chunk..(i + 1) * chunk], img);
        }
        add_channel_bias(&mut out, self.value(b).data(), oh * ow);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![n, co, oh, ow], out),
            Op::ConvTranspose2d { x, w, b, geom },
            rg,
        ))
    }

    /// Batch normalization over axis 1 of a `[n, f]` or `[n, c, h, w]` input.
    ///
    /// In train mode the batch statistics are used and returned; in eval mode
    /// `running` supplies the mean and variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(Error::InvalidLayer {
                layer: "batchnorm".into(),
                reason: format!("expected rank 2 or 4, got {shape:?}"),
            });
        }
        let (n, f) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(Error::shape("batchnorm affine", &[f], self.shape(gamma)));
        }
        let m = (n * inner) as f64;
        let xv = self.value(x).data();
        let train = running.is_none();
        let (mean, var_biased, stats) = match running {
            None => {
                if n * inner < 2 {
                    return Err(Error::InvalidLayer {
                        layer: "batchnorm".into(),
                        reason: "train mode needs at least two values per feature".into(),
                    });
                }
                let mut mean = vec![0.0; f];
                let mut var = vec![0.0; f];
                for i in 0..n {
                    for (c, mc) in mean.iter_mut().enumerate() {
                        let base = (i * f + c) * inner;
                        *mc += xv[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for i in 0..n {
                    for c in 0..f {
                        let base = (i * f + c) * inner;
                        var[c] += xv[base..base + inner]
                            .iter()
                            .map(|v| (v - mean[c]).powi(2))
                            .sum::<f64>();
                    }
                }
                let biased: Vec<f64> = var.iter().map(|v| v / m).collect();
                let unbiased: Vec<f64> = var.iter().map(|v| v / (m - 1.0)).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, biased, Some(stats))
            }
            Some((rm, rv)) => {
                if rm.len() != f || rv.len() != f {
                    return Err(Error::shape("batchnorm running stats", &[f], &[rm.len()]));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for c in 0..f {
                let base = (i * f + c) * inner;
                for s in base..base + inner {
                    let h = (xv[s] - mean[c]) * inv_std[c];
                    xhat[s] = h;
                    out[s] = g[c] * h + bt[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Non-overlapping max pooling with a square window.
    pub fn max_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (n, c, h, w) = rank4("maxpool2d", self.shape(x))?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::InvalidLayer {
                layer: "maxpool2d".into(),
                reason: format!("window {window} does not tile {h}x{w}"),
            });
        }
        let (oh, ow) = (h / window, w / window);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * window + dy) * w + ox * window + dx;
                            if xv[idx] > best_v || best == usize::MAX {
                                best_v = xv[idx];
                                best = idx;
                            }
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out[o] = best_v;
                    argmax[o] = best;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::MaxPool { x, argmax },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = rank4("upsample", self.shape(x))?;
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(plane * oh + oy) * ow + ox] = xv[(plane * h + oy / factor) * w + ox / factor];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::Upsample { x, factor },
            rg,
        ))
    }

    /// Batch-hard triplet loss on `[n, d]` embeddings.
    ///
    /// For each anchor, the farthest same-label point and the nearest
    /// other-label point are selected by squared Euclidean distance; the loss
    /// is the mean over anchors of `max(0, d_ap - d_an + margin)`. Anchors
    /// without a positive or a negative are skipped.
    pub fn triplet_batch_hard(&mut self, emb: Var, labels: &[usize], margin: f64) -> Result<(Var, TripletSummary)> {
        let (n, d) = self.rank2("triplet", emb)?;
        if labels.len() != n {
            return Err(Error::shape("triplet labels", &[n], &[labels.len()]));
        }
        let e = self.value(emb).data();
        let dist = |i: usize, j: usize| -> f64 {
            e[i * d..(i + 1) * d]
                .iter()
                .zip(&e[j * d..(j + 1) * d])
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        let mut summary = TripletSummary::default();
        let mut active = Vec::new();
        let mut total = 0.0;
        for a in 0..n {
            let mut pos: Option<(usize, f64)> = None;
            let mut neg: Option<(usize, f64)> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                let dj = dist(a, j);
                if labels[j] == labels[a] {
                    if pos.is_none_or(|(_, best)| dj > best) {
                        pos = Some((j, dj));
                    }
                } else if neg.is_none_or(|(_, best)| dj < best) {
                    neg = Some((j, dj));
                }
            }
            if let (Some((p, dap)), Some((q, dan))) = (pos, neg) {
                summary.anchors += 1;
                let hinge = dap - dan + margin;
                if hinge > 0.0 {
                    total += hinge;
                    active.push((a, p, q));
                }
            }
        }
        let first = labels.first();
        summary.degenerate = labels.iter().all(|l| Some(l) == first);
        let loss = if summary.anchors > 0 {
            total / summary.anchors as f64
        } else {
            0.0
        };
        let rg = self.rg(emb);
        let v = self.push(
            Tensor::scalar(loss),
            Op::Triplet {
                emb,
                active,
                anchors: summary.anchors,
            },
            rg,
        );
        Ok((v, summary))
    }

    /// Propagates d(loss)/d(node) back to every leaf that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        let shape = self.shape(v).to_vec();
        self.accumulate(grads, v, Tensor::from_parts(shape, data));
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gy = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                if self.rg(*a) {
                    let ga = matmul(MatRef::new(gy, n, m), MatRef::new(self.value(*b).data(), k, m).t());
                    self.acc_with(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = matmul(MatRef::new(self.value(*a).data(), n, k).t(), MatRef::new(gy, n, m));
                    self.acc_with(grads, *b, gb);
                }
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*b) {
                    let m = self.shape(*b)[0];
                    let mut gb = vec![0.0; m];
                    for row in gy.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    self.acc_with(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.acc_with(grads, *b, gy.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    self.acc_with(grads, *a, gy.iter().zip(vb).map(|(g, v)| g * v).collect());
                }
                if self.rg(*b) {
                    self.acc_with(grads, *b, gy.iter().zip(va).map(|(g, v)| g * v).collect());
                }
            }
            Op::Scale(x, c) => self.acc_with(grads, *x, gy.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) | Op::AddConst(x) | Op::Reshape(x) => self.acc_with(grads, *x, gy.to_vec()),
            Op::MulConst(x, c) => self.acc_with(grads, *x, gy.iter().zip(c.data()).map(|(g, m)| g * m).collect()),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc_with(
                    grads,
                    *x,
                    gy.iter()
                        .zip(xv)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect(),
                )
            }
            Op::Sigmoid(x) => self.acc_with(grads, *x, gy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()),
            Op::Exp(x) => self.acc_with(grads, *x, gy.iter().zip(y).map(|(g, e)| g * e).collect()),
            Op::Square(x) => {
                let xv = self.value(*x).data();
                self.acc_with(grads, *x, gy.iter().zip(xv).map(|(g, v)| 2.0 * g * v).collect())
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                self.acc_with(
                    grads,
                    *x,
                    gy.iter()
                        .zip(xv)
                        .map(|(g, v)| if v > lo && v < hi { *g } else { 0.0 })
                        .collect(),
                )
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.acc_with(grads, *x, vec![gy[0]; n])
            }
            Op::Softmax(x) => {
                let k = node.value.shape()[1];
                let mut gx = vec![0.0; y.len()];
                for ((gxr, yr), gr) in gx.chunks_mut(k).zip(y.chunks(k)).zip(gy.chunks(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        gxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc_with(grads, *x, gx)
            }
            Op::LogSoftmax(x) => {
                let k = node.value.shape()[1];
                let mut gx = vec![0.0; y.len()];
                for ((gxr, yr), gr) in gx.chunks_mut(k).zip(y.chunks(k)).zip(gy.chunks(k)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..k {
                        gxr[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                self.acc_with(grads, *x, gx)
            }
            Op::Conv2d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let o = self.shape(*w)[0];
                let p = geom.positions();
                let gy_rows = kernels::nchw_to_rows(gy, n, o, p);
                if self.rg(*w) {
                    let cols = batch_im2col(geom, self.value(*x).data(), n);
                    let gw = matmul(
                        MatRef::new(&gy_rows, n * p, o).t(),
                        MatRef::new(&cols, n * p, geom.patch_len()),
                    );
                    self.acc_with(grads, *w, gw);
                }
                if self.rg(*x) {
                    let gcols = matmul(
                        MatRef::new(&gy_rows, n * p, o),
                        MatRef::new(self.value(*w).data(), o, geom.patch_len()),
                    );
                    let mut gx = vec![0.0; n * geom.image_len()];
                    let chunk = p * geom.patch_len();
                    for (i, img) in gx.chunks_mut(geom.image_len()).enumerate() {
                        geom.col2im(&gcols[i * chunk..(i + 1) * chunk], img);
                    }
                    self.acc_with(grads, *x, gx);
                }
                if self.rg(*b) {
                    self.acc_with(grads, *b, channel_sums(gy, o, p));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (n, ci) = (self.shape(*x)[0], self.shape(*x)[1]);
                let co = geom.channels;
                let p = geom.positions();
                let gcols = batch_im2col(geom, gy, n);
                if self.rg(*x) {
                    let gx_rows = matmul(
                        MatRef::new(&gcols, n * p, geom.patch_len()),
                        MatRef::new(self.value(*w).data(), ci, geom.patch_len()).t(),
                    );
                    self.acc_with(grads, *x, kernels::rows_to_nchw(&gx_rows, n, ci, p));
                }
                if self.rg(*w) {
                    let x_rows = kernels::nchw_to_rows(self.value(*x).data(), n, ci, p);
                    let gw = matmul(
                        MatRef::new(&x_rows, n * p, ci).t(),
                        MatRef::new(&gcols, n * p, geom.patch_len()),
                    );
                    self.acc_with(grads, *w, gw);
                }
                if self.rg(*b) {
                    self.acc_with(grads, *b, channel_sums(gy, co, geom.in_h * geom.in_w));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = self.shape(*x);
                let (n, f) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let m = (n * inner) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; f];
                let mut sum_gx = vec![0.0; f];
                for i in 0..n {
                    for c in 0..f {
                        let base = (i * f + c) * inner;
                        for s in base..base + inner {
                            sum_g[c] += gy[s];
                            sum_gx[c] += gy[s] * xhat[s];
                        }
                    }
                }
                if self.rg(*gamma) {
                    self.acc_with(grads, *gamma, sum_gx.clone());
                }
                if self.rg(*beta) {
                    self.acc_with(grads, *beta, sum_g.clone());
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; gy.len()];
                    for i in 0..n {
                        for c in 0..f {
                            let base = (i * f + c) * inner;
                            let scale = gam[c] * inv_std[c];
                            for s in base..base + inner {
                                gx[s] = if *train {
                                    scale * (gy[s] - sum_g[c] / m - xhat[s] * sum_gx[c] / m)
                                } else {
                                    scale * gy[s]
                                };
                            }
                        }
                    }
                    self.acc_with(grads, *x, gx);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += gy[o];
                }
                self.acc_with(grads, *x, gx)
            }
            Op::Upsample { x, factor } => {
                let (n, c, h, w) = rank4("upsample", self.shape(*x)).expect("checked in forward");
                let (oh, ow) = (h * factor, w * factor);
                let mut gx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            gx[(plane * h + oy / factor) * w + ox / factor] += gy[(plane * oh + oy) * ow + ox];
                        }
                    }
                }
                self.acc_with(grads, *x, gx)
            }
            Op::Concat(a, b) => {
                let n = self.shape(*a)[0];
                let (ca, cb) = (self.shape(*a)[1], self.shape(*b)[1]);
                let mut ga = Vec::with_capacity(n * ca);
                let mut gb = Vec::with_capacity(n * cb);
                for row in gy.chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.acc_with(grads, *a, ga);
                self.acc_with(grads, *b, gb);
            }
            Op::Triplet { emb, active, anchors } => {
                let d = self.shape(*emb)[1];
                let e = self.value(*emb).data();
                let mut ge = vec![0.0; e.len()];
                let scale = gy[0] / (*anchors).max(1) as f64;
                for &(a, p, q) in active {
                    for t in 0..d {
                        let (ea, ep, eq) = (e[a * d + t], e[p * d + t], e[q * d + t]);
                        ge[a * d + t] += scale * (2.0 * (ea - ep) - 2.0 * (ea - eq));
                        ge[p * d + t] -= scale * 2.0 * (ea - ep);
                        ge[q * d + t] += scale * 2.0 * (ea - eq);
                    }
                }
                self.acc_with(grads, *emb, ge)
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`]; only leaves are retained.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn rank4(name: &str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::InvalidLayer {
            layer: name.into(),
            reason: format!("expected a [n, c, h, w] input, got {shape:?}"),
        }),
    }
}

fn batch_im2col(geom: &ConvGeom, x: &[f64], n: usize) -> Vec<f64> {
    let chunk = geom.positions() * geom.patch_len();
    let mut cols = vec![0.0; n * chunk];
    for (i, c) in cols.chunks_mut(chunk).enumerate() {
        geom.im2col(&x[i * geom.image_len()..(i + 1) * geom.image_len()], c);
    }
    cols
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    let c = bias.len();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(g: &[f64], c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for (i, chunk) in g.chunks(plane).enumerate() {
        out[i % c] += chunk.iter().sum::<f64>();
    }
    out
}
