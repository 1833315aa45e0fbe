//! Tape-based reverse-mode differentiation.
//!
//! Operations execute eagerly and append a record to the tape; `backward`
//! walks the records in reverse, accumulating gradients (summing when a
//! tensor is used more than once) and consumes the tape. Gradient buffers
//! are `f64` regardless of the engine element type.

use thiserror::Error;

use super::rng::Stream;
use super::{Real, Tensor};

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("kernel {kh}x{kw} larger than input {h}x{w}")]
    KernelTooLarge {
        kh: usize,
        kw: usize,
        h: usize,
        w: usize,
    },
    #[error("pool window {s} exceeds spatial extent {h}x{w}")]
    PoolTooLarge { s: usize, h: usize, w: usize },
    #[error("dropout probability {0} outside [0, 1)")]
    BadDropout(f64),
    #[error("inference before any training step: batch statistics uninitialized")]
    UninitializedStats,
    #[error("loss must be scalar, got {0} elements")]
    NonScalarLoss(usize),
    #[error("one-hot row {0} is not a valid indicator")]
    InvalidOneHot(usize),
}

pub type Result<V> = std::result::Result<V, TapeError>;

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Infer,
}

/// Per-channel running statistics owned by the model, updated by train-mode
/// batch normalization and consumed in inference.
#[derive(Clone, Debug)]
pub struct RunningStats<T: Real> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            mean: vec![T::ZERO; channels],
            var: vec![T::ONE; channels],
            initialized: false,
            momentum,
            eps,
        }
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    in_h: usize,
    in_w: usize,
    in_c: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
    out_c: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

enum Op {
    Leaf,
    Add {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        c: f64,
    },
    Conv2d {
        x: TensorId,
        kernel: TensorId,
        bias: TensorId,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu {
        x: TensorId,
    },
    Dropout {
        x: TensorId,
        mask: Vec<f64>,
    },
    MaxPool {
        x: TensorId,
        argmax: Vec<usize>,
    },
    Reshape {
        x: TensorId,
    },
    Dense {
        x: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    SoftmaxCe {
        logits: TensorId,
        softmax: Vec<f64>,
        one_hot: Vec<f64>,
        weights: Vec<f64>,
    },
    Sse {
        x: TensorId,
        recon: TensorId,
    },
    KlStdNormal {
        mu: TensorId,
        logvar: TensorId,
    },
    Reparam {
        mu: TensorId,
        logvar: TensorId,
        noise: Vec<f64>,
    },
    Sigmoid {
        x: TensorId,
    },
    Upsample2 {
        x: TensorId,
    },
    CropPad {
        x: TensorId,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed differentiable operations.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by `Tape::backward`, indexed by the ids of the
/// consumed tape.
pub struct Grads<T: Real> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: TensorId) -> Option<&Tensor<T>> {
        self.by_node[id.0].as_ref()
    }

    pub fn take(&mut self, id: TensorId) -> Option<Tensor<T>> {
        self.by_node[id.0].take()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Record an input tensor. Gradients flow to it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(TapeError::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let values = self.value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| T::from_f64(x.to_f64() + y.to_f64()))
            .collect();
        let out = Tensor::new(self.shape(a), values);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let values = self.value(x)
            .values()
            .iter()
            .map(|&v| T::from_f64(v.to_f64() * c))
            .collect();
        let out = Tensor::new(self.shape(x), values);
        let rg = self.requires(x);
        self.push(out, rg, Op::Scale { x, c })
    }

    /// 2-D cross-correlation plus bias over a channels-last batch.
    ///
    /// `x` is `(B, H, W, Cin)`, `kernel` is `(kh, kw, Cin, Cout)`, `bias` is
    /// `(Cout)`. Valid padding shrinks the output; same padding keeps
    /// `ceil(extent / stride)`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        padding: Padding,
    ) -> Result<TensorId> {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        if xs.len() != 4 || ks.len() != 4 {
            return Err(TapeError::Shape(format!(
                "conv2d expects 4-D input and kernel, got {xs:?} and {ks:?}"
            )));
        }
        let (batch, in_h, in_w, in_c) = (xs[0], xs[1], xs[2], xs[3]);
        let (k_h, k_w, kc_in, out_c) = (ks[0], ks[1], ks[2], ks[3]);
        if kc_in != in_c {
            return Err(TapeError::Shape(format!(
                "conv2d: kernel expects {kc_in} input channels, input has {in_c}"
            )));
        }
        if self.shape(bias) != [out_c] {
            return Err(TapeError::Shape(format!(
                "conv2d: bias shape {:?}, expected [{out_c}]",
                self.shape(bias)
            )));
        }
        assert!(stride >= 1, "conv2d stride must be >= 1");
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if k_h > in_h || k_w > in_w {
                    return Err(TapeError::KernelTooLarge {
                        kh: k_h,
                        kw: k_w,
                        h: in_h,
                        w: in_w,
                    });
                }
                ((in_h - k_h) / stride + 1, (in_w - k_w) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let out_h = in_h.div_ceil(stride);
                let out_w = in_w.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + k_h).saturating_sub(in_h);
                let pad_w = ((out_w - 1) * stride + k_w).saturating_sub(in_w);
                (out_h, out_w, pad_h / 2, pad_w / 2)
            }
        };
        let geom = ConvGeometry {
            batch,
            in_h,
            in_w,
            in_c,
            k_h,
            k_w,
            out_h,
            out_w,
            out_c,
            stride,
            pad_top,
            pad_left,
        };

        let xv = self.value(x).values();
        let kv = self.value(kernel).values();
        let bv = self.value(bias).values();
        let mut out = vec![T::ZERO; batch * out_h * out_w * out_c];
        let mut acc = vec![0f64; out_c];
        for b in 0..batch {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a = bv[c].to_f64();
                    }
                    for kh in 0..k_h {
                        let ih = (oh * stride + kh) as isize - pad_top as isize;
                        if ih < 0 || ih as usize >= in_h {
                            continue;
                        }
                        for kw in 0..k_w {
                            let iw = (ow * stride + kw) as isize - pad_left as isize;
                            if iw < 0 || iw as usize >= in_w {
                                continue;
                            }
                            let x_base = ((b * in_h + ih as usize) * in_w + iw as usize) * in_c;
                            let k_base = (kh * k_w + kw) * in_c * out_c;
                            for ci in 0..in_c {
                                let xval = xv[x_base + ci].to_f64();
                                let k_row = k_base + ci * out_c;
                                for (c, a) in acc.iter_mut().enumerate() {
                                    *a += xval * kv[k_row + c].to_f64();
                                }
                            }
                        }
                    }
                    let o_base = ((b * out_h + oh) * out_w + ow) * out_c;
                    for (c, a) in acc.iter().enumerate() {
                        out[o_base + c] = T::from_f64(*a);
                    }
                }
            }
        }
        let value = Tensor::new(&[batch, out_h, out_w, out_c], out);
        let rg = self.requires(x) || self.requires(kernel) || self.requires(bias);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Batch normalization over `(B, H, W)` per channel.
    ///
    /// Train mode normalizes by batch statistics and folds them into
    /// `stats` by exponential moving average; infer mode normalizes by the
    /// running statistics and fails if none were ever recorded.
    pub fn batchnorm2d(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: &mut RunningStats<T>,
        mode: BatchNormMode,
    ) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(TapeError::Shape(format!(
                "batchnorm2d expects 4-D input, got {xs:?}"
            )));
        }
        let (batch, h, w, channels) = (xs[0], xs[1], xs[2], xs[3]);
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(TapeError::Shape(format!(
                "batchnorm2d: gamma/beta must be [{channels}]"
            )));
        }
        if stats.mean.len() != channels {
            return Err(TapeError::Shape(format!(
                "batchnorm2d: running stats track {} channels, input has {channels}",
                stats.mean.len()
            )));
        }

        let n = (batch * h * w) as f64;
        let xv = self.value(x).values();
        let (mean, var) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0f64; channels];
                let mut var = vec![0f64; channels];
                for (i, v) in xv.iter().enumerate() {
                    mean[i % channels] += v.to_f64();
                }
                for m in &mut mean {
                    *m /= n;
                }
                for (i, v) in xv.iter().enumerate() {
                    let d = v.to_f64() - mean[i % channels];
                    var[i % channels] += d * d;
                }
                for v in &mut var {
                    *v /= n;
                }
                let momentum = stats.momentum;
                for c in 0..channels {
                    let rm = stats.mean[c].to_f64();
                    let rv = stats.var[c].to_f64();
                    stats.mean[c] = T::from_f64(momentum * rm + (1.0 - momentum) * mean[c]);
                    stats.var[c] = T::from_f64(momentum * rv + (1.0 - momentum) * var[c]);
                }
                stats.initialized = true;
                (mean, var)
            }
            BatchNormMode::Infer => {
                if !stats.initialized {
                    return Err(TapeError::UninitializedStats);
                }
                (
                    stats.mean.iter().map(|v| v.to_f64()).collect(),
                    stats.var.iter().map(|v| v.to_f64()).collect(),
                )
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + stats.eps).sqrt()).collect();

        let gv = self.value(gamma).values();
        let bv = self.value(beta).values();
        let mut out = vec![T::ZERO; xv.len()];
        for (i, v) in xv.iter().enumerate() {
            let c = i % channels;
            let xhat = (v.to_f64() - mean[c]) * inv_std[c];
            out[i] = T::from_f64(gv[c].to_f64() * xhat + bv[c].to_f64());
        }
        let value = Tensor::new(xs, out);
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train: matches!(mode, BatchNormMode::Train),
            },
        ))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let values = self.value(x)
            .values()
            .iter()
            .map(|&v| if v.to_f64() > 0.0 { v } else { T::ZERO })
            .collect();
        let out = Tensor::new(self.shape(x), values);
        let rg = self.requires(x);
        self.push(out, rg, Op::Relu { x })
    }

    /// Inverted dropout: in train mode kept entries scale by `1/(1-p)` so
    /// the expectation is preserved; infer mode is the identity.
    pub fn dropout(
        &mut self,
        x: TensorId,
        p: f64,
        noise: &mut Stream,
        mode: BatchNormMode,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(TapeError::BadDropout(p));
        }
        if matches!(mode, BatchNormMode::Infer) || p == 0.0 {
            let out = self.value(x).clone();
            let rg = self.requires(x);
            let mask = vec![1.0; out.len()];
            return Ok(self.push(out, rg, Op::Dropout { x, mask }));
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if noise.uniform() < p { 0.0 } else { keep_scale })
            .collect();
        let values = self.value(x)
            .values()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| T::from_f64(v.to_f64() * m))
            .collect();
        let out = Tensor::new(self.shape(x), values);
        let rg = self.requires(x);
        Ok(self.push(out, rg, Op::Dropout { x, mask }))
    }

    /// Max pooling with window = stride = `s`; remainder rows/columns are
    /// discarded. Ties route the gradient to the first maximum in row-major
    /// order.
    pub fn maxpool2d(&mut self, x: TensorId, s: usize) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(TapeError::Shape(format!(
                "maxpool2d expects 4-D input, got {xs:?}"
            )));
        }
        let (batch, h, w, channels) = (xs[0], xs[1], xs[2], xs[3]);
        if s == 0 || s > h || s > w {
            return Err(TapeError::PoolTooLarge { s, h, w });
        }
        let (out_h, out_w) = (h / s, w / s);
        let xv = self.value(x).values();
        let mut out = vec![T::ZERO; batch * out_h * out_w * channels];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..batch {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    for c in 0..channels {
                        let mut best_idx = ((b * h + oh * s) * w + ow * s) * channels + c;
                        let mut best = xv[best_idx];
                        for dh in 0..s {
                            for dw in 0..s {
                                let idx = ((b * h + oh * s + dh) * w + ow * s + dw) * channels + c;
                                if xv[idx] > best {
                                    best = xv[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((b * out_h + oh) * out_w + ow) * channels + c;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let value = Tensor::new(&[batch, out_h, out_w, channels], out);
        let rg = self.requires(x);
        Ok(self.push(value, rg, Op::MaxPool { x, argmax }))
    }

    /// Collapse all per-sample dimensions: `(B, ...)` to `(B, prod)`.
    pub fn flatten(&mut self, x: TensorId) -> TensorId {
        let xs = self.shape(x);
        let batch = xs[0];
        let rest: usize = xs[1..].iter().product();
        self.reshape(x, &[batch, rest])
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> TensorId {
        let out = self.value(x).reshaped(shape);
        let rg = self.requires(x);
        self.push(out, rg, Op::Reshape { x })
    }

    /// Fully connected layer: `x (B, in) x weight (in, out) + bias (out)`.
    pub fn dense(&mut self, x: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || self.shape(bias) != [ws[1]] {
            return Err(TapeError::Shape(format!(
                "dense: x {:?}, weight {:?}, bias {:?}",
                xs,
                ws,
                self.shape(bias)
            )));
        }
        let (batch, n_in, n_out) = (xs[0], ws[0], ws[1]);
        let xv = self.value(x).values();
        let wv = self.value(weight).values();
        let bv = self.value(bias).values();
        let mut out = vec![T::ZERO; batch * n_out];
        let mut acc = vec![0f64; n_out];
        for b in 0..batch {
            for (o, a) in acc.iter_mut().enumerate() {
                *a = bv[o].to_f64();
            }
            for i in 0..n_in {
                let xval = xv[b * n_in + i].to_f64();
                if xval == 0.0 {
                    continue;
                }
                let w_row = i * n_out;
                for (o, a) in acc.iter_mut().enumerate() {
                    *a += xval * wv[w_row + o].to_f64();
                }
            }
            for (o, a) in acc.iter().enumerate() {
                out[b * n_out + o] = T::from_f64(*a);
            }
        }
        let value = Tensor::new(&[batch, n_out], out);
        let rg = self.requires(x) || self.requires(weight) || self.requires(bias);
        Ok(self.push(value, rg, Op::Dense { x, weight, bias }))
    }

    /// Mean over the batch of per-sample weighted cross-entropy:
    /// `-(1/B) sum_b w_b * ln softmax(logits_b)[true_b]`, stabilized by
    /// max-subtraction. With a single sample and unit weight this is the
    /// plain cross-entropy of that sample.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        one_hot: &Tensor<T>,
        weights: &Tensor<T>,
    ) -> Result<TensorId> {
        let ls = self.shape(logits);
        if ls.len() != 2 || one_hot.shape() != ls {
            return Err(TapeError::Shape(format!(
                "softmax_cross_entropy: logits {:?}, one_hot {:?}",
                ls,
                one_hot.shape()
            )));
        }
        let (batch, classes) = (ls[0], ls[1]);
        if weights.shape() != [batch] {
            return Err(TapeError::Shape(format!(
                "softmax_cross_entropy: weights {:?}, expected [{batch}]",
                weights.shape()
            )));
        }
        let hot: Vec<f64> = one_hot.values().iter().map(|v| v.to_f64()).collect();
        for b in 0..batch {
            let row = &hot[b * classes..(b + 1) * classes];
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != classes {
                return Err(TapeError::InvalidOneHot(b));
            }
        }
        let w: Vec<f64> = weights.values().iter().map(|v| v.to_f64()).collect();
        let lv = self.value(logits).values();
        let mut softmax = vec![0f64; batch * classes];
        let mut loss = 0f64;
        for b in 0..batch {
            let row = &lv[b * classes..(b + 1) * classes];
            let max = row
                .iter()
                .map(|v| v.to_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0f64;
            for (k, v) in row.iter().enumerate() {
                let e = (v.to_f64() - max).exp();
                softmax[b * classes + k] = e;
                denom += e;
            }
            let mut sample_ce = 0f64;
            for k in 0..classes {
                softmax[b * classes + k] /= denom;
                if hot[b * classes + k] == 1.0 {
                    sample_ce = -(softmax[b * classes + k]).max(f64::MIN_POSITIVE).ln();
                }
            }
            loss += w[b] * sample_ce;
        }
        loss /= batch as f64;
        let value = Tensor::scalar(T::from_f64(loss));
        let rg = self.requires(logits);
        Ok(self.push(
            value,
            rg,
            Op::SoftmaxCe {
                logits,
                softmax,
                one_hot: hot,
                weights: w,
            },
        ))
    }

    /// Sum of squared element differences.
    pub fn sse(&mut self, x: TensorId, recon: TensorId) -> Result<TensorId> {
        if self.shape(x) != self.shape(recon) {
            return Err(TapeError::Shape(format!(
                "sse: {:?} vs {:?}",
                self.shape(x),
                self.shape(recon)
            )));
        }
        let total: f64 = self.value(x)
            .values()
            .iter()
            .zip(self.value(recon).values())
            .map(|(&a, &b)| {
                let d = a.to_f64() - b.to_f64();
                d * d
            })
            .sum();
        let value = Tensor::scalar(T::from_f64(total));
        let rg = self.requires(x) || self.requires(recon);
        Ok(self.push(value, rg, Op::Sse { x, recon }))
    }

    /// Closed-form KL divergence of `N(mu, exp(logvar))` against `N(0, I)`,
    /// summed over all elements: `sum 0.5 (exp(lv) + mu^2 - 1 - lv)`.
    pub fn kl_std_normal(&mut self, mu: TensorId, logvar: TensorId) -> Result<TensorId> {
        if self.shape(mu) != self.shape(logvar) {
            return Err(TapeError::Shape(format!(
                "kl_std_normal: {:?} vs {:?}",
                self.shape(mu),
                self.shape(logvar)
            )));
        }
        let total: f64 = self.value(mu)
            .values()
            .iter()
            .zip(self.value(logvar).values())
            .map(|(&m, &lv)| {
                let (m, lv) = (m.to_f64(), lv.to_f64());
                0.5 * (lv.exp() + m * m - 1.0 - lv)
            })
            .sum();
        let value = Tensor::scalar(T::from_f64(total));
        let rg = self.requires(mu) || self.requires(logvar);
        Ok(self.push(value, rg, Op::KlStdNormal { mu, logvar }))
    }

    /// Reparameterized sample `z = mu + exp(logvar / 2) * noise` with the
    /// noise treated as a constant.
    pub fn reparameterize(
        &mut self,
        mu: TensorId,
        logvar: TensorId,
        noise: Vec<f64>,
    ) -> Result<TensorId> {
        if self.shape(mu) != self.shape(logvar) || noise.len() != self.value(mu).len() {
            return Err(TapeError::Shape(format!(
                "reparameterize: mu {:?}, logvar {:?}, noise {}",
                self.shape(mu),
                self.shape(logvar),
                noise.len()
            )));
        }
        let values = self.value(mu)
            .values()
            .iter()
            .zip(self.value(logvar).values())
            .zip(&noise)
            .map(|((&m, &lv), &e)| T::from_f64(m.to_f64() + (lv.to_f64() / 2.0).exp() * e))
            .collect();
        let out = Tensor::new(self.shape(mu), values);
        let rg = self.requires(mu) || self.requires(logvar);
        Ok(self.push(out, rg, Op::Reparam { mu, logvar, noise }))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let values = self.value(x)
            .values()
            .iter()
            .map(|&v| T::from_f64(stable_sigmoid(v.to_f64())))
            .collect();
        let out = Tensor::new(self.shape(x), values);
        let rg = self.requires(x);
        self.push(out, rg, Op::Sigmoid { x })
    }

    /// Nearest-neighbor 2x spatial upsampling of a `(B, H, W, C)` tensor.
    pub fn upsample2(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(TapeError::Shape(format!(
                "upsample2 expects 4-D input, got {xs:?}"
            )));
        }
        let (batch, h, w, channels) = (xs[0], xs[1], xs[2], xs[3]);
        let xv = self.value(x).values();
        let mut out = vec![T::ZERO; batch * 2 * h * 2 * w * channels];
        for b in 0..batch {
            for oh in 0..2 * h {
                for ow in 0..2 * w {
                    let src = ((b * h + oh / 2) * w + ow / 2) * channels;
                    let dst = ((b * 2 * h + oh) * 2 * w + ow) * channels;
                    out[dst..dst + channels].copy_from_slice(&xv[src..src + channels]);
                }
            }
        }
        let value = Tensor::new(&[batch, 2 * h, 2 * w, channels], out);
        let rg = self.requires(x);
        Ok(self.push(value, rg, Op::Upsample2 { x }))
    }

    /// Crop or zero-pad the spatial extents to `(target_h, target_w)`,
    /// anchored at the top-left corner.
    pub fn crop_or_pad(&mut self, x: TensorId, target_h: usize, target_w: usize) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(TapeError::Shape(format!(
                "crop_or_pad expects 4-D input, got {xs:?}"
            )));
        }
        let (batch, h, w, channels) = (xs[0], xs[1], xs[2], xs[3]);
        let xv = self.value(x).values();
        let mut out = vec![T::ZERO; batch * target_h * target_w * channels];
        for b in 0..batch {
            for oh in 0..target_h.min(h) {
                for ow in 0..target_w.min(w) {
                    let src = ((b * h + oh) * w + ow) * channels;
                    let dst = ((b * target_h + oh) * target_w + ow) * channels;
                    out[dst..dst + channels].copy_from_slice(&xv[src..src + channels]);
                }
            }
        }
        let value = Tensor::new(&[batch, target_h, target_w, channels], out);
        let rg = self.requires(x);
        Ok(self.push(value, rg, Op::CropPad { x }))
    }

    /// Smallest |input| seen by any ReLU on this tape, if one was
    /// recorded. Gradient-check harnesses use this to reject instances
    /// whose finite-difference step would straddle a kink.
    pub fn min_abs_relu_input(&self) -> Option<f64> {
        let mut min: Option<f64> = None;
        for node in &self.nodes {
            if let Op::Relu { x } = &node.op {
                for v in self.nodes[x.0].value.values() {
                    let a = v.to_f64().abs();
                    min = Some(min.map_or(a, |m: f64| m.min(a)));
                }
            }
        }
        min
    }

    /// Reverse pass from a scalar loss. Gradients accumulate by summation
    /// for tensors used more than once; the tape is consumed.
    pub fn backward(self, loss: TensorId) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(TapeError::NonScalarLoss(self.value(loss).len()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }

        let by_node = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| {
                    Tensor::new(
                        self.nodes[i].value.shape(),
                        g.iter().map(|&v| T::from_f64(v)).collect(),
                    )
                })
            })
            .collect();
        Ok(Grads { by_node })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_into = |grads: &mut [Option<Vec<f64>>], id: TensorId, contrib: Vec<f64>| {
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => unreachable!("leaf handled by caller"),
            Op::Add { a, b } => {
                if self.requires(*a) {
                    add_into(grads, *a, g.to_vec());
                }
                if self.requires(*b) {
                    add_into(grads, *b, g.to_vec());
                }
            }
            Op::Scale { x, c } => {
                if self.requires(*x) {
                    add_into(grads, *x, g.iter().map(|&v| v * c).collect());
                }
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            } => {
                let xv = self.value(*x).values();
                let kv = self.value(*kernel).values();
                let need_x = self.requires(*x);
                let need_k = self.requires(*kernel);
                let need_b = self.requires(*bias);
                let mut dx = if need_x { vec![0f64; xv.len()] } else { Vec::new() };
                let mut dk = if need_k { vec![0f64; kv.len()] } else { Vec::new() };
                let mut db = if need_b { vec![0f64; geom.out_c] } else { Vec::new() };
                let ConvGeometry {
                    batch,
                    in_h,
                    in_w,
                    in_c,
                    k_h,
                    k_w,
                    out_h,
                    out_w,
                    out_c,
                    stride,
                    pad_top,
                    pad_left,
                } = *geom;
                for b in 0..batch {
                    for oh in 0..out_h {
                        for ow in 0..out_w {
                            let g_base = ((b * out_h + oh) * out_w + ow) * out_c;
                            let g_row = &g[g_base..g_base + out_c];
                            if need_b {
                                for (c, gb) in g_row.iter().enumerate() {
                                    db[c] += gb;
                                }
                            }
                            for kh in 0..k_h {
                                let ih = (oh * stride + kh) as isize - pad_top as isize;
                                if ih < 0 || ih as usize >= in_h {
                                    continue;
                                }
                                for kw in 0..k_w {
                                    let iw = (ow * stride + kw) as isize - pad_left as isize;
                                    if iw < 0 || iw as usize >= in_w {
                                        continue;
                                    }
                                    let x_base =
                                        ((b * in_h + ih as usize) * in_w + iw as usize) * in_c;
                                    let k_base = (kh * k_w + kw) * in_c * out_c;
                                    for ci in 0..in_c {
                                        let k_row = k_base + ci * out_c;
                                        if need_k {
                                            let xval = xv[x_base + ci].to_f64();
                                            for (c, gb) in g_row.iter().enumerate() {
                                                dk[k_row + c] += xval * gb;
                                            }
                                        }
                                        if need_x {
                                            let mut acc = 0f64;
                                            for (c, gb) in g_row.iter().enumerate() {
                                                acc += kv[k_row + c].to_f64() * gb;
                                            }
                                            dx[x_base + ci] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    add_into(grads, *x, dx);
                }
                if need_k {
                    add_into(grads, *kernel, dk);
                }
                if need_b {
                    add_into(grads, *bias, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let xv = self.value(*x).values();
                let gv = self.value(*gamma).values();
                let channels = mean.len();
                let n = (xv.len() / channels) as f64;
                // Per-channel reductions of g and g*xhat.
                let mut sum_g = vec![0f64; channels];
                let mut sum_gx = vec![0f64; channels];
                for (i, gi) in g.iter().enumerate() {
                    let c = i % channels;
                    let xhat = (xv[i].to_f64() - mean[c]) * inv_std[c];
                    sum_g[c] += gi;
                    sum_gx[c] += gi * xhat;
                }
                if self.requires(*gamma) {
                    add_into(grads, *gamma, sum_gx.clone());
                }
                if self.requires(*beta) {
                    add_into(grads, *beta, sum_g.clone());
                }
                if self.requires(*x) {
                    let mut dx = vec![0f64; xv.len()];
                    if *train {
                        for (i, gi) in g.iter().enumerate() {
                            let c = i % channels;
                            let xhat = (xv[i].to_f64() - mean[c]) * inv_std[c];
                            dx[i] = gv[c].to_f64() * inv_std[c] / n
                                * (n * gi - sum_g[c] - xhat * sum_gx[c]);
                        }
                    } else {
                        for (i, gi) in g.iter().enumerate() {
                            let c = i % channels;
                            dx[i] = gv[c].to_f64() * inv_std[c] * gi;
                        }
                    }
                    add_into(grads, *x, dx);
                }
            }
            Op::Relu { x } => {
                if self.requires(*x) {
                    let xv = self.value(*x).values();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &v)| if v.to_f64() > 0.0 { gi } else { 0.0 })
                        .collect();
                    add_into(grads, *x, dx);
                }
            }
            Op::Dropout { x, mask } => {
                if self.requires(*x) {
                    add_into(grads, *x, g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect());
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.requires(*x) {
                    let mut dx = vec![0f64; self.value(*x).len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g[o];
                    }
                    add_into(grads, *x, dx);
                }
            }
            Op::Reshape { x } => {
                if self.requires(*x) {
                    add_into(grads, *x, g.to_vec());
                }
            }
            Op::Dense { x, weight, bias } => {
                let xv = self.value(*x).values();
                let wv = self.value(*weight).values();
                let (batch, n_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n_out = self.shape(*weight)[1];
                if self.requires(*bias) {
                    let mut db = vec![0f64; n_out];
                    for b in 0..batch {
                        for o in 0..n_out {
                            db[o] += g[b * n_out + o];
                        }
                    }
                    add_into(grads, *bias, db);
                }
                if self.requires(*weight) {
                    let mut dw = vec![0f64; wv.len()];
                    for b in 0..batch {
                        for i in 0..n_in {
                            let xval = xv[b * n_in + i].to_f64();
                            if xval == 0.0 {
                                continue;
                            }
                            let w_row = i * n_out;
                            let g_row = b * n_out;
                            for o in 0..n_out {
                                dw[w_row + o] += xval * g[g_row + o];
                            }
                        }
                    }
                    add_into(grads, *weight, dw);
                }
                if self.requires(*x) {
                    let mut dx = vec![0f64; xv.len()];
                    for b in 0..batch {
                        for i in 0..n_in {
                            let w_row = i * n_out;
                            let g_row = b * n_out;
                            let mut acc = 0f64;
                            for o in 0..n_out {
                                acc += wv[w_row + o].to_f64() * g[g_row + o];
                            }
                            dx[b * n_in + i] = acc;
                        }
                    }
                    add_into(grads, *x, dx);
                }
            }
            Op::SoftmaxCe {
                logits,
                softmax,
                one_hot,
                weights,
            } => {
                if self.requires(*logits) {
                    let batch = weights.len();
                    let classes = softmax.len() / batch;
                    let scale = g[0] / batch as f64;
                    let dl = softmax
                        .iter()
                        .zip(one_hot)
                        .enumerate()
                        .map(|(i, (&p, &h))| weights[i / classes] * (p - h) * scale)
                        .collect();
                    add_into(grads, *logits, dl);
                }
            }
            Op::Sse { x, recon } => {
                let xv = self.value(*x).values();
                let rv = self.value(*recon).values();
                if self.requires(*x) {
                    let dx = xv
                        .iter()
                        .zip(rv)
                        .map(|(&a, &b)| 2.0 * (a.to_f64() - b.to_f64()) * g[0])
                        .collect();
                    add_into(grads, *x, dx);
                }
                if self.requires(*recon) {
                    let dr = xv
                        .iter()
                        .zip(rv)
                        .map(|(&a, &b)| 2.0 * (b.to_f64() - a.to_f64()) * g[0])
                        .collect();
                    add_into(grads, *recon, dr);
                }
            }
            Op::KlStdNormal { mu, logvar } => {
                let mv = self.value(*mu).values();
                let lv = self.value(*logvar).values();
                if self.requires(*mu) {
                    add_into(grads, *mu, mv.iter().map(|&m| m.to_f64() * g[0]).collect());
                }
                if self.requires(*logvar) {
                    add_into(
                        grads,
                        *logvar,
                        lv.iter()
                            .map(|&v| 0.5 * (v.to_f64().exp() - 1.0) * g[0])
                            .collect(),
                    );
                }
            }
            Op::Reparam { mu, logvar, noise } => {
                if self.requires(*mu) {
                    add_into(grads, *mu, g.to_vec());
                }
                if self.requires(*logvar) {
                    let lv = self.value(*logvar).values();
                    let dlv = g
                        .iter()
                        .zip(lv)
                        .zip(noise)
                        .map(|((&gi, &v), &e)| gi * 0.5 * (v.to_f64() / 2.0).exp() * e)
                        .collect();
                    add_into(grads, *logvar, dlv);
                }
            }
            Op::Sigmoid { x } => {
                if self.requires(*x) {
                    let yv = self.nodes[i].value.values();
                    let dx = g
                        .iter()
                        .zip(yv)
                        .map(|(&gi, &y)| {
                            let y = y.to_f64();
                            gi * y * (1.0 - y)
                        })
                        .collect();
                    add_into(grads, *x, dx);
                }
            }
            Op::Upsample2 { x } => {
                if self.requires(*x) {
                    let xs = self.shape(*x);
                    let (batch, h, w, channels) = (xs[0], xs[1], xs[2], xs[3]);
                    let mut dx = vec![0f64; self.value(*x).len()];
                    for b in 0..batch {
                        for oh in 0..2 * h {
                            for ow in 0..2 * w {
                                let src = ((b * h + oh / 2) * w + ow / 2) * channels;
                                let dst = ((b * 2 * h + oh) * 2 * w + ow) * channels;
                                for c in 0..channels {
                                    dx[src + c] += g[dst + c];
                                }
                            }
                        }
                    }
                    add_into(grads, *x, dx);
                }
            }
            Op::CropPad { x } => {
                if self.requires(*x) {
                    let xs = self.shape(*x);
                    let (batch, h, w, channels) = (xs[0], xs[1], xs[2], xs[3]);
                    let os = self.nodes[i].value.shape();
                    let (target_h, target_w) = (os[1], os[2]);
                    let mut dx = vec![0f64; self.value(*x).len()];
                    for b in 0..batch {
                        for oh in 0..target_h.min(h) {
                            for ow in 0..target_w.min(w) {
                                let src = ((b * h + oh) * w + ow) * channels;
                                let dst = ((b * target_h + oh) * target_w + ow) * channels;
                                for c in 0..channels {
                                    dx[src + c] += g[dst + c];
                                }
                            }
                        }
                    }
                    add_into(grads, *x, dx);
                }
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a `(B, K)` tensor, outside the tape.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let shape = logits.shape();
    assert_eq!(shape.len(), 2, "softmax_rows expects a 2-D tensor");
    let (batch, classes) = (shape[0], shape[1]);
    let mut out = vec![T::ZERO; batch * classes];
    for b in 0..batch {
        let row = &logits.values()[b * classes..(b + 1) * classes];
        let max = row
            .iter()
            .map(|v| v.to_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for (k, e) in exps.iter().enumerate() {
            out[b * classes + k] = T::from_f64(e / denom);
        }
    }
    Tensor::new(shape, out)
}
