//! Convolutional variational autoencoder, trained per minority class to
//! synthesize labeled spectrograms.
//!
//! Encoder: two stride-2 3x3 convolutions (8 then 16 channels, each with
//! batchnorm + ReLU), a dense bottleneck, then parallel dense heads for
//! the latent mean and log-variance. Decoder: dense layers back up, two
//! (nearest-neighbor x2 upsample + 3x3 same-padded convolution) blocks, a
//! final 1-channel convolution, crop to the exact input shape, logistic
//! squashing. The loss is the reconstruction sum of squares plus the
//! closed-form KL divergence of the latent Gaussian against N(0, I).

use thiserror::Error;

use crate::melspec::MelSpectrogram;
use crate::tensor::tape::RunningStats;
use crate::tensor::{
    AdamConfig, AdamState, BatchNormMode, Padding, Real, Stream, StreamRng, Tape, TapeError,
    Tensor, TensorId,
};

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("empty class: no samples to train on")]
    EmptyClass,
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("input {0}x{1} too small; both extents must be >= 7")]
    InputTooSmall(usize, usize),
    #[error("sample shape {0}x{1} does not match model input {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Checkpoint(#[from] crate::tensor::checkpoint::CheckpointError),
}

const ENC_C1: usize = 8;
const ENC_C2: usize = 16;
const KERNEL: usize = 3;

/// Training hyperparameters for one per-class VAE.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
            latent_dim: 64,
            hidden_dim: 128,
            kl_weight: 1.0,
            seed: 0,
        }
    }
}

pub const PARAM_NAMES: [&str; 24] = [
    "enc.conv1.weight",
    "enc.conv1.bias",
    "enc.bn1.gamma",
    "enc.bn1.beta",
    "enc.conv2.weight",
    "enc.conv2.bias",
    "enc.bn2.gamma",
    "enc.bn2.beta",
    "enc.dense.weight",
    "enc.dense.bias",
    "enc.mu.weight",
    "enc.mu.bias",
    "enc.logvar.weight",
    "enc.logvar.bias",
    "dec.dense1.weight",
    "dec.dense1.bias",
    "dec.dense2.weight",
    "dec.dense2.bias",
    "dec.conv1.weight",
    "dec.conv1.bias",
    "dec.conv2.weight",
    "dec.conv2.bias",
    "dec.out.weight",
    "dec.out.bias",
];

#[derive(Clone, Debug)]
pub struct VaeModel<T: Real> {
    pub input_shape: (usize, usize),
    pub latent_dim: usize,
    pub hidden_dim: usize,
    params: Vec<Tensor<T>>,
    pub bn1: RunningStats<T>,
    pub bn2: RunningStats<T>,
    /// Decoder reshape dims; two x2 upsamples then a crop reach the input.
    seed_dims: (usize, usize),
}

pub struct VaeForward {
    pub mu: TensorId,
    pub logvar: TensorId,
    pub z: TensorId,
    pub recon: TensorId,
}

/// Per-epoch mean losses over the training set.
#[derive(Clone, Copy, Debug)]
pub struct VaeEpoch {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

fn conv_out(extent: usize, stride: usize) -> usize {
    (extent - KERNEL) / stride + 1
}

impl<T: Real> VaeModel<T> {
    pub fn new(
        input_shape: (usize, usize),
        latent_dim: usize,
        hidden_dim: usize,
        init: &mut Stream,
    ) -> Result<Self, VaeError> {
        let (rows, cols) = input_shape;
        if rows < 7 || cols < 7 {
            return Err(VaeError::InputTooSmall(rows, cols));
        }
        let (h1, w1) = (conv_out(rows, 2), conv_out(cols, 2));
        let (h2, w2) = (conv_out(h1, 2), conv_out(w1, 2));
        let flat = h2 * w2 * ENC_C2;
        let seed_dims = (rows.div_ceil(4), cols.div_ceil(4));
        let seed_flat = seed_dims.0 * seed_dims.1 * ENC_C2;

        let conv = |inc: usize, outc: usize, init: &mut Stream| {
            let fan = (KERNEL * KERNEL * inc, KERNEL * KERNEL * outc);
            glorot(&[KERNEL, KERNEL, inc, outc], fan.0, fan.1, init)
        };
        let dense = |i: usize, o: usize, init: &mut Stream| glorot(&[i, o], i, o, init);

        let params = vec![
            conv(1, ENC_C1, init),
            Tensor::zeros(&[ENC_C1]),
            Tensor::filled(&[ENC_C1], T::ONE),
            Tensor::zeros(&[ENC_C1]),
            conv(ENC_C1, ENC_C2, init),
            Tensor::zeros(&[ENC_C2]),
            Tensor::filled(&[ENC_C2], T::ONE),
            Tensor::zeros(&[ENC_C2]),
            dense(flat, hidden_dim, init),
            Tensor::zeros(&[hidden_dim]),
            dense(hidden_dim, latent_dim, init),
            Tensor::zeros(&[latent_dim]),
            dense(hidden_dim, latent_dim, init),
            Tensor::zeros(&[latent_dim]),
            dense(latent_dim, hidden_dim, init),
            Tensor::zeros(&[hidden_dim]),
            dense(hidden_dim, seed_flat, init),
            Tensor::zeros(&[seed_flat]),
            conv(ENC_C2, ENC_C2, init),
            Tensor::zeros(&[ENC_C2]),
            conv(ENC_C2, ENC_C1, init),
            Tensor::zeros(&[ENC_C1]),
            conv(ENC_C1, 1, init),
            Tensor::zeros(&[1]),
        ];
        Ok(Self {
            input_shape,
            latent_dim,
            hidden_dim,
            params,
            bn1: RunningStats::new(ENC_C1, 0.9, 1e-5),
            bn2: RunningStats::new(ENC_C2, 0.9, 1e-5),
            seed_dims,
        })
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params.iter_mut().collect()
    }

    /// Register all parameters on a tape.
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<TensorId> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect()
    }

    /// Record encoder ops; `x` is `(B, rows, cols, 1)`.
    pub fn encode_ids(
        &self,
        tape: &mut Tape<T>,
        ids: &[TensorId],
        x: TensorId,
        bn1: &mut RunningStats<T>,
        bn2: &mut RunningStats<T>,
        mode: BatchNormMode,
    ) -> Result<(TensorId, TensorId), VaeError> {
        let c1 = tape.conv2d(x, ids[0], ids[1], 2, Padding::Valid)?;
        let n1 = tape.batchnorm2d(c1, ids[2], ids[3], bn1, mode)?;
        let r1 = tape.relu(n1);
        let c2 = tape.conv2d(r1, ids[4], ids[5], 2, Padding::Valid)?;
        let n2 = tape.batchnorm2d(c2, ids[6], ids[7], bn2, mode)?;
        let r2 = tape.relu(n2);
        let f = tape.flatten(r2);
        let h = tape.dense(f, ids[8], ids[9])?;
        let hr = tape.relu(h);
        let mu = tape.dense(hr, ids[10], ids[11])?;
        let logvar = tape.dense(hr, ids[12], ids[13])?;
        Ok((mu, logvar))
    }

    /// Record decoder ops; `z` is `(B, latent_dim)`.
    pub fn decode_ids(
        &self,
        tape: &mut Tape<T>,
        ids: &[TensorId],
        z: TensorId,
    ) -> Result<TensorId, VaeError> {
        let batch = tape.shape(z)[0];
        let (seed_h, seed_w) = self.seed_dims;
        let d1 = tape.dense(z, ids[14], ids[15])?;
        let d1r = tape.relu(d1);
        let d2 = tape.dense(d1r, ids[16], ids[17])?;
        let d2r = tape.relu(d2);
        let rs = tape.reshape(d2r, &[batch, seed_h, seed_w, ENC_C2]);
        let u1 = tape.upsample2(rs)?;
        let c1 = tape.conv2d(u1, ids[18], ids[19], 1, Padding::Same)?;
        let r1 = tape.relu(c1);
        let u2 = tape.upsample2(r1)?;
        let c2 = tape.conv2d(u2, ids[20], ids[21], 1, Padding::Same)?;
        let r2 = tape.relu(c2);
        let out = tape.conv2d(r2, ids[22], ids[23], 1, Padding::Same)?;
        let cp = tape.crop_or_pad(out, self.input_shape.0, self.input_shape.1)?;
        Ok(tape.sigmoid(cp))
    }

    /// Full forward: encode, reparameterize with the given noise, decode.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_ids(
        &self,
        tape: &mut Tape<T>,
        ids: &[TensorId],
        x: TensorId,
        bn1: &mut RunningStats<T>,
        bn2: &mut RunningStats<T>,
        mode: BatchNormMode,
        noise: Vec<f64>,
    ) -> Result<VaeForward, VaeError> {
        let (mu, logvar) = self.encode_ids(tape, ids, x, bn1, bn2, mode)?;
        let z = tape.reparameterize(mu, logvar, noise)?;
        let recon = self.decode_ids(tape, ids, z)?;
        Ok(VaeForward {
            mu,
            logvar,
            z,
            recon,
        })
    }

    fn batch_tensor(&self, specs: &[&MelSpectrogram]) -> Result<Tensor<T>, VaeError> {
        let (rows, cols) = self.input_shape;
        let mut values = Vec::with_capacity(specs.len() * rows * cols);
        for s in specs {
            if (s.rows(), s.cols()) != self.input_shape {
                return Err(VaeError::ShapeMismatch(s.rows(), s.cols(), rows, cols));
            }
            values.extend(s.values().iter().map(|&v| T::from_f64(f64::from(v))));
        }
        Ok(Tensor::new(&[specs.len(), rows, cols, 1], values))
    }

    /// Latent mean and log-variance of one spectrogram (inference mode).
    pub fn encode(&self, spec: &MelSpectrogram) -> Result<(Vec<f64>, Vec<f64>), VaeError> {
        let mut tape = Tape::new();
        let ids = self.register(&mut tape, false);
        let x = tape.leaf(self.batch_tensor(&[spec])?, false);
        let mut bn1 = self.bn1.clone();
        let mut bn2 = self.bn2.clone();
        let (mu, logvar) =
            self.encode_ids(&mut tape, &ids, x, &mut bn1, &mut bn2, BatchNormMode::Infer)?;
        Ok((
            tape.value(mu).values().iter().map(|v| v.to_f64()).collect(),
            tape.value(logvar).values().iter().map(|v| v.to_f64()).collect(),
        ))
    }

    /// Decode latent rows `(n, latent_dim)` into spectrograms.
    pub fn decode(&self, latents: &[Vec<f64>]) -> Result<Vec<MelSpectrogram>, VaeError> {
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        let n = latents.len();
        let mut values = Vec::with_capacity(n * self.latent_dim);
        for row in latents {
            assert_eq!(row.len(), self.latent_dim, "latent width mismatch");
            values.extend(row.iter().map(|&v| T::from_f64(v)));
        }
        let mut tape = Tape::new();
        let ids = self.register(&mut tape, false);
        let z = tape.leaf(Tensor::new(&[n, self.latent_dim], values), false);
        let recon = self.decode_ids(&mut tape, &ids, z)?;
        let (rows, cols) = self.input_shape;
        let out = tape.value(recon);
        Ok((0..n)
            .map(|i| {
                let slice = &out.values()[i * rows * cols..(i + 1) * rows * cols];
                MelSpectrogram::new(
                    rows,
                    cols,
                    slice.iter().map(|v| v.to_f64() as f32).collect(),
                    true,
                )
            })
            .collect())
    }

    /// Encode to the latent mean and decode back (deterministic round trip).
    pub fn reconstruct(&self, spec: &MelSpectrogram) -> Result<MelSpectrogram, VaeError> {
        let (mu, _) = self.encode(spec)?;
        Ok(self.decode(&[mu])?.remove(0))
    }

    pub fn to_checkpoint(&self) -> crate::tensor::checkpoint::Checkpoint {
        let mut ck = crate::tensor::checkpoint::Checkpoint::new();
        ck.put(
            "vae.meta",
            &[6],
            vec![
                self.input_shape.0 as f32,
                self.input_shape.1 as f32,
                self.latent_dim as f32,
                self.hidden_dim as f32,
                f32::from(u8::from(self.bn1.initialized)),
                f32::from(u8::from(self.bn2.initialized)),
            ],
        );
        for (name, p) in PARAM_NAMES.iter().zip(&self.params) {
            ck.put_tensor(&format!("vae.{name}"), p);
        }
        for (prefix, stats) in [("bn1", &self.bn1), ("bn2", &self.bn2)] {
            ck.put(
                &format!("vae.enc.{prefix}.running_mean"),
                &[stats.mean.len()],
                stats.mean.iter().map(|v| v.to_f64() as f32).collect(),
            );
            ck.put(
                &format!("vae.enc.{prefix}.running_var"),
                &[stats.var.len()],
                stats.var.iter().map(|v| v.to_f64() as f32).collect(),
            );
        }
        ck
    }

    pub fn from_checkpoint(
        ck: &crate::tensor::checkpoint::Checkpoint,
    ) -> Result<Self, VaeError> {
        let meta = ck.tensor::<f32>("vae.meta", &[6])?;
        let m = meta.values();
        let mut dummy = StreamRng::new(0).stream("init");
        let mut model = Self::new(
            (m[0] as usize, m[1] as usize),
            m[2] as usize,
            m[3] as usize,
            &mut dummy,
        )?;
        for (i, name) in PARAM_NAMES.iter().enumerate() {
            model.params[i] = ck.tensor(&format!("vae.{name}"), model.params[i].shape())?;
        }
        for (prefix, stats, flag) in [
            ("bn1", &mut model.bn1, m[4] != 0.0),
            ("bn2", &mut model.bn2, m[5] != 0.0),
        ] {
            let n = stats.mean.len();
            let mean = ck.tensor::<T>(&format!("vae.enc.{prefix}.running_mean"), &[n])?;
            let var = ck.tensor::<T>(&format!("vae.enc.{prefix}.running_var"), &[n])?;
            stats.mean = mean.into_values();
            stats.var = var.into_values();
            stats.initialized = flag;
        }
        Ok(model)
    }
}

/// Fan-scaled uniform initialization, limit `sqrt(6 / (fan_in + fan_out))`.
fn glorot<T: Real>(shape: &[usize], fan_in: usize, fan_out: usize, init: &mut Stream) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| T::from_f64(init.uniform_in(-limit, limit)))
            .collect(),
    )
}

/// `z = mu + exp(logvar / 2) * eps` with `eps ~ N(0, I)` drawn from the
/// given stream.
pub fn reparameterize(mu: &[f64], logvar: &[f64], noise: &mut Stream) -> Vec<f64> {
    assert_eq!(mu.len(), logvar.len(), "mu/logvar length mismatch");
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| m + (lv / 2.0).exp() * noise.normal())
        .collect()
}

/// Closed-form KL divergence of the diagonal Gaussian `N(mu, exp(logvar))`
/// from `N(0, I)`: `sum 0.5 (exp(lv) + mu^2 - 1 - lv)`.
pub fn kl_to_standard_normal(mu: &[f64], logvar: &[f64]) -> f64 {
    assert_eq!(mu.len(), logvar.len(), "mu/logvar length mismatch");
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
        .sum()
}

/// Reconstruction sum of squares plus weighted KL.
pub fn vae_loss(x: &[f32], recon: &[f32], mu: &[f64], logvar: &[f64], kl_weight: f64) -> f64 {
    assert_eq!(x.len(), recon.len(), "shape mismatch");
    let sse: f64 = x
        .iter()
        .zip(recon)
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum();
    sse + kl_weight * kl_to_standard_normal(mu, logvar)
}

/// Train one VAE on the samples of a single class.
pub fn train_vae(
    samples: &[&MelSpectrogram],
    config: &VaeTrainConfig,
) -> Result<(VaeModel<f32>, Vec<VaeEpoch>), VaeError> {
    if samples.is_empty() {
        return Err(VaeError::EmptyClass);
    }
    if samples.len() < 2 {
        return Err(VaeError::TooFewSamples(samples.len()));
    }
    let shape = (samples[0].rows(), samples[0].cols());
    let rng = StreamRng::new(config.seed);
    let mut init = rng.stream("vae-init");
    let mut model = VaeModel::<f32>::new(shape, config.latent_dim, config.hidden_dim, &mut init)?;
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &sizes,
    );
    let mut shuffle = rng.stream("vae-shuffle");
    let mut noise = rng.stream("vae-noise");
    let batch_size = config.batch_size.max(1);
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _epoch in 0..config.epochs {
        shuffle.shuffle(&mut order);
        let (mut loss_sum, mut recon_sum, mut kl_sum) = (0f64, 0f64, 0f64);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&MelSpectrogram> = chunk.iter().map(|&i| samples[i]).collect();
            let b = batch.len();
            let mut tape = Tape::new();
            let ids = model.register(&mut tape, true);
            let x = tape.leaf(model.batch_tensor(&batch)?, false);
            let mut bn1 = model.bn1.clone();
            let mut bn2 = model.bn2.clone();
            let eps: Vec<f64> = (0..b * config.latent_dim).map(|_| noise.normal()).collect();
            let fwd = model.forward_ids(
                &mut tape,
                &ids,
                x,
                &mut bn1,
                &mut bn2,
                BatchNormMode::Train,
                eps,
            )?;
            model.bn1 = bn1;
            model.bn2 = bn2;
            let sse = tape.sse(x, fwd.recon)?;
            let kl = tape.kl_std_normal(fwd.mu, fwd.logvar)?;
            let klw = tape.scale(kl, config.kl_weight);
            let total = tape.add(sse, klw)?;
            let loss = tape.scale(total, 1.0 / b as f64);

            recon_sum += tape.value(sse).item() as f64;
            kl_sum += tape.value(kl).item() as f64;
            loss_sum += tape.value(loss).item() as f64 * b as f64;

            let mut grads = tape.backward(loss)?;
            let grad_list: Vec<Option<Tensor<f32>>> =
                ids.iter().map(|&id| grads.take(id)).collect();
            let mut params = model.params_mut();
            adam.step(&mut params, &grad_list);
        }
        let n = samples.len() as f64;
        history.push(VaeEpoch {
            loss: loss_sum / n,
            recon: recon_sum / n,
            kl: kl_sum / n,
        });
    }
    Ok((model, history))
}

/// Draw `n` latent points from `N(0, I)` and decode them. Outputs lie in
/// `[0, 1]` by construction of the squashing output layer.
pub fn generate<T: Real>(
    model: &VaeModel<T>,
    n: usize,
    noise: &mut Stream,
) -> Result<Vec<MelSpectrogram>, VaeError> {
    let latents: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..model.latent_dim).map(|_| noise.normal()).collect())
        .collect();
    model.decode(&latents)
}
