//! The classifier: one 3x3 valid convolution with 10 filters, batchnorm,
//! ReLU, dropout, 5x5 max pooling, then dense 100 and a K-way softmax
//! head. Layer order and shapes are asserted on every forward pass.

use thiserror::Error;

use crate::balance::ClassWeights;
use crate::melspec::MelSpectrogram;
use crate::tensor::tape::RunningStats;
use crate::tensor::{
    softmax_rows, AdamConfig, AdamState, BatchNormMode, Padding, Real, StreamRng, Tape, TapeError,
    Tensor, TensorId,
};

#[derive(Debug, Error)]
pub enum CnnError {
    #[error("input {0}x{1} too small: need >= 3 for the convolution and >= 5 after it for pooling")]
    InputTooSmall(usize, usize),
    #[error("sample shape {0}x{1} does not match model input {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("label {0} out of range for {1} classes")]
    LabelOutOfRange(usize, usize),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("model has no recorded batch statistics; train before predicting")]
    NotTrained,
    #[error("class weights cover {0} classes, model has {1}")]
    WeightArity(usize, usize),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Checkpoint(#[from] crate::tensor::checkpoint::CheckpointError),
}

pub const CONV_FILTERS: usize = 10;
pub const KERNEL: usize = 3;
pub const POOL: usize = 5;
pub const HIDDEN: usize = 100;

pub const PARAM_NAMES: [&str; 8] = [
    "conv.weight",
    "conv.bias",
    "bn.gamma",
    "bn.beta",
    "dense1.weight",
    "dense1.bias",
    "out.weight",
    "out.bias",
];

#[derive(Clone, Debug)]
pub struct CnnModel<T: Real> {
    pub input_shape: (usize, usize),
    pub n_classes: usize,
    pub dropout_p: f64,
    params: Vec<Tensor<T>>,
    pub bn: RunningStats<T>,
}

/// Training hyperparameters for the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub class_weights: Option<ClassWeights>,
    /// Early stop after this many epochs without validation improvement;
    /// 0 disables early stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            class_weights: None,
            patience: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters the returned model carries.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
            ));
        }
        out
    }
}

/// Glorot-uniform initialized model; biases zero.
pub fn build_cnn<T: Real>(
    n_classes: usize,
    input_shape: (usize, usize),
    rng: &StreamRng,
) -> Result<CnnModel<T>, CnnError> {
    let (rows, cols) = input_shape;
    if rows < KERNEL || cols < KERNEL || rows - KERNEL + 1 < POOL || cols - KERNEL + 1 < POOL {
        return Err(CnnError::InputTooSmall(rows, cols));
    }
    let (conv_h, conv_w) = (rows - KERNEL + 1, cols - KERNEL + 1);
    let flat = (conv_h / POOL) * (conv_w / POOL) * CONV_FILTERS;
    let mut init = rng.stream("init");
    let mut glorot = |shape: &[usize], fan_in: usize, fan_out: usize| {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        Tensor::new(
            shape,
            (0..n)
                .map(|_| T::from_f64(init.uniform_in(-limit, limit)))
                .collect(),
        )
    };
    let params = vec![
        glorot(
            &[KERNEL, KERNEL, 1, CONV_FILTERS],
            KERNEL * KERNEL,
            KERNEL * KERNEL * CONV_FILTERS,
        ),
        Tensor::zeros(&[CONV_FILTERS]),
        Tensor::filled(&[CONV_FILTERS], T::ONE),
        Tensor::zeros(&[CONV_FILTERS]),
        glorot(&[flat, HIDDEN], flat, HIDDEN),
        Tensor::zeros(&[HIDDEN]),
        glorot(&[HIDDEN, n_classes], HIDDEN, n_classes),
        Tensor::zeros(&[n_classes]),
    ];
    Ok(CnnModel {
        input_shape,
        n_classes,
        dropout_p: 0.5,
        params,
        bn: RunningStats::new(CONV_FILTERS, 0.9, 1e-5),
    })
}

impl<T: Real> CnnModel<T> {
    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_p = p;
        self
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params.iter_mut().collect()
    }

    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<TensorId> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect()
    }

    /// Record the layer chain and return the logits id. Intermediate
    /// shapes are asserted against the architecture's shape chain.
    pub fn forward_ids(
        &self,
        tape: &mut Tape<T>,
        ids: &[TensorId],
        x: TensorId,
        bn: &mut RunningStats<T>,
        mode: BatchNormMode,
        dropout: &mut crate::tensor::Stream,
    ) -> Result<TensorId, CnnError> {
        let (rows, cols) = self.input_shape;
        let batch = tape.shape(x)[0];
        debug_assert_eq!(tape.shape(x), &[batch, rows, cols, 1]);
        let c = tape.conv2d(x, ids[0], ids[1], 1, Padding::Valid)?;
        let (conv_h, conv_w) = (rows - KERNEL + 1, cols - KERNEL + 1);
        assert_eq!(tape.shape(c), &[batch, conv_h, conv_w, CONV_FILTERS]);
        let n = tape.batchnorm2d(c, ids[2], ids[3], bn, mode)?;
        let r = tape.relu(n);
        let d = tape.dropout(r, self.dropout_p, dropout, mode)?;
        let p = tape.maxpool2d(d, POOL)?;
        assert_eq!(
            tape.shape(p),
            &[batch, conv_h / POOL, conv_w / POOL, CONV_FILTERS]
        );
        let f = tape.flatten(p);
        assert_eq!(tape.shape(f)[1], (conv_h / POOL) * (conv_w / POOL) * CONV_FILTERS);
        let h = tape.dense(f, ids[4], ids[5])?;
        assert_eq!(tape.shape(h), &[batch, HIDDEN]);
        let hr = tape.relu(h);
        let logits = tape.dense(hr, ids[6], ids[7])?;
        assert_eq!(tape.shape(logits), &[batch, self.n_classes]);
        Ok(logits)
    }

    fn batch_tensor(&self, specs: &[&MelSpectrogram]) -> Result<Tensor<T>, CnnError> {
        let (rows, cols) = self.input_shape;
        let mut values = Vec::with_capacity(specs.len() * rows * cols);
        for s in specs {
            if (s.rows(), s.cols()) != self.input_shape {
                return Err(CnnError::ShapeMismatch(s.rows(), s.cols(), rows, cols));
            }
            values.extend(s.values().iter().map(|&v| T::from_f64(f64::from(v))));
        }
        Ok(Tensor::new(&[specs.len(), rows, cols, 1], values))
    }

    /// Class probabilities and the predicted class (ties resolve to the
    /// lowest index). Inference mode: running statistics, dropout off.
    pub fn predict(&self, spec: &MelSpectrogram) -> Result<(Vec<f64>, usize), CnnError> {
        if !self.bn.initialized {
            return Err(CnnError::NotTrained);
        }
        let mut tape = Tape::new();
        let ids = self.register(&mut tape, false);
        let x = tape.leaf(self.batch_tensor(&[spec])?, false);
        let mut bn = self.bn.clone();
        let rng = StreamRng::new(0);
        let mut silent = rng.stream("dropout-off");
        let logits = self.forward_ids(
            &mut tape,
            &ids,
            x,
            &mut bn,
            BatchNormMode::Infer,
            &mut silent,
        )?;
        let probs = softmax_rows(tape.value(logits));
        let p: Vec<f64> = probs.values().iter().map(|v| v.to_f64()).collect();
        let mut best = 0usize;
        for (k, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = k;
            }
        }
        Ok((p, best))
    }

    pub fn to_checkpoint(&self) -> crate::tensor::checkpoint::Checkpoint {
        let mut ck = crate::tensor::checkpoint::Checkpoint::new();
        ck.put(
            "cnn.meta",
            &[5],
            vec![
                self.input_shape.0 as f32,
                self.input_shape.1 as f32,
                self.n_classes as f32,
                self.dropout_p as f32,
                f32::from(u8::from(self.bn.initialized)),
            ],
        );
        for (name, p) in PARAM_NAMES.iter().zip(&self.params) {
            ck.put_tensor(&format!("cnn.{name}"), p);
        }
        ck.put(
            "cnn.bn.running_mean",
            &[self.bn.mean.len()],
            self.bn.mean.iter().map(|v| v.to_f64() as f32).collect(),
        );
        ck.put(
            "cnn.bn.running_var",
            &[self.bn.var.len()],
            self.bn.var.iter().map(|v| v.to_f64() as f32).collect(),
        );
        ck
    }

    pub fn from_checkpoint(
        ck: &crate::tensor::checkpoint::Checkpoint,
    ) -> Result<Self, CnnError> {
        let meta = ck.tensor::<f32>("cnn.meta", &[5])?;
        let m = meta.values();
        let rng = StreamRng::new(0);
        let mut model = build_cnn::<T>(m[2] as usize, (m[0] as usize, m[1] as usize), &rng)?;
        model.dropout_p = f64::from(m[3]);
        for (i, name) in PARAM_NAMES.iter().enumerate() {
            model.params[i] = ck.tensor(&format!("cnn.{name}"), model.params[i].shape())?;
        }
        let n = model.bn.mean.len();
        model.bn.mean = ck.tensor::<T>("cnn.bn.running_mean", &[n])?.into_values();
        model.bn.var = ck.tensor::<T>("cnn.bn.running_var", &[n])?.into_values();
        model.bn.initialized = m[4] != 0.0;
        Ok(model)
    }
}

fn one_hot<T: Real>(labels: &[usize], n_classes: usize) -> Tensor<T> {
    let mut values = vec![T::ZERO; labels.len() * n_classes];
    for (i, &l) in labels.iter().enumerate() {
        values[i * n_classes + l] = T::ONE;
    }
    Tensor::new(&[labels.len(), n_classes], values)
}

/// Evaluate mean weighted loss and accuracy in inference mode.
fn evaluate<T: Real>(
    model: &CnnModel<T>,
    samples: &[(&MelSpectrogram, usize)],
    weights: &[f64],
) -> Result<(f64, f64), CnnError> {
    if samples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let rng = StreamRng::new(0);
    let mut silent = rng.stream("dropout-off");
    let mut loss_sum = 0f64;
    let mut correct = 0usize;
    for chunk in samples.chunks(64) {
        let specs: Vec<&MelSpectrogram> = chunk.iter().map(|&(s, _)| s).collect();
        let labels: Vec<usize> = chunk.iter().map(|&(_, l)| l).collect();
        let mut tape = Tape::new();
        let ids = model.register(&mut tape, false);
        let x = tape.leaf(model.batch_tensor(&specs)?, false);
        let mut bn = model.bn.clone();
        let logits = model.forward_ids(
            &mut tape,
            &ids,
            x,
            &mut bn,
            BatchNormMode::Infer,
            &mut silent,
        )?;
        let hot = one_hot::<T>(&labels, model.n_classes);
        let w = Tensor::new(
            &[labels.len()],
            labels.iter().map(|&l| T::from_f64(weights[l])).collect(),
        );
        let loss = tape.softmax_cross_entropy(logits, &hot, &w)?;
        loss_sum += tape.value(loss).item().to_f64() * labels.len() as f64;
        let probs = softmax_rows(tape.value(logits));
        for (i, &label) in labels.iter().enumerate() {
            let row = &probs.values()[i * model.n_classes..(i + 1) * model.n_classes];
            let mut best = 0usize;
            for (k, v) in row.iter().enumerate() {
                if v.to_f64() > row[best].to_f64() {
                    best = k;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok((
        loss_sum / samples.len() as f64,
        correct as f64 / samples.len() as f64,
    ))
}

/// Mini-batch Adam on (optionally class-weighted) categorical
/// cross-entropy. Validation loss drives early stopping; the returned
/// model carries the parameters of the best validation epoch (the last
/// epoch when no validation set is given).
pub fn train<T: Real>(
    model: &mut CnnModel<T>,
    train_set: &[(&MelSpectrogram, usize)],
    val_set: &[(&MelSpectrogram, usize)],
    config: &TrainConfig,
) -> Result<TrainHistory, CnnError> {
    if train_set.is_empty() {
        return Err(CnnError::EmptyTrainingSet);
    }
    for &(_, label) in train_set.iter().chain(val_set) {
        if label >= model.n_classes {
            return Err(CnnError::LabelOutOfRange(label, model.n_classes));
        }
    }
    let weights = match &config.class_weights {
        Some(cw) => {
            if cw.weights.len() != model.n_classes {
                return Err(CnnError::WeightArity(cw.weights.len(), model.n_classes));
            }
            cw.weights.clone()
        }
        None => vec![1.0; model.n_classes],
    };

    let rng = StreamRng::new(config.seed);
    let mut shuffle = rng.stream("shuffle");
    let mut dropout = rng.stream("dropout");
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &sizes,
    );

    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, usize, Vec<Tensor<T>>, RunningStats<T>)> = None;
    let mut stale = 0usize;
    for epoch in 0..config.epochs {
        shuffle.shuffle(&mut order);
        let mut loss_sum = 0f64;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let specs: Vec<&MelSpectrogram> = chunk.iter().map(|&i| train_set[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set[i].1).collect();
            let mut tape = Tape::new();
            let ids = model.register(&mut tape, true);
            let x = tape.leaf(model.batch_tensor(&specs)?, false);
            let mut bn = model.bn.clone();
            let logits = model.forward_ids(
                &mut tape,
                &ids,
                x,
                &mut bn,
                BatchNormMode::Train,
                &mut dropout,
            )?;
            model.bn = bn;
            let hot = one_hot::<T>(&labels, model.n_classes);
            let w = Tensor::new(
                &[labels.len()],
                labels.iter().map(|&l| T::from_f64(weights[l])).collect(),
            );
            let loss = tape.softmax_cross_entropy(logits, &hot, &w)?;
            loss_sum += tape.value(loss).item().to_f64() * labels.len() as f64;
            let mut grads = tape.backward(loss)?;
            let grad_list: Vec<Option<Tensor<T>>> = ids.iter().map(|&id| grads.take(id)).collect();
            let mut params = model.params_mut();
            adam.step(&mut params, &grad_list);
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let (_, train_acc) = evaluate(model, train_set, &weights)?;
        let (val_loss, val_acc) = evaluate(model, val_set, &weights)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        });

        if !val_set.is_empty() {
            let improved = best.as_ref().is_none_or(|(b, ..)| val_loss < *b);
            if improved {
                best = Some((val_loss, epoch, model.params.clone(), model.bn.clone()));
                stale = 0;
            } else {
                stale += 1;
                if config.patience > 0 && stale >= config.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, epoch, params, bn)) = best {
        model.params = params;
        model.bn = bn;
        history.best_epoch = epoch;
    } else {
        history.best_epoch = history.epochs.len().saturating_sub(1);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn band_spec(rows: usize, cols: usize, class: usize, seed: u64) -> MelSpectrogram {
        let rng = StreamRng::new(seed);
        let mut s = rng.stream("spec");
        let mut values = vec![0f32; rows * cols];
        for v in values.iter_mut() {
            *v = s.uniform_in(0.0, 0.15) as f32;
        }
        let band = rows / 4;
        for r in class * band..(class + 1) * band {
            for c in 0..cols {
                values[r * cols + c] = s.uniform_in(0.75, 1.0) as f32;
            }
        }
        MelSpectrogram::new(rows, cols, values, true)
    }

    #[test]
    fn shape_chain_matches_published_layout() {
        let rng = StreamRng::new(0);
        let model = build_cnn::<f32>(3, (128, 926), &rng).unwrap();
        let mut tape = Tape::new();
        let ids = model.register(&mut tape, false);
        let x = tape.leaf(Tensor::zeros(&[1, 128, 926, 1]), false);
        let mut bn = model.bn.clone();
        let mut drop = rng.stream("dropout");
        // Asserts inside forward_ids check (126,924,10), (25,184,10), 46000, 100, 3.
        let logits = model
            .forward_ids(&mut tape, &ids, x, &mut bn, BatchNormMode::Train, &mut drop)
            .unwrap();
        assert_eq!(tape.shape(logits), &[1, 3]);
        let six = build_cnn::<f32>(6, (128, 926), &rng).unwrap();
        assert_eq!(six.params()[6].shape(), &[100, 6]);
    }

    #[test]
    fn rejects_too_small_inputs() {
        let rng = StreamRng::new(0);
        assert!(matches!(
            build_cnn::<f32>(3, (2, 100), &rng),
            Err(CnnError::InputTooSmall(2, 100))
        ));
        // 6x6 passes the conv but leaves 4 < 5 rows for the pool.
        assert!(matches!(
            build_cnn::<f32>(3, (6, 100), &rng),
            Err(CnnError::InputTooSmall(6, 100))
        ));
        assert!(build_cnn::<f32>(3, (7, 7), &rng).is_ok());
    }

    #[test]
    fn untrained_model_emits_probabilities_after_one_train_step() {
        // Softmax output sums to 1; prediction before any training fails.
        let rng = StreamRng::new(1);
        let model = build_cnn::<f32>(3, (12, 18), &rng).unwrap();
        let spec = band_spec(12, 18, 0, 0);
        assert!(matches!(model.predict(&spec), Err(CnnError::NotTrained)));

        let mut model = model;
        let train_data = [(&spec, 0usize)];
        let config = TrainConfig {
            epochs: 1,
            batch_size: 1,
            ..TrainConfig::default()
        };
        train(&mut model, &train_data, &[], &config).unwrap();
        let (probs, _) = model.predict(&spec).unwrap();
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(probs.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn predictions_are_bitwise_repeatable() {
        let rng = StreamRng::new(2);
        let mut model = build_cnn::<f32>(3, (12, 18), &rng).unwrap();
        let samples: Vec<(MelSpectrogram, usize)> = (0..9)
            .map(|i| (band_spec(12, 18, i % 3, i as u64), i % 3))
            .collect();
        let refs: Vec<(&MelSpectrogram, usize)> = samples.iter().map(|(s, l)| (s, *l)).collect();
        let config = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        train(&mut model, &refs, &[], &config).unwrap();
        let (pa, ca) = model.predict(&samples[0].0).unwrap();
        let (pb, cb) = model.predict(&samples[0].0).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ca, cb);
    }

    #[test]
    fn learns_linearly_separable_bands() {
        // 60 samples, 32x64, bright band position encodes the class.
        let samples: Vec<(MelSpectrogram, usize)> = (0..60)
            .map(|i| (band_spec(32, 64, i % 3, i as u64), i % 3))
            .collect();
        let refs: Vec<(&MelSpectrogram, usize)> = samples.iter().map(|(s, l)| (s, *l)).collect();
        let rng = StreamRng::new(7);
        let mut model = build_cnn::<f32>(3, (32, 64), &rng).unwrap();
        let config = TrainConfig {
            epochs: 30,
            batch_size: 16,
            patience: 0,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &refs, &[], &config).unwrap();
        let final_acc = history.epochs.last().unwrap().train_acc;
        assert!(final_acc >= 0.95, "training accuracy {final_acc}");
    }

    #[test]
    fn zero_weight_class_contributes_zero_loss() {
        let samples: Vec<(MelSpectrogram, usize)> = (0..6)
            .map(|i| (band_spec(12, 18, i % 3, i as u64), i % 3))
            .collect();
        // Weight class 2 at zero: a training set of only class-2 samples
        // must show exactly zero loss.
        let class2: Vec<(&MelSpectrogram, usize)> = samples
            .iter()
            .filter(|(_, l)| *l == 2)
            .map(|(s, l)| (s, *l))
            .collect();
        let rng = StreamRng::new(3);
        let mut model = build_cnn::<f32>(3, (12, 18), &rng).unwrap();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 2,
            class_weights: Some(ClassWeights {
                weights: vec![1.0, 1.0, 0.0],
            }),
            ..TrainConfig::default()
        };
        let history = train(&mut model, &class2, &[], &config).unwrap();
        for e in &history.epochs {
            assert_eq!(e.train_loss, 0.0);
        }
    }

    #[test]
    fn fixed_seed_gives_identical_history() {
        let samples: Vec<(MelSpectrogram, usize)> = (0..12)
            .map(|i| (band_spec(12, 18, i % 3, i as u64), i % 3))
            .collect();
        let refs: Vec<(&MelSpectrogram, usize)> = samples.iter().map(|(s, l)| (s, *l)).collect();
        let run = || {
            let rng = StreamRng::new(5);
            let mut model = build_cnn::<f32>(3, (12, 18), &rng).unwrap();
            let config = TrainConfig {
                epochs: 4,
                batch_size: 4,
                seed: 5,
                ..TrainConfig::default()
            };
            let h = train(&mut model, &refs[..9], &refs[9..], &config).unwrap();
            (h, model.params()[0].values().to_vec())
        };
        let (ha, pa) = run();
        let (hb, pb) = run();
        assert_eq!(ha, hb);
        assert_eq!(pa, pb);
    }

    #[test]
    fn weighted_per_sample_loss_scales_linearly() {
        // With every class weight = c, the reported loss is exactly c times
        // the unweighted loss at the first epoch (same parameters).
        let samples: Vec<(MelSpectrogram, usize)> = (0..6)
            .map(|i| (band_spec(12, 18, i % 3, i as u64), i % 3))
            .collect();
        let refs: Vec<(&MelSpectrogram, usize)> = samples.iter().map(|(s, l)| (s, *l)).collect();
        let c = 2.5;
        let loss_with = |weights: Option<ClassWeights>| {
            let rng = StreamRng::new(6);
            let mut model = build_cnn::<f32>(3, (12, 18), &rng).unwrap().with_dropout(0.0);
            let config = TrainConfig {
                epochs: 1,
                batch_size: 6,
                seed: 6,
                class_weights: weights,
                ..TrainConfig::default()
            };
            train(&mut model, &refs, &[], &config).unwrap().epochs[0].train_loss
        };
        let unweighted = loss_with(None);
        let weighted = loss_with(Some(ClassWeights {
            weights: vec![c; 3],
        }));
        assert!(
            (weighted - c * unweighted).abs() < 1e-6 * unweighted.abs().max(1.0),
            "{weighted} vs {} x {unweighted}",
            c
        );
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let samples: Vec<(MelSpectrogram, usize)> = (0..6)
            .map(|i| (band_spec(12, 18, i % 3, i as u64), i % 3))
            .collect();
        let refs: Vec<(&MelSpectrogram, usize)> = samples.iter().map(|(s, l)| (s, *l)).collect();
        let rng = StreamRng::new(8);
        let mut model = build_cnn::<f32>(3, (12, 18), &rng).unwrap();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        train(&mut model, &refs, &[], &config).unwrap();
        let ck = model.to_checkpoint();
        let back = CnnModel::<f32>::from_checkpoint(&ck).unwrap();
        let (pa, ca) = model.predict(&samples[0].0).unwrap();
        let (pb, cb) = back.predict(&samples[0].0).unwrap();
        assert_eq!(ca, cb);
        for (a, b) in pa.iter().zip(&pb) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
