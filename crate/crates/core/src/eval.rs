//! Metrics, stratified k-fold cross-validation and the five-configuration
//! experiment harness.
//!
//! Sensitivity is the fraction of diseased recordings classified into
//! their true class; specificity is the fraction of healthy recordings
//! recognized as healthy; the score is their mean. Precision, recall and
//! F-score treat healthy as the positive class, so recall always equals
//! specificity. Any 0/0 ratio is defined as 0.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance::{
    apply_plan, class_weights, BalanceError, BalanceMethod, ClassWeights, OversamplePlan,
    SIX_CLASS_PAPER_TARGETS, TERNARY_PAPER_TARGETS,
};
use crate::cnn::{build_cnn, train, CnnError, TrainConfig};
use crate::dataset::{DatasetError, LabeledDataset};
use crate::ingest::LabelScheme;
use crate::melspec::MelSpectrogram;
use crate::tensor::{derive_seed, Stream, StreamRng};
use crate::vae::VaeTrainConfig;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions and truths differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("label {0} out of range for {1} classes")]
    LabelOutOfRange(usize, usize),
    #[error("expected a {0}x{0} confusion matrix, got {1}x{1}")]
    WrongArity(usize, usize),
    #[error("fold count {0} invalid for {1} samples (need 2 <= k <= n)")]
    BadFoldCount(usize, usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("explicit targets cover {0} classes, scheme has {1}")]
    TargetArity(usize, usize),
    #[error("synthetic {synthetic}: parent {parent} sits in the test fold")]
    Leakage { synthetic: String, parent: String },
    #[error("fold {0}: {1}")]
    InFold(usize, Box<EvalError>),
    #[error(transparent)]
    Cnn(#[from] CnnError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("result serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// K x K counts, rows = true class, columns = predicted class, in the
/// scheme's canonical class order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn at(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.k + pred] += 1;
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.k).map(|p| self.at(truth, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.k).map(|t| self.at(t, pred)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Overall fraction of correct predictions.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: u64 = (0..self.k).map(|c| self.at(c, c)).sum();
        trace as f64 / total as f64
    }

    /// Comma-separated K x K integer grid, one row per line.
    pub fn to_grid_csv(&self) -> String {
        let mut out = String::new();
        for t in 0..self.k {
            let row: Vec<String> = (0..self.k).map(|p| self.at(t, p).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn confusion(
    predictions: &[usize],
    truths: &[usize],
    k: usize,
) -> Result<ConfusionMatrix, EvalError> {
    if predictions.len() != truths.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), truths.len()));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (&p, &t) in predictions.iter().zip(truths) {
        if p >= k || t >= k {
            return Err(EvalError::LabelOutOfRange(p.max(t), k));
        }
        cm.record(t, p);
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sensitivity: f64,
    pub specificity: f64,
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn healthy_positive_metrics(cm: &ConfusionMatrix, healthy: usize) -> MetricsReport {
    let mut disease_correct = 0u64;
    let mut disease_total = 0u64;
    for c in 0..cm.k {
        if c != healthy {
            disease_correct += cm.at(c, c);
            disease_total += cm.row_sum(c);
        }
    }
    let sensitivity = ratio(disease_correct, disease_total);
    let specificity = ratio(cm.at(healthy, healthy), cm.row_sum(healthy));
    let precision = ratio(cm.at(healthy, healthy), cm.col_sum(healthy));
    let recall = specificity;
    let fscore = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    MetricsReport {
        sensitivity,
        specificity,
        score: (sensitivity + specificity) / 2.0,
        precision,
        recall,
        fscore,
    }
}

/// Metrics of the chronic / non-chronic / healthy task (3x3 matrix).
pub fn ternary_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, EvalError> {
    if cm.k != 3 {
        return Err(EvalError::WrongArity(3, cm.k));
    }
    Ok(healthy_positive_metrics(cm, LabelScheme::Ternary.healthy_index()))
}

/// Metrics of the six-pathology task (6x6 matrix).
pub fn pathology_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, EvalError> {
    if cm.k != 6 {
        return Err(EvalError::WrongArity(6, cm.k));
    }
    Ok(healthy_positive_metrics(cm, LabelScheme::SixClass.healthy_index()))
}

pub fn metrics_for_scheme(cm: &ConfusionMatrix, scheme: LabelScheme) -> Result<MetricsReport, EvalError> {
    match scheme {
        LabelScheme::Ternary => ternary_metrics(cm),
        LabelScheme::SixClass => pathology_metrics(cm),
    }
}

/// Disjoint folds covering `0..labels.len()`. Stratified mode gives every
/// fold `floor(count/k)` members of each class and tops the remainders up
/// on the currently smallest folds, so per-class counts stay within one
/// of proportional and the overall fold sizes stay within one of `n/k`.
pub fn kfold_split(
    labels: &[usize],
    k: usize,
    stratified: bool,
    stream: &mut Stream,
) -> Result<Vec<Vec<usize>>, EvalError> {
    let n = labels.len();
    if k < 2 || k > n {
        return Err(EvalError::BadFoldCount(k, n));
    }
    let mut folds = vec![Vec::new(); k];
    if stratified {
        let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
        let mut sizes = vec![0usize; k];
        for class in 0..n_classes {
            let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
            if members.is_empty() {
                continue;
            }
            stream.shuffle(&mut members);
            let base = members.len() / k;
            let rem = members.len() % k;
            // Random permutation breaks ties among equally small folds.
            let mut perm: Vec<usize> = (0..k).collect();
            stream.shuffle(&mut perm);
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by_key(|&f| (sizes[f], perm[f]));
            let topped: std::collections::BTreeSet<usize> =
                order[..rem].iter().copied().collect();
            let mut cursor = 0;
            for (f, fold) in folds.iter_mut().enumerate() {
                let take = base + usize::from(topped.contains(&f));
                fold.extend_from_slice(&members[cursor..cursor + take]);
                sizes[f] += take;
                cursor += take;
            }
        }
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        stream.shuffle(&mut order);
        let base = n / k;
        let extra = n % k;
        let mut cursor = 0;
        for (f, fold) in folds.iter_mut().enumerate() {
            let size = base + usize::from(f < extra);
            fold.extend_from_slice(&order[cursor..cursor + size]);
            cursor += size;
        }
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

/// Folds that never split one patient across folds. Samples without a
/// patient id (synthetics) each form their own group.
pub fn kfold_split_by_patient(
    patients: &[Option<u32>],
    k: usize,
    stream: &mut Stream,
) -> Result<Vec<Vec<usize>>, EvalError> {
    let n = patients.len();
    if k < 2 || k > n {
        return Err(EvalError::BadFoldCount(k, n));
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut by_patient: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();
    for (i, p) in patients.iter().enumerate() {
        match p {
            Some(id) => {
                if let Some(&g) = by_patient.get(id) {
                    groups[g].push(i);
                } else {
                    by_patient.insert(*id, groups.len());
                    groups.push(vec![i]);
                }
            }
            None => groups.push(vec![i]),
        }
    }
    if groups.len() < k {
        return Err(EvalError::BadFoldCount(k, groups.len()));
    }
    stream.shuffle(&mut groups);
    let mut folds = vec![Vec::new(); k];
    for group in groups {
        // Smallest fold first, ties to the lowest index.
        let target = (0..k).min_by_key(|&f| (folds[f].len(), f)).unwrap();
        folds[target].extend(group);
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Balance the training portion of each fold only.
    Default,
    /// Balance the whole dataset before splitting, reproducing the
    /// published order of operations (synthetic/parent pairs may then
    /// straddle the split).
    Paper,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Default => "default",
            Self::Paper => "paper",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "default" => Some(Self::Default),
            "paper" => Some(Self::Paper),
            _ => None,
        }
    }
}

/// How per-class oversampling targets are chosen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TargetPolicy {
    /// The published post-augmentation sizes for the canonical schemes,
    /// clamped to never undersample.
    Paper,
    /// Raise every class to the majority count.
    Majority,
    Explicit(Vec<usize>),
}

pub fn resolve_targets(
    policy: &TargetPolicy,
    scheme: LabelScheme,
    counts: &[usize],
) -> Result<Vec<usize>, EvalError> {
    match policy {
        TargetPolicy::Paper => {
            let table: &[usize] = match scheme {
                LabelScheme::Ternary => &TERNARY_PAPER_TARGETS,
                LabelScheme::SixClass => &SIX_CLASS_PAPER_TARGETS,
            };
            Ok(table
                .iter()
                .zip(counts)
                .map(|(&t, &c)| t.max(c))
                .collect())
        }
        TargetPolicy::Majority => {
            let max = counts.iter().copied().max().unwrap_or(0);
            Ok(vec![max; counts.len()])
        }
        TargetPolicy::Explicit(v) => {
            if v.len() != counts.len() {
                return Err(EvalError::TargetArity(v.len(), counts.len()));
            }
            Ok(v.clone())
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub method: BalanceMethod,
    pub protocol: Protocol,
    pub folds: usize,
    pub stratified: bool,
    pub patient_disjoint: bool,
    pub targets: TargetPolicy,
    pub k_neighbors: usize,
    /// Fraction of the training portion held out (stratified) for early
    /// stopping.
    pub validation_fraction: f64,
    pub train: TrainConfig,
    pub dropout: f64,
    pub vae: VaeTrainConfig,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: BalanceMethod::None,
            protocol: Protocol::Default,
            folds: 10,
            stratified: true,
            patient_disjoint: false,
            targets: TargetPolicy::Paper,
            k_neighbors: 5,
            validation_fraction: 0.1,
            train: TrainConfig::default(),
            dropout: 0.5,
            vae: VaeTrainConfig::default(),
            seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub configuration: String,
    pub scheme: String,
    pub seed: u64,
    pub folds: Vec<MetricsReport>,
    pub mean: MetricsReport,
    pub std: MetricsReport,
    pub protocol: String,
    #[serde(skip)]
    pub confusions: Vec<ConfusionMatrix>,
}

impl ExperimentResult {
    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Trains one model per fold; abstracted so the harness can be exercised
/// with deterministic stubs.
pub trait FoldTrainer: Sync {
    fn train_fold(
        &self,
        train_set: &LabeledDataset,
        val_set: &LabeledDataset,
        weights: Option<ClassWeights>,
        seed: u64,
    ) -> Result<Predictor, EvalError>;
}

pub type Predictor = Box<dyn Fn(&MelSpectrogram) -> Result<usize, EvalError> + Send>;

/// The real classifier behind the harness.
pub struct CnnTrainer {
    pub config: TrainConfig,
    pub dropout: f64,
}

impl FoldTrainer for CnnTrainer {
    fn train_fold(
        &self,
        train_set: &LabeledDataset,
        val_set: &LabeledDataset,
        weights: Option<ClassWeights>,
        seed: u64,
    ) -> Result<Predictor, EvalError> {
        let shape = train_set
            .common_shape()?
            .ok_or(EvalError::EmptyDataset)?;
        let rng = StreamRng::new(seed);
        let mut model =
            build_cnn::<f32>(train_set.scheme.n_classes(), shape, &rng)?.with_dropout(self.dropout);
        let config = TrainConfig {
            seed,
            class_weights: weights,
            ..self.config.clone()
        };
        let train_pairs: Vec<(&MelSpectrogram, usize)> = train_set
            .samples
            .iter()
            .map(|s| (&s.spec, s.label))
            .collect();
        let val_pairs: Vec<(&MelSpectrogram, usize)> = val_set
            .samples
            .iter()
            .map(|s| (&s.spec, s.label))
            .collect();
        train(&mut model, &train_pairs, &val_pairs, &config)?;
        Ok(Box::new(move |spec| {
            model.predict(spec).map(|(_, class)| class).map_err(EvalError::from)
        }))
    }
}

/// Stratified holdout of roughly `fraction` of the given indices.
fn carve_validation(
    dataset: &LabeledDataset,
    indices: &[usize],
    fraction: f64,
    stream: &mut Stream,
) -> (Vec<usize>, Vec<usize>) {
    let n_classes = dataset.scheme.n_classes();
    let mut val = Vec::new();
    let mut rest = Vec::new();
    for class in 0..n_classes {
        let mut members: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| dataset.samples[i].label == class)
            .collect();
        stream.shuffle(&mut members);
        let n_val = (members.len() as f64 * fraction).floor() as usize;
        val.extend_from_slice(&members[..n_val]);
        rest.extend_from_slice(&members[n_val..]);
    }
    val.sort_unstable();
    rest.sort_unstable();
    (val, rest)
}

/// No synthetic's recorded parent may sit in the test fold.
fn check_leakage(
    balanced: &LabeledDataset,
    test_ids: &BTreeSet<&str>,
) -> Result<(), EvalError> {
    for s in balanced.samples.iter().filter(|s| s.synthetic) {
        for parent in &s.parents {
            if test_ids.contains(parent.as_str()) {
                return Err(EvalError::Leakage {
                    synthetic: s.source_id.clone(),
                    parent: parent.clone(),
                });
            }
        }
    }
    Ok(())
}

fn aggregate(folds: &[MetricsReport]) -> (MetricsReport, MetricsReport) {
    let n = folds.len() as f64;
    let mean_of = |f: fn(&MetricsReport) -> f64| folds.iter().map(f).sum::<f64>() / n;
    let mean = MetricsReport {
        sensitivity: mean_of(|r| r.sensitivity),
        specificity: mean_of(|r| r.specificity),
        score: mean_of(|r| r.score),
        precision: mean_of(|r| r.precision),
        recall: mean_of(|r| r.recall),
        fscore: mean_of(|r| r.fscore),
    };
    // Sample standard deviation (n - 1).
    let std_of = |f: fn(&MetricsReport) -> f64, m: f64| {
        if folds.len() < 2 {
            0.0
        } else {
            (folds.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        }
    };
    let std = MetricsReport {
        sensitivity: std_of(|r| r.sensitivity, mean.sensitivity),
        specificity: std_of(|r| r.specificity, mean.specificity),
        score: std_of(|r| r.score, mean.score),
        precision: std_of(|r| r.precision, mean.precision),
        recall: std_of(|r| r.recall, mean.recall),
        fscore: std_of(|r| r.fscore, mean.fscore),
    };
    (mean, std)
}

/// Cross-validated evaluation of one balancing configuration with the CNN.
pub fn run_experiment(
    dataset: &LabeledDataset,
    config: &ExperimentConfig,
) -> Result<ExperimentResult, EvalError> {
    let trainer = CnnTrainer {
        config: config.train.clone(),
        dropout: config.dropout,
    };
    run_experiment_with(dataset, config, &trainer)
}

/// The harness with an injectable per-fold trainer.
pub fn run_experiment_with<Tr: FoldTrainer>(
    dataset: &LabeledDataset,
    config: &ExperimentConfig,
    trainer: &Tr,
) -> Result<ExperimentResult, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    dataset.common_shape()?;
    let scheme = dataset.scheme;
    let rng = StreamRng::new(config.seed);

    // The published order balances everything first, then splits.
    let working = if config.protocol == Protocol::Paper && config.method.oversamples() {
        let counts = dataset.class_counts();
        let targets = resolve_targets(&config.targets, scheme, &counts)?;
        let plan = OversamplePlan::new(
            config.method,
            targets,
            config.k_neighbors,
            derive_seed(config.seed, "balance", u64::MAX),
        );
        apply_plan(dataset, &plan, &config.vae)?
    } else {
        dataset.clone()
    };
    let full_counts = working.class_counts();
    let global_targets = resolve_targets(&config.targets, scheme, &full_counts)?;

    let labels: Vec<usize> = working.samples.iter().map(|s| s.label).collect();
    let folds = if config.patient_disjoint {
        let patients: Vec<Option<u32>> =
            working.samples.iter().map(|s| s.patient_id).collect();
        kfold_split_by_patient(&patients, config.folds, &mut rng.stream("split"))?
    } else {
        kfold_split(&labels, config.folds, config.stratified, &mut rng.stream("split"))?
    };

    let k = folds.len();
    let run_fold = |fold: usize| -> Result<(MetricsReport, ConfusionMatrix), EvalError> {
        let test_idx = &folds[fold];
        let train_idx: Vec<usize> = (0..working.len())
            .filter(|i| !test_idx.contains(i))
            .collect();
        let mut val_stream = rng.stream_at("val", fold as u64);
        let (val_idx, rest_idx) = carve_validation(
            &working,
            &train_idx,
            config.validation_fraction,
            &mut val_stream,
        );
        let val_set = working.subset(&val_idx);
        let mut train_set = working.subset(&rest_idx);

        let train_counts = train_set.class_counts();
        let weights = if config.method == BalanceMethod::Weights {
            Some(class_weights(&train_counts)?)
        } else {
            None
        };
        if config.protocol == Protocol::Default && config.method.oversamples() {
            let plan = OversamplePlan::new(
                config.method,
                global_targets.clone(),
                config.k_neighbors,
                derive_seed(config.seed, "balance", fold as u64),
            )
            .scaled_to(&full_counts, &train_counts);
            train_set = apply_plan(&train_set, &plan, &config.vae)?;
            let test_ids: BTreeSet<&str> = test_idx
                .iter()
                .map(|&i| working.samples[i].source_id.as_str())
                .collect();
            check_leakage(&train_set, &test_ids)?;
        }

        let predictor = trainer.train_fold(
            &train_set,
            &val_set,
            weights,
            derive_seed(config.seed, "fold", fold as u64),
        )?;
        let mut preds = Vec::with_capacity(test_idx.len());
        let mut truths = Vec::with_capacity(test_idx.len());
        for &i in test_idx {
            preds.push(predictor(&working.samples[i].spec)?);
            truths.push(working.samples[i].label);
        }
        let cm = confusion(&preds, &truths, scheme.n_classes())?;
        let metrics = metrics_for_scheme(&cm, scheme)?;
        Ok((metrics, cm))
    };

    let jobs = config.jobs.max(1).min(k);
    let slots: Mutex<Vec<Option<Result<(MetricsReport, ConfusionMatrix), EvalError>>>> =
        Mutex::new((0..k).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let fold = next.fetch_add(1, Ordering::SeqCst);
                if fold >= k {
                    break;
                }
                let out = run_fold(fold);
                slots.lock().unwrap()[fold] = Some(out);
            });
        }
    });

    let mut fold_reports = Vec::with_capacity(k);
    let mut confusions = Vec::with_capacity(k);
    for (fold, slot) in slots.into_inner().unwrap().into_iter().enumerate() {
        let (metrics, cm) =
            slot.expect("worker filled every slot")
                .map_err(|e| EvalError::InFold(fold, Box::new(e)))?;
        fold_reports.push(metrics);
        confusions.push(cm);
    }
    let (mean, std) = aggregate(&fold_reports);
    Ok(ExperimentResult {
        configuration: config.method.configuration_tag().to_string(),
        scheme: scheme.name().to_string(),
        seed: config.seed,
        folds: fold_reports,
        mean,
        std,
        protocol: config.protocol.name().to_string(),
        confusions,
    })
}
