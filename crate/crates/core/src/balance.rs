//! Imbalance correction: class weights plus the SMOTE, ADASYN and VAE
//! oversamplers. Oversampling appends synthetic samples and never touches
//! the originals; every synthetic row records its parents so leakage can
//! be checked downstream.

use thiserror::Error;

use crate::dataset::{LabeledDataset, LabeledSample};
use crate::melspec::MelSpectrogram;
use crate::tensor::{derive_seed, Stream, StreamRng};
use crate::vae::{generate, train_vae, VaeError, VaeTrainConfig};

#[derive(Debug, Error)]
pub enum BalanceError {
    #[error("class {0} is empty")]
    EmptyClass(usize),
    #[error("class {class}: target {target} below current count {count} (oversampling only)")]
    TargetBelowCount {
        class: usize,
        target: usize,
        count: usize,
    },
    #[error("need at least 2 minority rows, got {0}")]
    TooFewMinorityRows(usize),
    #[error("k_neighbors must be >= 1")]
    BadNeighborCount,
    #[error("plan has {0} targets, dataset has {1} classes")]
    TargetArity(usize, usize),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
}

/// Positive per-class loss multipliers.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
}

/// Balanced-heuristic weights: `w_c = N_total / (K * n_c)`.
pub fn class_weights(counts: &[usize]) -> Result<ClassWeights, BalanceError> {
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(BalanceError::EmptyClass(empty));
    }
    let total: usize = counts.iter().sum();
    let k = counts.len();
    Ok(ClassWeights {
        weights: counts
            .iter()
            .map(|&n| total as f64 / (k as f64 * n as f64))
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BalanceMethod {
    None,
    Weights,
    Smote,
    Adasyn,
    Vae,
}

impl BalanceMethod {
    /// Name used on the command line.
    pub fn flag_name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Weights => "weights",
            Self::Smote => "smote",
            Self::Adasyn => "adasyn",
            Self::Vae => "vae",
        }
    }

    /// Tag used in experiment reports.
    pub fn configuration_tag(&self) -> &'static str {
        match self {
            Self::None => "unbalanced",
            Self::Weights => "weighted",
            Self::Smote => "smote",
            Self::Adasyn => "adasyn",
            Self::Vae => "vae",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "none" | "unbalanced" => Some(Self::None),
            "weights" | "weighted" => Some(Self::Weights),
            "smote" => Some(Self::Smote),
            "adasyn" => Some(Self::Adasyn),
            "vae" => Some(Self::Vae),
            _ => None,
        }
    }

    pub fn oversamples(&self) -> bool {
        matches!(self, Self::Smote | Self::Adasyn | Self::Vae)
    }
}

/// Per-class oversampling targets for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct OversamplePlan {
    pub method: BalanceMethod,
    pub targets: Vec<usize>,
    pub k_neighbors: usize,
    pub seed: u64,
}

/// Published post-augmentation sizes for the ternary task (chronic stays,
/// the minority classes are raised).
pub const TERNARY_PAPER_TARGETS: [usize; 3] = [810, 900, 840];

/// Six-class sizes: the majority stays at 793 and the five minority
/// classes rise to a near-uniform level; the total is exactly 4874.
pub const SIX_CLASS_PAPER_TARGETS: [usize; 6] = [793, 817, 816, 816, 816, 816];

impl OversamplePlan {
    pub fn new(method: BalanceMethod, targets: Vec<usize>, k_neighbors: usize, seed: u64) -> Self {
        Self {
            method,
            targets,
            k_neighbors,
            seed,
        }
    }

    /// Raise every class to the majority count.
    pub fn balance_to_majority(method: BalanceMethod, counts: &[usize], k: usize, seed: u64) -> Self {
        let max = counts.iter().copied().max().unwrap_or(0);
        Self::new(method, vec![max; counts.len()], k, seed)
    }

    pub fn validate(&self, counts: &[usize]) -> Result<(), BalanceError> {
        if self.targets.len() != counts.len() {
            return Err(BalanceError::TargetArity(self.targets.len(), counts.len()));
        }
        if self.k_neighbors == 0 {
            return Err(BalanceError::BadNeighborCount);
        }
        for (class, (&target, &count)) in self.targets.iter().zip(counts).enumerate() {
            if target < count {
                return Err(BalanceError::TargetBelowCount {
                    class,
                    target,
                    count,
                });
            }
        }
        Ok(())
    }

    /// Scale targets to a subset of the data (e.g. the training portion of
    /// one fold), preserving each class's augmentation ratio and never
    /// dropping below the subset's own count.
    pub fn scaled_to(&self, full_counts: &[usize], subset_counts: &[usize]) -> Self {
        let targets = self
            .targets
            .iter()
            .zip(full_counts)
            .zip(subset_counts)
            .map(|((&target, &full), &sub)| {
                if full == 0 {
                    sub
                } else {
                    let scaled = (target as f64 * sub as f64 / full as f64).round() as usize;
                    scaled.max(sub)
                }
            })
            .collect();
        Self {
            targets,
            ..self.clone()
        }
    }
}

/// A synthetic row with the generation trace that produced it:
/// `row = base + lambda * (neighbor - base)`.
#[derive(Clone, Debug)]
pub struct Interpolated {
    pub row: Vec<f32>,
    pub base: usize,
    pub neighbor: usize,
    pub lambda: f64,
}

/// Indices of the `k` nearest rows to `rows[query]` among `rows`, self
/// excluded, ties broken by index.
fn k_nearest_within(rows: &[Vec<f32>], query: usize, k: usize) -> Vec<usize> {
    let mut dist: Vec<(f64, usize)> = rows
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != query)
        .map(|(i, row)| (sq_dist(&rows[query], row), i))
        .collect();
    dist.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    dist.into_iter().take(k).map(|(_, i)| i).collect()
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

fn interpolate(base: &[f32], neighbor: &[f32], lambda: f64) -> Vec<f32> {
    base.iter()
        .zip(neighbor)
        .map(|(&x, &n)| {
            let v = f64::from(x) + lambda * (f64::from(n) - f64::from(x));
            // Interpolation of in-range points cannot leave the range; the
            // clamp only guards float round-off.
            (v as f32).clamp(0.0, 1.0)
        })
        .collect()
}

/// SMOTE: each synthetic interpolates a uniformly chosen minority row
/// toward one of its `k` nearest minority neighbors with `lambda ~ U[0,1]`.
/// `k` caps at class size - 1.
pub fn smote(
    minority: &[Vec<f32>],
    n_new: usize,
    k: usize,
    stream: &mut Stream,
) -> Result<Vec<Interpolated>, BalanceError> {
    if minority.len() < 2 {
        return Err(BalanceError::TooFewMinorityRows(minority.len()));
    }
    if k == 0 {
        return Err(BalanceError::BadNeighborCount);
    }
    let k = k.min(minority.len() - 1);
    let neighbors: Vec<Vec<usize>> = (0..minority.len())
        .map(|i| k_nearest_within(minority, i, k))
        .collect();
    let mut out = Vec::with_capacity(n_new);
    for _ in 0..n_new {
        let base = stream.index(minority.len());
        let neighbor = neighbors[base][stream.index(k)];
        let lambda = stream.uniform();
        out.push(Interpolated {
            row: interpolate(&minority[base], &minority[neighbor], lambda),
            base,
            neighbor,
            lambda,
        });
    }
    Ok(out)
}

/// ADASYN: allocation is weighted by each minority point's neighborhood
/// ratio `r_i` = (non-minority points among its `k` nearest neighbors in
/// the full dataset) / `k`, normalized and turned into integer counts by
/// the largest-remainder rule so the total is exactly `n_new`. When no
/// point sees non-minority neighbors the allocation falls back to uniform.
/// Interpolation itself stays within the minority class, as in SMOTE.
pub fn adasyn(
    minority: &[Vec<f32>],
    non_minority: &[Vec<f32>],
    n_new: usize,
    k: usize,
    stream: &mut Stream,
) -> Result<Vec<Interpolated>, BalanceError> {
    if minority.len() < 2 {
        return Err(BalanceError::TooFewMinorityRows(minority.len()));
    }
    if k == 0 {
        return Err(BalanceError::BadNeighborCount);
    }
    let k_full = k.min(minority.len() - 1 + non_minority.len());
    // r_i from the full dataset: minority rows first, then the rest.
    let mut ratios = Vec::with_capacity(minority.len());
    for i in 0..minority.len() {
        let mut dist: Vec<(f64, usize)> = Vec::with_capacity(minority.len() - 1 + non_minority.len());
        for (j, row) in minority.iter().enumerate() {
            if j != i {
                dist.push((sq_dist(&minority[i], row), j));
            }
        }
        for (j, row) in non_minority.iter().enumerate() {
            dist.push((sq_dist(&minority[i], row), minority.len() + j));
        }
        dist.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let foreign = dist
            .iter()
            .take(k_full)
            .filter(|&&(_, idx)| idx >= minority.len())
            .count();
        ratios.push(foreign as f64 / k_full as f64);
    }
    let total: f64 = ratios.iter().sum();
    let shares: Vec<f64> = if total == 0.0 {
        vec![1.0 / minority.len() as f64; minority.len()]
    } else {
        ratios.iter().map(|r| r / total).collect()
    };
    let alloc = largest_remainder(&shares, n_new);

    let k_gen = k.min(minority.len() - 1);
    let neighbors: Vec<Vec<usize>> = (0..minority.len())
        .map(|i| k_nearest_within(minority, i, k_gen))
        .collect();
    let mut out = Vec::with_capacity(n_new);
    for (base, &count) in alloc.iter().enumerate() {
        for _ in 0..count {
            let neighbor = neighbors[base][stream.index(k_gen)];
            let lambda = stream.uniform();
            out.push(Interpolated {
                row: interpolate(&minority[base], &minority[neighbor], lambda),
                base,
                neighbor,
                lambda,
            });
        }
    }
    Ok(out)
}

/// Integer allocation of `total` by fractional shares: floor everything,
/// then hand the remainder out by descending fractional part (ties to the
/// lowest index).
fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        alloc[i] += 1;
    }
    alloc
}

/// Apply an oversampling plan to a dataset. `none`/`weights` return the
/// dataset unchanged (weighting happens at training time); the other
/// methods append synthetics until every class hits its target exactly.
pub fn apply_plan(
    dataset: &LabeledDataset,
    plan: &OversamplePlan,
    vae_config: &VaeTrainConfig,
) -> Result<LabeledDataset, BalanceError> {
    if !plan.method.oversamples() {
        return Ok(dataset.clone());
    }
    let counts = dataset.class_counts();
    plan.validate(&counts)?;
    let shape = dataset.common_shape()?;
    let mut out = dataset.clone();
    let rng = StreamRng::new(plan.seed);
    for class in 0..counts.len() {
        let n_new = plan.targets[class] - counts[class];
        if n_new == 0 {
            continue;
        }
        let class_idx = dataset.indices_of_class(class);
        let (rows, cols) = shape.expect("non-empty class implies a shape");
        let minority: Vec<Vec<f32>> = class_idx
            .iter()
            .map(|&i| dataset.samples[i].spec.values().to_vec())
            .collect();
        let parent_ids: Vec<String> = class_idx
            .iter()
            .map(|&i| dataset.samples[i].source_id.clone())
            .collect();
        let tag = plan.method.flag_name();
        match plan.method {
            BalanceMethod::Smote | BalanceMethod::Adasyn => {
                let mut stream = rng.stream_at("oversample", class as u64);
                let synths = if plan.method == BalanceMethod::Smote {
                    smote(&minority, n_new, plan.k_neighbors, &mut stream)?
                } else {
                    let non_minority: Vec<Vec<f32>> = dataset
                        .samples
                        .iter()
                        .filter(|s| s.label != class)
                        .map(|s| s.spec.values().to_vec())
                        .collect();
                    adasyn(&minority, &non_minority, n_new, plan.k_neighbors, &mut stream)?
                };
                for (n, s) in synths.into_iter().enumerate() {
                    out.samples.push(LabeledSample {
                        source_id: format!("{tag}-{class}-{n}"),
                        patient_id: None,
                        label: class,
                        spec: MelSpectrogram::new(rows, cols, s.row, true),
                        synthetic: true,
                        parents: vec![
                            parent_ids[s.base].clone(),
                            parent_ids[s.neighbor].clone(),
                        ],
                    });
                }
            }
            BalanceMethod::Vae => {
                let specs: Vec<&MelSpectrogram> =
                    class_idx.iter().map(|&i| &dataset.samples[i].spec).collect();
                let class_config = VaeTrainConfig {
                    seed: derive_seed(plan.seed, "vae-class", class as u64),
                    ..*vae_config
                };
                let (model, _history) = train_vae(&specs, &class_config)?;
                let mut noise = rng.stream_at("vae-generate", class as u64);
                let generated = generate(&model, n_new, &mut noise)?;
                for (n, spec) in generated.into_iter().enumerate() {
                    out.samples.push(LabeledSample {
                        source_id: format!("{tag}-{class}-{n}"),
                        patient_id: None,
                        label: class,
                        spec,
                        synthetic: true,
                        // The whole class trains the generator, so every
                        // class member is a parent.
                        parents: parent_ids.clone(),
                    });
                }
            }
            BalanceMethod::None | BalanceMethod::Weights => unreachable!(),
        }
    }
    Ok(out)
}
