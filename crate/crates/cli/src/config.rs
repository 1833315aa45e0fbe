//! Run configuration: a sectioned key-value file mirroring the module
//! layout. Every field has a default; unknown keys are rejected so typos
//! cannot silently fall back. Command-line flags override file values,
//! which override defaults.

use std::path::{Path, PathBuf};

use auscult_core::balance::BalanceMethod;
use auscult_core::cnn::TrainConfig;
use auscult_core::eval::{ExperimentConfig, Protocol, TargetPolicy};
use auscult_core::ingest::LabelScheme;
use auscult_core::melspec::MelConfig;
use auscult_core::vae::VaeTrainConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub melspec: MelspecSection,
    #[serde(default)]
    pub balance: BalanceSection,
    #[serde(default)]
    pub vae: VaeSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub audio_dir: Option<PathBuf>,
    pub diagnoses: Option<PathBuf>,
    pub work_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelspecSection {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelspecSection {
    fn default() -> Self {
        let m = MelConfig::default();
        Self {
            sample_rate: m.target_sample_rate,
            window: m.window_size,
            hop: m.hop,
            n_mels: m.n_mels,
            fmin: m.fmin,
            fmax: m.fmax,
            log_floor: m.log_floor,
        }
    }
}

impl MelspecSection {
    pub fn to_mel_config(&self) -> MelConfig {
        MelConfig {
            target_sample_rate: self.sample_rate,
            window_size: self.window,
            hop: self.hop,
            n_mels: self.n_mels,
            fmin: self.fmin,
            fmax: self.fmax,
            log_floor: self.log_floor,
        }
    }
}

/// `targets` accepts `"paper"`, `"majority"`, or an explicit per-class
/// list in canonical class order.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum TargetsField {
    Named(String),
    List(Vec<usize>),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceSection {
    pub method: String,
    pub k_neighbors: usize,
    pub targets: TargetsField,
}

impl Default for BalanceSection {
    fn default() -> Self {
        Self {
            method: "none".to_string(),
            k_neighbors: 5,
            targets: TargetsField::Named("paper".to_string()),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub kl_weight: f64,
}

impl Default for VaeSection {
    fn default() -> Self {
        let v = VaeTrainConfig::default();
        Self {
            epochs: v.epochs,
            batch_size: v.batch_size,
            lr: v.lr,
            latent_dim: v.latent_dim,
            hidden_dim: v.hidden_dim,
            kl_weight: v.kl_weight,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub dropout: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            patience: t.patience,
            dropout: 0.5,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub folds: usize,
    pub stratified: bool,
    pub patient_disjoint: bool,
    pub protocol: String,
    pub validation_fraction: f64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            folds: 10,
            stratified: true,
            patient_disjoint: false,
            protocol: "default".to_string(),
            validation_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub scheme: String,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            scheme: "ternary".to_string(),
            seed: 0,
            jobs: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::User(format!("cannot read config {}: {e}", p.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| CliError::User(format!("config {}: {e}", p.display())))
            }
        }
    }

    pub fn scheme(&self) -> Result<LabelScheme, CliError> {
        LabelScheme::parse(&self.run.scheme)
            .ok_or_else(|| CliError::User(format!("unknown scheme {:?} (ternary|six)", self.run.scheme)))
    }

    pub fn method(&self) -> Result<BalanceMethod, CliError> {
        BalanceMethod::parse(&self.balance.method).ok_or_else(|| {
            CliError::User(format!(
                "unknown method {:?} (none|weights|smote|adasyn|vae)",
                self.balance.method
            ))
        })
    }

    pub fn protocol(&self) -> Result<Protocol, CliError> {
        Protocol::parse(&self.evaluate.protocol).ok_or_else(|| {
            CliError::User(format!(
                "unknown protocol {:?} (default|paper)",
                self.evaluate.protocol
            ))
        })
    }

    pub fn target_policy(&self) -> Result<TargetPolicy, CliError> {
        match &self.balance.targets {
            TargetsField::Named(name) => match name.as_str() {
                "paper" => Ok(TargetPolicy::Paper),
                "majority" => Ok(TargetPolicy::Majority),
                other => Err(CliError::User(format!(
                    "unknown targets {other:?} (paper|majority|[counts...])"
                ))),
            },
            TargetsField::List(v) => Ok(TargetPolicy::Explicit(v.clone())),
        }
    }

    /// Assemble the experiment configuration from this file's sections.
    pub fn experiment_config(&self) -> Result<ExperimentConfig, CliError> {
        Ok(ExperimentConfig {
            method: self.method()?,
            protocol: self.protocol()?,
            folds: self.evaluate.folds,
            stratified: self.evaluate.stratified,
            patient_disjoint: self.evaluate.patient_disjoint,
            targets: self.target_policy()?,
            k_neighbors: self.balance.k_neighbors,
            validation_fraction: self.evaluate.validation_fraction,
            train: TrainConfig {
                epochs: self.train.epochs,
                batch_size: self.train.batch_size,
                lr: self.train.lr,
                seed: self.run.seed,
                class_weights: None,
                patience: self.train.patience,
            },
            dropout: self.train.dropout,
            vae: VaeTrainConfig {
                epochs: self.vae.epochs,
                batch_size: self.vae.batch_size,
                lr: self.vae.lr,
                latent_dim: self.vae.latent_dim,
                hidden_dim: self.vae.hidden_dim,
                kl_weight: self.vae.kl_weight,
                seed: self.run.seed,
            },
            seed: self.run.seed,
            jobs: self.run.jobs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_load_without_a_file() {
        let c = RunConfig::load(None).unwrap();
        assert_eq!(c.melspec.n_mels, 128);
        assert_eq!(c.evaluate.folds, 10);
        assert_eq!(c.run.jobs, 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "[melspec]\nn_mells = 64\n").unwrap();
        let err = RunConfig::load(Some(&p)).unwrap_err();
        assert!(err.to_string().contains("n_mells"), "{err}");
    }

    #[test]
    fn explicit_targets_parse_as_a_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(
            &p,
            "[balance]\nmethod = \"vae\"\nk_neighbors = 5\ntargets = [30, 20, 30]\n",
        )
        .unwrap();
        let c = RunConfig::load(Some(&p)).unwrap();
        assert!(matches!(
            c.target_policy().unwrap(),
            TargetPolicy::Explicit(v) if v == vec![30, 20, 30]
        ));
        assert_eq!(c.method().unwrap(), BalanceMethod::Vae);
    }
}
