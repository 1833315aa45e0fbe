//! Featurized, labeled samples as consumed by training and evaluation.

use std::collections::BTreeSet;
use std::path::Path;

use thiserror::Error;

use crate::ingest::{read_manifest, IngestError, LabelScheme, ManifestRow};
use crate::melspec::{read_spec, write_spec, MelSpectrogram, SpecFileError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("manifest mixes schemes ({0} vs {1})")]
    MixedSchemes(String, String),
    #[error("unknown scheme {0:?}")]
    UnknownScheme(String),
    #[error("row {0}: label {1:?} is not a class of scheme {2}")]
    UnknownLabel(usize, String, &'static str),
    #[error("samples disagree on shape: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("feature file for {0}: {1}")]
    Feature(String, SpecFileError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One labeled spectrogram. Synthetic samples carry the source ids of the
/// originals they were derived from.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub source_id: String,
    pub patient_id: Option<u32>,
    pub label: usize,
    pub spec: MelSpectrogram,
    pub synthetic: bool,
    pub parents: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub scheme: LabelScheme,
    pub samples: Vec<LabeledSample>,
}

impl LabeledDataset {
    pub fn new(scheme: LabelScheme) -> Self {
        Self {
            scheme,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.scheme.n_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Common `(rows, cols)` of all samples; errors when shapes diverge.
    pub fn common_shape(&self) -> Result<Option<(usize, usize)>, DatasetError> {
        let mut shape = None;
        for s in &self.samples {
            let this = (s.spec.rows(), s.spec.cols());
            match shape {
                None => shape = Some(this),
                Some(prev) if prev != this => {
                    return Err(DatasetError::ShapeMismatch(prev.0, prev.1, this.0, this.1))
                }
                _ => {}
            }
        }
        Ok(shape)
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            scheme: self.scheme,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Indices of samples with the given label.
    pub fn indices_of_class(&self, label: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == label)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn source_ids(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.source_id.as_str()).collect()
    }
}

/// Load a featurized dataset: manifest rows plus one MELSPEC file per
/// source id under `features_dir`.
pub fn load_features(manifest: &Path, features_dir: &Path) -> Result<LabeledDataset, DatasetError> {
    let rows = read_manifest(manifest)?;
    if rows.is_empty() {
        return Err(DatasetError::EmptyManifest);
    }
    let scheme_name = rows[0].scheme.clone();
    let scheme = LabelScheme::parse(&scheme_name)
        .ok_or_else(|| DatasetError::UnknownScheme(scheme_name.clone()))?;
    let mut dataset = LabeledDataset::new(scheme);
    for (i, row) in rows.iter().enumerate() {
        if row.scheme != scheme_name {
            return Err(DatasetError::MixedSchemes(scheme_name, row.scheme.clone()));
        }
        let label = scheme
            .label_index(&row.label)
            .ok_or_else(|| DatasetError::UnknownLabel(i + 1, row.label.clone(), scheme.name()))?;
        let path = features_dir.join(format!("{}.msp", row.source_id));
        let spec =
            read_spec(&path).map_err(|e| DatasetError::Feature(row.source_id.clone(), e))?;
        dataset.samples.push(LabeledSample {
            source_id: row.source_id.clone(),
            patient_id: row.patient_id,
            label,
            spec,
            synthetic: row.synthetic,
            parents: Vec::new(),
        });
    }
    dataset.common_shape()?;
    Ok(dataset)
}

/// Write every sample's MELSPEC file and the matching manifest into `dir`.
pub fn write_features(dataset: &LabeledDataset, dir: &Path) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        write_spec(&s.spec, &dir.join(format!("{}.msp", s.source_id)))
            .map_err(|e| DatasetError::Feature(s.source_id.clone(), e))?;
        rows.push(ManifestRow {
            source_id: s.source_id.clone(),
            patient_id: s.patient_id,
            label: dataset.scheme.class_names()[s.label].to_string(),
            scheme: dataset.scheme.name().to_string(),
            synthetic: s.synthetic,
        });
    }
    crate::ingest::write_manifest(&rows, &dir.join("manifest.csv"))?;
    Ok(())
}
