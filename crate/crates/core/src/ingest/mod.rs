//! Recording ingestion: WAV audio, filename metadata, the diagnosis table
//! and label assignment under the ternary or six-class scheme.

pub mod wav;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use wav::{parse_wav, WavError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{file}: {source}")]
    Wav {
        file: String,
        source: WavError,
    },
    #[error("filename {0:?}: wrong field count (expected 5 underscore-separated fields)")]
    WrongFieldCount(String),
    #[error("filename {0:?}: non-numeric patient id")]
    NonNumericPatientId(String),
    #[error("filename {0:?}: unknown chest location code {1:?}")]
    UnknownChestLocation(String, String),
    #[error("filename {0:?}: unknown acquisition mode code {1:?}")]
    UnknownAcquisitionMode(String, String),
    #[error("diagnosis row {0}: expected `patient<sep>diagnosis`")]
    BadDiagnosisRow(usize),
    #[error("diagnosis row {0}: duplicate patient id {1}")]
    DuplicatePatient(usize, u32),
    #[error("diagnosis row {0}: unknown diagnosis {1:?}")]
    UnknownDiagnosis(usize, String),
    #[error("recording {0}: no diagnosis entry for patient {1}")]
    MissingDiagnosis(String, u32),
    #[error("manifest line {0}: {1}")]
    BadManifestRow(usize, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono recording in amplitude range `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_id: String,
}

/// One of the seven auscultation sites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChestLocation {
    Trachea,
    AnteriorLeft,
    AnteriorRight,
    PosteriorLeft,
    PosteriorRight,
    LateralLeft,
    LateralRight,
}

impl ChestLocation {
    fn from_code(code: &str) -> Option<Self> {
        Some(match code {
            "Tc" => Self::Trachea,
            "Al" => Self::AnteriorLeft,
            "Ar" => Self::AnteriorRight,
            "Pl" => Self::PosteriorLeft,
            "Pr" => Self::PosteriorRight,
            "Ll" => Self::LateralLeft,
            "Lr" => Self::LateralRight,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AcquisitionMode {
    SingleChannel,
    MultiChannel,
}

/// Metadata carried by the dataset's file naming convention:
/// `{patient}_{index}_{location}_{mode}_{equipment}.wav`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordingMeta {
    pub patient_id: u32,
    pub recording_index: String,
    pub chest_location: ChestLocation,
    pub acquisition_mode: AcquisitionMode,
    pub equipment: String,
}

pub fn parse_filename(name: &str) -> Result<RecordingMeta, IngestError> {
    let stem = name.strip_suffix(".wav").unwrap_or(name);
    let fields: Vec<&str> = stem.split('_').collect();
    if fields.len() != 5 {
        return Err(IngestError::WrongFieldCount(name.to_string()));
    }
    let patient_id: u32 = fields[0]
        .parse()
        .map_err(|_| IngestError::NonNumericPatientId(name.to_string()))?;
    let chest_location = ChestLocation::from_code(fields[2]).ok_or_else(|| {
        IngestError::UnknownChestLocation(name.to_string(), fields[2].to_string())
    })?;
    let acquisition_mode = match fields[3] {
        "sc" => AcquisitionMode::SingleChannel,
        "mc" => AcquisitionMode::MultiChannel,
        other => {
            return Err(IngestError::UnknownAcquisitionMode(
                name.to_string(),
                other.to_string(),
            ))
        }
    };
    Ok(RecordingMeta {
        patient_id,
        recording_index: fields[1].to_string(),
        chest_location,
        acquisition_mode,
        equipment: fields[4].to_string(),
    })
}

/// The eight diagnoses carried by the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Disease {
    Copd,
    Asthma,
    Urti,
    Lrti,
    Bronchiectasis,
    Pneumonia,
    Bronchiolitis,
    Healthy,
}

impl Disease {
    fn parse(s: &str) -> Option<Self> {
        Some(match s.trim().to_ascii_lowercase().as_str() {
            "copd" => Self::Copd,
            "asthma" => Self::Asthma,
            "urti" => Self::Urti,
            "lrti" => Self::Lrti,
            "bronchiectasis" => Self::Bronchiectasis,
            "pneumonia" => Self::Pneumonia,
            "bronchiolitis" => Self::Bronchiolitis,
            "healthy" => Self::Healthy,
            _ => return None,
        })
    }
}

impl fmt::Display for Disease {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Copd => "COPD",
            Self::Asthma => "Asthma",
            Self::Urti => "URTI",
            Self::Lrti => "LRTI",
            Self::Bronchiectasis => "Bronchiectasis",
            Self::Pneumonia => "Pneumonia",
            Self::Bronchiolitis => "Bronchiolitis",
            Self::Healthy => "Healthy",
        };
        f.write_str(s)
    }
}

/// Unique mapping from patient id to diagnosis.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DiagnosisTable {
    map: BTreeMap<u32, Disease>,
}

impl DiagnosisTable {
    pub fn get(&self, patient_id: u32) -> Option<Disease> {
        self.map.get(&patient_id).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Parse `patient<sep>diagnosis` rows; the separator (tab or comma) is
/// detected from the first data row and must hold for the whole file.
/// Diagnosis strings match case-insensitively after trimming.
pub fn load_diagnoses(text: &str) -> Result<DiagnosisTable, IngestError> {
    let mut map = BTreeMap::new();
    let mut sep: Option<char> = None;
    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let sep = *sep.get_or_insert(if line.contains('\t') { '\t' } else { ',' });
        let mut parts = line.split(sep);
        let (id_part, diag_part) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => return Err(IngestError::BadDiagnosisRow(line_no + 1)),
        };
        let patient_id: u32 = id_part
            .trim()
            .parse()
            .map_err(|_| IngestError::BadDiagnosisRow(line_no + 1))?;
        let disease = Disease::parse(diag_part)
            .ok_or_else(|| IngestError::UnknownDiagnosis(line_no + 1, diag_part.trim().to_string()))?;
        if map.insert(patient_id, disease).is_some() {
            return Err(IngestError::DuplicatePatient(line_no + 1, patient_id));
        }
    }
    Ok(DiagnosisTable { map })
}

/// Label scheme with its fixed canonical class order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelScheme {
    /// chronic, non-chronic, healthy
    Ternary,
    /// COPD, pneumonia, healthy, URTI, bronchiectasis, bronchiolitis
    /// (LRTI and asthma recordings are dropped)
    SixClass,
}

impl LabelScheme {
    pub fn class_names(&self) -> &'static [&'static str] {
        match self {
            Self::Ternary => &["chronic", "non-chronic", "healthy"],
            Self::SixClass => &[
                "COPD",
                "pneumonia",
                "healthy",
                "URTI",
                "bronchiectasis",
                "bronchiolitis",
            ],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_names().len()
    }

    /// Index of the healthy class in canonical order.
    pub fn healthy_index(&self) -> usize {
        2
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Ternary => "ternary",
            Self::SixClass => "six",
        }
    }

    /// Class index for a diagnosis; `None` means the recording is excluded
    /// from this scheme.
    pub fn label_of(&self, disease: Disease) -> Option<usize> {
        match self {
            Self::Ternary => Some(match disease {
                Disease::Copd | Disease::Bronchiectasis | Disease::Asthma => 0,
                Disease::Pneumonia | Disease::Urti | Disease::Bronchiolitis | Disease::Lrti => 1,
                Disease::Healthy => 2,
            }),
            Self::SixClass => match disease {
                Disease::Copd => Some(0),
                Disease::Pneumonia => Some(1),
                Disease::Healthy => Some(2),
                Disease::Urti => Some(3),
                Disease::Bronchiectasis => Some(4),
                Disease::Bronchiolitis => Some(5),
                Disease::Lrti | Disease::Asthma => None,
            },
        }
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.class_names().iter().position(|&n| n == name)
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "ternary" => Some(Self::Ternary),
            "six" | "six-class" | "sixclass" => Some(Self::SixClass),
            _ => None,
        }
    }
}

/// One labeled recording on disk (audio not yet loaded).
#[derive(Clone, Debug)]
pub struct AudioEntry {
    pub source_id: String,
    pub path: PathBuf,
    pub meta: RecordingMeta,
    pub disease: Disease,
    pub label: usize,
}

/// Labeled recordings under one scheme, sorted by source id so the result
/// is independent of directory iteration order.
#[derive(Clone, Debug, Default)]
pub struct AudioSet {
    pub entries: Vec<AudioEntry>,
    pub dropped: usize,
}

impl AudioSet {
    pub fn class_counts(&self, scheme: LabelScheme) -> Vec<usize> {
        let mut counts = vec![0usize; scheme.n_classes()];
        for e in &self.entries {
            counts[e.label] += 1;
        }
        counts
    }
}

/// Scan `audio_dir` for `.wav` files, join them against the diagnosis
/// table and assign labels under `scheme`. Six-class mode drops the
/// excluded diagnoses and counts them in `dropped`.
pub fn build_dataset(
    audio_dir: &Path,
    diagnoses: &DiagnosisTable,
    scheme: LabelScheme,
) -> Result<AudioSet, IngestError> {
    let mut entries = Vec::new();
    let mut dropped = 0usize;
    let mut names: Vec<(String, PathBuf)> = Vec::new();
    for item in std::fs::read_dir(audio_dir)? {
        let item = item?;
        let path = item.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if path.is_file() && name.to_ascii_lowercase().ends_with(".wav") {
            names.push((name.to_string(), path));
        }
    }
    names.sort();
    for (name, path) in names {
        let meta = parse_filename(&name)?;
        let source_id = name.strip_suffix(".wav").unwrap_or(&name).to_string();
        let disease = diagnoses
            .get(meta.patient_id)
            .ok_or_else(|| IngestError::MissingDiagnosis(source_id.clone(), meta.patient_id))?;
        match scheme.label_of(disease) {
            Some(label) => entries.push(AudioEntry {
                source_id,
                path,
                meta,
                disease,
                label,
            }),
            None => dropped += 1,
        }
    }
    Ok(AudioSet { entries, dropped })
}

/// One row of the dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub source_id: String,
    pub patient_id: Option<u32>,
    pub label: String,
    pub scheme: String,
    pub synthetic: bool,
}

/// Write the manifest CSV (`source_id,patient_id,label,scheme`). A fifth
/// `synthetic` column is added only when any row needs it, keeping the
/// plain four-column layout for ingested data.
pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<(), IngestError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let any_synthetic = rows.iter().any(|r| r.synthetic);
    if any_synthetic {
        writeln!(out, "source_id,patient_id,label,scheme,synthetic")?;
    } else {
        writeln!(out, "source_id,patient_id,label,scheme")?;
    }
    for row in rows {
        let patient = row
            .patient_id
            .map(|p| p.to_string())
            .unwrap_or_default();
        if any_synthetic {
            writeln!(
                out,
                "{},{},{},{},{}",
                row.source_id, patient, row.label, row.scheme, row.synthetic
            )?;
        } else {
            writeln!(out, "{},{},{},{}", row.source_id, patient, row.label, row.scheme)?;
        }
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, IngestError> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        if line_no == 0 && line.starts_with("source_id") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 && fields.len() != 5 {
            return Err(IngestError::BadManifestRow(
                line_no + 1,
                format!("expected 4 or 5 fields, got {}", fields.len()),
            ));
        }
        let patient_id = if fields[1].is_empty() {
            None
        } else {
            Some(fields[1].parse().map_err(|_| {
                IngestError::BadManifestRow(line_no + 1, "bad patient id".to_string())
            })?)
        };
        let synthetic = fields.len() == 5 && fields[4] == "true";
        rows.push(ManifestRow {
            source_id: fields[0].to_string(),
            patient_id,
            label: fields[2].to_string(),
            scheme: fields[3].to_string(),
            synthetic,
        });
    }
    Ok(rows)
}

impl AudioSet {
    pub fn manifest_rows(&self, scheme: LabelScheme) -> Vec<ManifestRow> {
        self.entries
            .iter()
            .map(|e| ManifestRow {
                source_id: e.source_id.clone(),
                patient_id: Some(e.meta.patient_id),
                label: scheme.class_names()[e.label].to_string(),
                scheme: scheme.name().to_string(),
                synthetic: false,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_standard_naming_convention() {
        let meta = parse_filename("101_1b1_Al_sc_Meditron.wav").unwrap();
        assert_eq!(
            meta,
            RecordingMeta {
                patient_id: 101,
                recording_index: "1b1".to_string(),
                chest_location: ChestLocation::AnteriorLeft,
                acquisition_mode: AcquisitionMode::SingleChannel,
                equipment: "Meditron".to_string(),
            }
        );
    }

    #[test]
    fn filename_error_cases() {
        assert!(matches!(
            parse_filename("x.wav"),
            Err(IngestError::WrongFieldCount(_))
        ));
        assert!(matches!(
            parse_filename("abc_1_Al_sc_M.wav"),
            Err(IngestError::NonNumericPatientId(_))
        ));
        assert!(matches!(
            parse_filename("1_1_Xx_sc_M.wav"),
            Err(IngestError::UnknownChestLocation(..))
        ));
        assert!(matches!(
            parse_filename("1_1_Al_zz_M.wav"),
            Err(IngestError::UnknownAcquisitionMode(..))
        ));
    }

    #[test]
    fn diagnoses_parse_with_comma_or_tab() {
        let t = load_diagnoses("101,URTI\n102,copd\n").unwrap();
        assert_eq!(t.get(101), Some(Disease::Urti));
        assert_eq!(t.get(102), Some(Disease::Copd));
        let t = load_diagnoses("101\tHealthy\n").unwrap();
        assert_eq!(t.get(101), Some(Disease::Healthy));
    }

    #[test]
    fn diagnoses_reject_duplicates_and_unknowns() {
        assert!(matches!(
            load_diagnoses("101,URTI\n101,COPD\n"),
            Err(IngestError::DuplicatePatient(2, 101))
        ));
        assert!(matches!(
            load_diagnoses("102,Emphysema\n"),
            Err(IngestError::UnknownDiagnosis(1, _))
        ));
    }

    #[test]
    fn ternary_mapping_matches_the_partition() {
        use Disease::*;
        let s = LabelScheme::Ternary;
        for d in [Copd, Bronchiectasis, Asthma] {
            assert_eq!(s.label_of(d), Some(0), "{d}");
        }
        for d in [Pneumonia, Urti, Bronchiolitis, Lrti] {
            assert_eq!(s.label_of(d), Some(1), "{d}");
        }
        assert_eq!(s.label_of(Healthy), Some(2));
    }

    #[test]
    fn six_class_drops_lrti_and_asthma() {
        let s = LabelScheme::SixClass;
        assert_eq!(s.label_of(Disease::Lrti), None);
        assert_eq!(s.label_of(Disease::Asthma), None);
        assert_eq!(s.label_of(Disease::Copd), Some(0));
        assert_eq!(s.label_of(Disease::Healthy), Some(2));
        assert_eq!(s.n_classes(), 6);
    }

    #[test]
    fn build_dataset_is_order_independent_and_counts_drops() {
        let dir = tempfile::tempdir().unwrap();
        let wav = wav::encode_wav_pcm16(&[vec![0i16; 64]], 8000);
        for name in [
            "101_1b1_Al_sc_M.wav",
            "102_1b1_Ar_sc_M.wav",
            "103_1b1_Tc_sc_M.wav",
            "104_1b1_Pl_mc_A.wav",
        ] {
            std::fs::write(dir.path().join(name), &wav).unwrap();
        }
        let table = load_diagnoses("101,COPD\n102,LRTI\n103,Asthma\n104,Healthy\n").unwrap();
        let set = build_dataset(dir.path(), &table, LabelScheme::SixClass).unwrap();
        assert_eq!(set.entries.len(), 2);
        assert_eq!(set.dropped, 2);
        assert_eq!(set.class_counts(LabelScheme::SixClass)[0], 1); // COPD
        assert_eq!(set.class_counts(LabelScheme::SixClass)[2], 1); // healthy

        let ternary = build_dataset(dir.path(), &table, LabelScheme::Ternary).unwrap();
        assert_eq!(ternary.dropped, 0);
        assert_eq!(ternary.class_counts(LabelScheme::Ternary), vec![2, 1, 1]);
        // Sorted by source id regardless of directory order.
        let ids: Vec<&str> = ternary.entries.iter().map(|e| e.source_id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn empty_directory_yields_empty_set() {
        let dir = tempfile::tempdir().unwrap();
        let table = DiagnosisTable::default();
        let set = build_dataset(dir.path(), &table, LabelScheme::Ternary).unwrap();
        assert!(set.entries.is_empty());
    }

    #[test]
    fn missing_diagnosis_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let wav = wav::encode_wav_pcm16(&[vec![0i16; 8]], 8000);
        std::fs::write(dir.path().join("7_1_Al_sc_M.wav"), &wav).unwrap();
        let table = DiagnosisTable::default();
        assert!(matches!(
            build_dataset(dir.path(), &table, LabelScheme::Ternary),
            Err(IngestError::MissingDiagnosis(_, 7))
        ));
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ManifestRow {
                source_id: "101_1b1_Al_sc_M".to_string(),
                patient_id: Some(101),
                label: "chronic".to_string(),
                scheme: "ternary".to_string(),
                synthetic: false,
            },
            ManifestRow {
                source_id: "vae-healthy-0".to_string(),
                patient_id: None,
                label: "healthy".to_string(),
                scheme: "ternary".to_string(),
                synthetic: true,
            },
        ];
        let path = dir.path().join("manifest.csv");
        write_manifest(&rows, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), rows);

        // Pure original rows keep the plain four-column header.
        let path2 = dir.path().join("manifest2.csv");
        write_manifest(&rows[..1], &path2).unwrap();
        let text = std::fs::read_to_string(&path2).unwrap();
        assert!(text.starts_with("source_id,patient_id,label,scheme\n"));
        assert_eq!(read_manifest(&path2).unwrap(), rows[..1]);
    }
}
