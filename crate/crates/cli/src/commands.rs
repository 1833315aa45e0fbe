//! Subcommand implementations.

use std::path::Path;

use auscult_core::dataset::load_features;
use auscult_core::eval::{run_experiment, ExperimentResult, MetricsReport};
use auscult_core::ingest::{
    build_dataset, load_diagnoses, parse_wav, read_manifest, write_manifest, LabelScheme,
};
use auscult_core::melspec::{
    mean_columns, mel_spectrogram, minmax_normalize, resize_columns, write_spec, MelSpectrogram,
};

use crate::config::RunConfig;
use crate::CliError;

fn parse_scheme(name: &str) -> Result<LabelScheme, CliError> {
    LabelScheme::parse(name)
        .ok_or_else(|| CliError::User(format!("unknown scheme {name:?} (ternary|six)")))
}

pub fn ingest(
    audio_dir: Option<&Path>,
    diagnoses: Option<&Path>,
    scheme_flag: Option<&str>,
    out: &Path,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let config = RunConfig::load(config)?;
    let scheme = match scheme_flag {
        Some(s) => parse_scheme(s)?,
        None => config.scheme()?,
    };
    let audio_dir = audio_dir
        .or(config.paths.audio_dir.as_deref())
        .ok_or_else(|| CliError::User("no audio directory: pass --audio-dir or set [paths].audio_dir".to_string()))?;
    let diagnoses = diagnoses
        .or(config.paths.diagnoses.as_deref())
        .ok_or_else(|| CliError::User("no diagnosis table: pass --diagnoses or set [paths].diagnoses".to_string()))?;
    if !audio_dir.is_dir() {
        return Err(CliError::User(format!(
            "audio directory {} does not exist",
            audio_dir.display()
        )));
    }
    let table_text = std::fs::read_to_string(diagnoses).map_err(|e| {
        CliError::User(format!("cannot read diagnosis file {}: {e}", diagnoses.display()))
    })?;
    let table = load_diagnoses(&table_text)
        .map_err(|e| CliError::Data(format!("{}: {e}", diagnoses.display())))?;
    let set = build_dataset(audio_dir, &table, scheme)
        .map_err(|e| CliError::Data(format!("{}: {e}", audio_dir.display())))?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::User(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    write_manifest(&set.manifest_rows(scheme), out)
        .map_err(|e| CliError::Data(format!("writing {}: {e}", out.display())))?;

    println!("scheme: {}", scheme.name());
    println!("{:<16} {:>6}", "class", "count");
    for (name, count) in scheme.class_names().iter().zip(set.class_counts(scheme)) {
        println!("{name:<16} {count:>6}");
    }
    println!("{:<16} {:>6}", "total", set.entries.len());
    if set.dropped > 0 {
        println!("dropped (excluded diagnoses): {}", set.dropped);
    }
    if set.entries.is_empty() {
        eprintln!("warning: no recordings found in {}", audio_dir.display());
    }
    println!("manifest: {}", out.display());
    Ok(())
}

pub struct FeaturizeArgs<'a> {
    pub manifest: &'a Path,
    pub audio_dir: Option<&'a Path>,
    pub out: Option<&'a Path>,
    pub config: Option<&'a Path>,
    pub sample_rate: Option<u32>,
    pub window: Option<usize>,
    pub hop: Option<usize>,
    pub n_mels: Option<usize>,
    pub fmin: Option<f64>,
    pub fmax: Option<f64>,
}

pub fn featurize(args: FeaturizeArgs<'_>) -> Result<(), CliError> {
    let config = RunConfig::load(args.config)?;
    let mut mel = config.melspec.to_mel_config();
    if let Some(v) = args.sample_rate {
        mel.target_sample_rate = v;
    }
    if let Some(v) = args.window {
        mel.window_size = v;
    }
    if let Some(v) = args.hop {
        mel.hop = v;
    }
    if let Some(v) = args.n_mels {
        mel.n_mels = v;
    }
    if let Some(v) = args.fmin {
        mel.fmin = v;
    }
    if let Some(v) = args.fmax {
        mel.fmax = v;
    }
    mel.validate()
        .map_err(|e| CliError::User(format!("mel configuration: {e}")))?;
    let audio_dir = args
        .audio_dir
        .or(config.paths.audio_dir.as_deref())
        .ok_or_else(|| CliError::User("no audio directory: pass --audio-dir or set [paths].audio_dir".to_string()))?;
    let out = match (args.out, &config.paths.work_dir) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(w)) => w.join("features"),
        (None, None) => {
            return Err(CliError::User(
                "no output directory: pass --out or set [paths].work_dir".to_string(),
            ))
        }
    };
    let out = out.as_path();

    let rows = read_manifest(args.manifest).map_err(|e| {
        CliError::User(format!("cannot read manifest {}: {e}", args.manifest.display()))
    })?;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::User(format!("cannot create {}: {e}", out.display())))?;

    // First pass: featurize everything, keeping failures for the exit code.
    let mut specs: Vec<(usize, MelSpectrogram)> = Vec::new();
    let mut failures: Vec<(String, String)> = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let path = audio_dir.join(format!("{}.wav", row.source_id));
        let result = std::fs::read(&path)
            .map_err(|e| format!("{}: {e}", path.display()))
            .and_then(|bytes| {
                parse_wav(&bytes).map_err(|e| format!("{}: {e}", path.display()))
            })
            .and_then(|mut clip| {
                clip.source_id = row.source_id.clone();
                mel_spectrogram(&clip, &mel).map_err(|e| e.to_string())
            });
        match result {
            Ok(spec) => specs.push((i, spec)),
            Err(message) => failures.push((row.source_id.clone(), message)),
        }
    }
    if specs.is_empty() {
        for (id, msg) in &failures {
            eprintln!("failed {id}: {msg}");
        }
        return Err(CliError::Data("no recording could be featurized".to_string()));
    }

    // Second pass: resize to the mean width, normalize, write.
    let only: Vec<MelSpectrogram> = specs.iter().map(|(_, s)| s.clone()).collect();
    let target = mean_columns(&only).map_err(|e| CliError::Internal(e.to_string()))?;
    println!("target width: {target} columns ({} recordings)", specs.len());
    let mut kept_rows = Vec::with_capacity(specs.len());
    for (i, spec) in &specs {
        let resized = minmax_normalize(&resize_columns(spec, target));
        let path = out.join(format!("{}.msp", rows[*i].source_id));
        write_spec(&resized, &path)
            .map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))?;
        kept_rows.push(rows[*i].clone());
    }
    write_manifest(&kept_rows, &out.join("manifest.csv"))
        .map_err(|e| CliError::Data(format!("writing manifest: {e}")))?;
    println!("featurized {} recordings into {}", kept_rows.len(), out.display());

    if !failures.is_empty() {
        for (id, msg) in &failures {
            eprintln!("failed {id}: {msg}");
        }
        return Err(CliError::Data(format!(
            "{} of {} recordings failed",
            failures.len(),
            rows.len()
        )));
    }
    Ok(())
}

pub struct ExperimentArgs<'a> {
    pub features: Option<&'a Path>,
    pub out: Option<&'a Path>,
    pub config: Option<&'a Path>,
    pub method: Option<String>,
    pub scheme: Option<String>,
    pub protocol: Option<String>,
    pub seed: Option<u64>,
    pub folds: Option<usize>,
    pub jobs: Option<usize>,
}

pub fn experiment(args: ExperimentArgs<'_>) -> Result<(), CliError> {
    let mut file_config = RunConfig::load(args.config)?;
    // Flags override file values.
    if let Some(m) = &args.method {
        file_config.balance.method = m.clone();
    }
    if let Some(p) = &args.protocol {
        file_config.evaluate.protocol = p.clone();
    }
    if let Some(s) = args.seed {
        file_config.run.seed = s;
    }
    if let Some(f) = args.folds {
        file_config.evaluate.folds = f;
    }
    if let Some(j) = args.jobs {
        file_config.run.jobs = j;
    }
    let experiment_config = file_config.experiment_config()?;

    let features = match (args.features, &file_config.paths.work_dir) {
        (Some(f), _) => f.to_path_buf(),
        (None, Some(w)) => w.join("features"),
        (None, None) => {
            return Err(CliError::User(
                "no features directory: pass --features or set [paths].work_dir".to_string(),
            ))
        }
    };
    let out = match (args.out, &file_config.paths.work_dir) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(w)) => w.join("results"),
        (None, None) => {
            return Err(CliError::User(
                "no output directory: pass --out or set [paths].work_dir".to_string(),
            ))
        }
    };
    let manifest = features.join("manifest.csv");
    let dataset = load_features(&manifest, &features)
        .map_err(|e| CliError::Data(format!("{}: {e}", features.display())))?;
    if let Some(expected) = &args.scheme {
        let expected = parse_scheme(expected)?;
        if expected != dataset.scheme {
            return Err(CliError::User(format!(
                "manifest carries scheme {}, but --scheme {} was requested",
                dataset.scheme.name(),
                expected.name()
            )));
        }
    }

    let result = run_experiment(&dataset, &experiment_config)
        .map_err(|e| CliError::Data(e.to_string()))?;

    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::User(format!("cannot create {}: {e}", out.display())))?;
    let stem = format!("{}-{}", result.configuration, result.scheme);
    let result_path = out.join(format!("result-{stem}.json"));
    let json = result.to_json().map_err(|e| CliError::Internal(e.to_string()))?;
    std::fs::write(&result_path, &json)
        .map_err(|e| CliError::Data(format!("writing {}: {e}", result_path.display())))?;
    for (i, cm) in result.confusions.iter().enumerate() {
        let path = out.join(format!("confusion-{stem}-fold{i:02}.csv"));
        std::fs::write(&path, cm.to_grid_csv())
            .map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))?;
    }

    print_fold_table(&result);
    println!("result: {}", result_path.display());
    Ok(())
}

fn print_fold_table(result: &ExperimentResult) {
    println!(
        "configuration: {} / scheme: {} / protocol: {} / seed: {}",
        result.configuration, result.scheme, result.protocol, result.seed
    );
    print!("{:<12}", "");
    for i in 1..=result.folds.len() {
        print!(" {i:>8}");
    }
    println!(" {:>8} {:>8}", "Mean", "Std");
    let rows: [(&str, fn(&MetricsReport) -> f64); 6] = [
        ("Sensitivity", |m| m.sensitivity),
        ("Specificity", |m| m.specificity),
        ("Score", |m| m.score),
        ("Precision", |m| m.precision),
        ("Recall", |m| m.recall),
        ("FScore", |m| m.fscore),
    ];
    for (name, get) in rows {
        print!("{name:<12}");
        for fold in &result.folds {
            print!(" {:>8.6}", get(fold));
        }
        println!(" {:>8.6} {:>8.6}", get(&result.mean), get(&result.std));
    }
}

pub fn report(results_dir: &Path) -> Result<(), CliError> {
    let mut results: Vec<ExperimentResult> = Vec::new();
    let entries = std::fs::read_dir(results_dir).map_err(|e| {
        CliError::User(format!("cannot read {}: {e}", results_dir.display()))
    })?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for path in &paths {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if let Ok(result) = ExperimentResult::from_json(&text) {
            results.push(result);
        }
    }
    if results.is_empty() {
        return Err(CliError::User(format!(
            "no experiment results found in {}",
            results_dir.display()
        )));
    }

    // Ternary first, then six-class; stable configuration order within.
    results.sort_by(|a, b| {
        let rank = |s: &str| if s == "ternary" { 0 } else { 1 };
        rank(&a.scheme)
            .cmp(&rank(&b.scheme))
            .then_with(|| a.configuration.cmp(&b.configuration))
    });

    println!(
        "{:<12} {:<11} {:<9} {:>11} {:>11} {:>8} {:>10} {:>8} {:>8}",
        "scheme", "config", "protocol", "Sensitivity", "Specificity", "Score", "Precision", "Recall", "F-Score"
    );
    for r in &results {
        println!(
            "{:<12} {:<11} {:<9} {:>11.3} {:>11.3} {:>8.3} {:>10.3} {:>8.3} {:>8.3}",
            r.scheme,
            r.configuration,
            r.protocol,
            r.mean.sensitivity,
            r.mean.specificity,
            r.mean.score,
            r.mean.precision,
            r.mean.recall,
            r.mean.fscore
        );
    }
    println!();
    println!("csv:");
    println!("scheme,configuration,protocol,sensitivity,specificity,score,precision,recall,fscore");
    for r in &results {
        println!(
            "{},{},{},{},{},{},{},{},{}",
            r.scheme,
            r.configuration,
            r.protocol,
            r.mean.sensitivity,
            r.mean.specificity,
            r.mean.score,
            r.mean.precision,
            r.mean.recall,
            r.mean.fscore
        );
    }
    Ok(())
}
