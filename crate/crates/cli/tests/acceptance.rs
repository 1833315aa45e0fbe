//! Acceptance suite. One test per criterion; each prints a PASS line with
//! its measured numbers. Oracles here are written independently of the
//! library paths they check.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use auscult_core::balance::{
    adasyn, apply_plan, smote, BalanceMethod, OversamplePlan, TERNARY_PAPER_TARGETS,
};
use auscult_core::cnn::build_cnn;
use auscult_core::dataset::{write_features, LabeledDataset, LabeledSample};
use auscult_core::eval::{confusion, metrics_for_scheme, resolve_targets, TargetPolicy};
use auscult_core::ingest::LabelScheme;
use auscult_core::melspec::{
    filter_centers_hz, hz_to_mel, mean_columns, mel_filterbank, mel_spectrogram, mel_to_hz,
    minmax_normalize, resize_columns, MelConfig, MelSpectrogram,
};
use auscult_core::tensor::tape::RunningStats;
use auscult_core::tensor::{BatchNormMode, Padding, StreamRng, Tape, Tensor, TensorId};
use auscult_core::vae::{kl_to_standard_normal, train_vae, VaeModel, VaeTrainConfig};

/// The criteria carry wall-clock budgets, so they must not compete for
/// cores inside one test process; each takes this gate while it runs.
fn gate() -> MutexGuard<'static, ()> {
    static GATE: OnceLock<Mutex<()>> = OnceLock::new();
    GATE.get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|poison| poison.into_inner())
}

// ---------------------------------------------------------------------
// Criterion 1: the published shape chain, exactly.
// ---------------------------------------------------------------------

#[test]
fn criterion_1_shape_chain() {
    let _serial = gate();
    let start = Instant::now();
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::zeros(&[1, 128, 926, 1]), false);
    let k = tape.leaf(Tensor::zeros(&[3, 3, 1, 10]), false);
    let b = tape.leaf(Tensor::zeros(&[10]), false);
    let conv = tape.conv2d(x, k, b, 1, Padding::Valid).unwrap();
    assert_eq!(tape.shape(conv), &[1, 126, 924, 10]);
    let gamma = tape.leaf(Tensor::filled(&[10], 1.0), false);
    let beta = tape.leaf(Tensor::zeros(&[10]), false);
    let mut stats = RunningStats::new(10, 0.9, 1e-5);
    let bn = tape
        .batchnorm2d(conv, gamma, beta, &mut stats, BatchNormMode::Train)
        .unwrap();
    assert_eq!(tape.shape(bn), &[1, 126, 924, 10]);
    let relu = tape.relu(bn);
    assert_eq!(tape.shape(relu), &[1, 126, 924, 10]);
    let rng = StreamRng::new(0);
    let mut drop_stream = rng.stream("dropout");
    let dropped = tape
        .dropout(relu, 0.5, &mut drop_stream, BatchNormMode::Train)
        .unwrap();
    assert_eq!(tape.shape(dropped), &[1, 126, 924, 10]);
    let pooled = tape.maxpool2d(dropped, 5).unwrap();
    assert_eq!(tape.shape(pooled), &[1, 25, 184, 10]);
    let flat = tape.flatten(pooled);
    assert_eq!(tape.shape(flat), &[1, 46000]);
    let w1 = tape.leaf(Tensor::zeros(&[46000, 100]), false);
    let b1 = tape.leaf(Tensor::zeros(&[100]), false);
    let hidden = tape.dense(flat, w1, b1).unwrap();
    assert_eq!(tape.shape(hidden), &[1, 100]);
    for n_classes in [3usize, 6] {
        let w2 = tape.leaf(Tensor::zeros(&[100, n_classes]), false);
        let b2 = tape.leaf(Tensor::zeros(&[n_classes]), false);
        let logits = tape.dense(hidden, w2, b2).unwrap();
        assert_eq!(tape.shape(logits), &[1, n_classes]);
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(1), "{elapsed:?}");
    println!("PASS criterion 1: shape chain 128x926 -> 126x924x10 -> 25x184x10 -> 46000 -> 100 -> K in {elapsed:?}");
}

// ---------------------------------------------------------------------
// Criterion 2: finite-difference gradient suite at f64.
// ---------------------------------------------------------------------

const FD_H: f64 = 1e-6;
const FD_TOL: f64 = 1e-6;
/// Instances whose ReLU inputs come closer to the kink than this are
/// re-drawn: a central difference straddling the kink measures the mean
/// of two slopes, not the derivative, so it is no oracle there.
const FD_KINK_MARGIN: f64 = 2e-5;

/// Central-difference check; relative error floors its denominator at 1.
/// Returns `None` when the instance lands too close to a ReLU kink.
fn fd_max_rel_err(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
) -> Option<f64> {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids);
    if tape.min_abs_relu_input().is_some_and(|m| m < FD_KINK_MARGIN) {
        return None;
    }
    let mut grads = tape.backward(loss).unwrap();
    let analytic: Vec<Option<Tensor<f64>>> = ids.iter().map(|&id| grads.take(id)).collect();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).item()
    };

    let mut worst = 0f64;
    for (which, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[which].values_mut()[i] += FD_H;
            let mut minus = inputs.to_vec();
            minus[which].values_mut()[i] -= FD_H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
            let a = analytic[which]
                .as_ref()
                .map_or(0.0, |g| g.values()[i]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    Some(worst)
}

fn fd_random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let rng = StreamRng::new(seed);
    let mut s = rng.stream("fd");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| s.uniform_in(lo, hi)).collect())
}

/// Project an arbitrary output to a scalar with fixed random weights.
fn fd_project(tape: &mut Tape<f64>, out: TensorId, seed: u64) -> TensorId {
    let n = tape.value(out).len();
    let rng = StreamRng::new(seed ^ 0x51AB);
    let mut s = rng.stream("proj");
    let w: Vec<f64> = (0..n).map(|_| s.uniform_in(-1.0, 1.0)).collect();
    let flat = tape.reshape(out, &[1, n]);
    let weight = tape.leaf(Tensor::new(&[n, 1], w), false);
    let bias = tape.leaf(Tensor::zeros(&[1]), false);
    let y = tape.dense(flat, weight, bias).unwrap();
    tape.reshape(y, &[1])
}

#[test]
fn criterion_2_gradient_suite() {
    let _serial = gate();
    let start = Instant::now();
    let mut worst_by_op: Vec<(&str, f64)> = Vec::new();
    let mut check = |name: &'static str, case: &dyn Fn(u64) -> Option<f64>| {
        let mut worst = 0f64;
        for base in 0..10u64 {
            // Re-draw kink-adjacent instances at an offset seed.
            let mut seed = base;
            let err = loop {
                match case(seed) {
                    Some(err) => break err,
                    None => {
                        seed += 1000;
                        assert!(seed < base + 50_000, "{name}: no kink-free instance");
                    }
                }
            };
            worst = worst.max(err);
        }
        assert!(worst < FD_TOL, "{name}: max relative error {worst:.3e}");
        worst_by_op.push((name, worst));
    };

    check("conv2d", &|seed| {
        let x = fd_random(&[2, 5, 6, 2], seed, -1.0, 1.0);
        let k = fd_random(&[3, 3, 2, 3], seed + 100, -0.5, 0.5);
        let b = fd_random(&[3], seed + 200, -0.5, 0.5);
        fd_max_rel_err(&[x, k, b], &move |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], ids[2], 1, Padding::Valid).unwrap();
            fd_project(tape, y, seed)
        })
    });
    check("batchnorm-train", &|seed| {
        let x = fd_random(&[3, 4, 2, 2], seed, -2.0, 2.0);
        let g = fd_random(&[2], seed + 100, 0.5, 1.5);
        let b = fd_random(&[2], seed + 200, -0.5, 0.5);
        fd_max_rel_err(&[x, g, b], &move |tape, ids| {
            let mut stats = RunningStats::new(2, 0.9, 1e-5);
            let y = tape
                .batchnorm2d(ids[0], ids[1], ids[2], &mut stats, BatchNormMode::Train)
                .unwrap();
            fd_project(tape, y, seed)
        })
    });
    check("dense", &|seed| {
        let x = fd_random(&[3, 5], seed, -1.0, 1.0);
        let w = fd_random(&[5, 4], seed + 100, -0.5, 0.5);
        let b = fd_random(&[4], seed + 200, -0.5, 0.5);
        fd_max_rel_err(&[x, w, b], &move |tape, ids| {
            let y = tape.dense(ids[0], ids[1], ids[2]).unwrap();
            fd_project(tape, y, seed)
        })
    });
    check("maxpool", &|seed| {
        let x = fd_random(&[2, 6, 4, 2], seed, -1.0, 1.0);
        fd_max_rel_err(&[x], &move |tape, ids| {
            let y = tape.maxpool2d(ids[0], 2).unwrap();
            fd_project(tape, y, seed)
        })
    });
    check("relu", &|seed| {
        let x = fd_random(&[4, 6], seed, -1.0, 1.0);
        fd_max_rel_err(&[x], &move |tape, ids| {
            let y = tape.relu(ids[0]);
            fd_project(tape, y, seed)
        })
    });
    check("softmax-crossentropy", &|seed| {
        let logits = fd_random(&[4, 3], seed, -2.0, 2.0);
        let rng = StreamRng::new(seed + 31);
        let mut pick = rng.stream("labels");
        let mut hot = vec![0.0f64; 12];
        let mut w = vec![0.0f64; 4];
        for row in 0..4 {
            hot[row * 3 + pick.index(3)] = 1.0;
            w[row] = pick.uniform_in(0.2, 2.0);
        }
        let one_hot = Tensor::new(&[4, 3], hot);
        let weights = Tensor::new(&[4], w);
        fd_max_rel_err(&[logits], &move |tape, ids| {
            tape.softmax_cross_entropy(ids[0], &one_hot, &weights).unwrap()
        })
    });
    check("sse", &|seed| {
        let x = fd_random(&[3, 4], seed, -1.0, 1.0);
        let r = fd_random(&[3, 4], seed + 100, -1.0, 1.0);
        fd_max_rel_err(&[x, r], &|tape, ids| tape.sse(ids[0], ids[1]).unwrap())
    });
    check("full-cnn", &|seed| {
        let rng = StreamRng::new(seed + 1000);
        let model = build_cnn::<f64>(3, (8, 12), &rng).unwrap().with_dropout(0.3);
        let mut inputs = vec![fd_random(&[2, 8, 12, 1], seed, 0.0, 1.0)];
        inputs.extend(model.params().iter().cloned());
        let one_hot = Tensor::new(&[2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let weights = Tensor::new(&[2], vec![1.0, 0.7]);
        fd_max_rel_err(&inputs, &move |tape, ids| {
            let mut bn = model.bn.clone();
            let drop_rng = StreamRng::new(seed + 2000);
            let mut drop = drop_rng.stream("dropout");
            let logits = model
                .forward_ids(tape, &ids[1..], ids[0], &mut bn, BatchNormMode::Train, &mut drop)
                .unwrap();
            tape.softmax_cross_entropy(logits, &one_hot, &weights).unwrap()
        })
    });
    check("full-vae", &|seed| {
        let rng = StreamRng::new(seed + 3000);
        let mut init = rng.stream("init");
        let model = VaeModel::<f64>::new((8, 12), 3, 6, &mut init).unwrap();
        let mut inputs = vec![fd_random(&[1, 8, 12, 1], seed, 0.0, 1.0)];
        inputs.extend(model.params().iter().cloned());
        let noise_rng = StreamRng::new(seed + 4000);
        let mut ns = noise_rng.stream("vae-noise");
        let noise: Vec<f64> = (0..3).map(|_| ns.normal()).collect();
        fd_max_rel_err(&inputs, &move |tape, ids| {
            let mut bn1 = model.bn1.clone();
            let mut bn2 = model.bn2.clone();
            let fwd = model
                .forward_ids(
                    tape,
                    &ids[1..],
                    ids[0],
                    &mut bn1,
                    &mut bn2,
                    BatchNormMode::Train,
                    noise.clone(),
                )
                .unwrap();
            let sse = tape.sse(ids[0], fwd.recon).unwrap();
            let kl = tape.kl_std_normal(fwd.mu, fwd.logvar).unwrap();
            tape.add(sse, kl).unwrap()
        })
    });

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "{elapsed:?}");
    let summary: Vec<String> = worst_by_op
        .iter()
        .map(|(n, e)| format!("{n}={e:.1e}"))
        .collect();
    println!(
        "PASS criterion 2: gradient suite ({}) in {elapsed:?}",
        summary.join(", ")
    );
}

// ---------------------------------------------------------------------
// Criterion 3: Mel scale and filterbank math.
// ---------------------------------------------------------------------

#[test]
fn criterion_3_mel_math() {
    let _serial = gate();
    let start = Instant::now();
    assert_eq!(hz_to_mel(0.0).unwrap(), 0.0);
    let m1000 = hz_to_mel(1000.0).unwrap();
    assert!((m1000 - 1000.0).abs() < 0.1, "hz_to_mel(1000) = {m1000}");

    let config = MelConfig::default();
    let centers = filter_centers_hz(&config).unwrap();
    let mels: Vec<f64> = centers.iter().map(|&f| hz_to_mel(f).unwrap()).collect();
    let step = mels[1] - mels[0];
    for w in mels.windows(2) {
        let d = w[1] - w[0];
        assert!(((d - step) / step).abs() < 1e-9, "spacing {d} vs {step}");
    }

    // A 440 Hz sine's columns peak inside a Mel filter whose triangular
    // support contains 440 Hz.
    let rate = 22_050u32;
    let samples: Vec<f32> = (0..rate as usize)
        .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / f64::from(rate)).sin() as f32)
        .collect();
    let clip = auscult_core::ingest::AudioClip {
        samples,
        sample_rate: rate,
        source_id: "sine".to_string(),
    };
    let spec = mel_spectrogram(&clip, &config).unwrap();
    // Triangle m spans mel edge points [m, m+2].
    let mel_lo = hz_to_mel(config.fmin).unwrap();
    let mel_hi = hz_to_mel(config.fmax).unwrap();
    let edge = |i: usize| {
        mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (config.n_mels + 1) as f64)
    };
    for t in 0..spec.cols() {
        let mut best = (0usize, f32::MIN);
        for m in 0..spec.rows() {
            if spec.at(m, t) > best.1 {
                best = (m, spec.at(m, t));
            }
        }
        let (lo, hi) = (edge(best.0), edge(best.0 + 2));
        assert!(
            lo <= 440.0 && 440.0 <= hi,
            "column {t}: argmax filter {} spans {lo:.1}..{hi:.1} Hz",
            best.0
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(5), "{elapsed:?}");
    println!("PASS criterion 3: mel math (hz_to_mel(1000)={m1000:.4}, 440 Hz localized) in {elapsed:?}");
}

// ---------------------------------------------------------------------
// Criterion 4: KL closed form versus numerical quadrature.
// ---------------------------------------------------------------------

/// Simpson quadrature of `-int p ln q + int p ln p` for scalar Gaussians.
fn kl_quadrature(mu: f64, logvar: f64) -> f64 {
    let sigma = (logvar / 2.0).exp();
    let (lo, hi) = (mu - 15.0 * sigma, mu + 15.0 * sigma);
    let n = 40_000usize;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| {
        let ln_p = -0.5 * (2.0 * std::f64::consts::PI).ln()
            - sigma.ln()
            - (x - mu) * (x - mu) / (2.0 * sigma * sigma);
        let ln_q = -0.5 * (2.0 * std::f64::consts::PI).ln() - x * x / 2.0;
        ln_p.exp() * (ln_p - ln_q)
    };
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
    }
    acc * h / 3.0
}

#[test]
fn criterion_4_kl_oracle() {
    let _serial = gate();
    let start = Instant::now();
    assert_eq!(kl_to_standard_normal(&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]), 0.0);
    let rng = StreamRng::new(404);
    let mut s = rng.stream("kl");
    let mut worst = 0f64;
    for _ in 0..10 {
        let dims = 1 + s.index(4);
        let mu: Vec<f64> = (0..dims).map(|_| s.uniform_in(-2.0, 2.0)).collect();
        let lv: Vec<f64> = (0..dims).map(|_| s.uniform_in(-1.5, 1.5)).collect();
        let closed = kl_to_standard_normal(&mu, &lv);
        let numeric: f64 = mu.iter().zip(&lv).map(|(&m, &v)| kl_quadrature(m, v)).sum();
        let err = (closed - numeric).abs();
        assert!(err < 1e-6, "closed {closed} vs quadrature {numeric}");
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(5), "{elapsed:?}");
    println!("PASS criterion 4: KL closed form matches quadrature (worst {worst:.2e}) in {elapsed:?}");
}

// ---------------------------------------------------------------------
// Criterion 5: oversampler properties.
// ---------------------------------------------------------------------

fn standin_dataset(counts: &[usize], rows: usize, cols: usize, seed: u64) -> LabeledDataset {
    let rng = StreamRng::new(seed);
    let mut s = rng.stream("standin");
    let scheme = if counts.len() == 3 {
        LabelScheme::Ternary
    } else {
        LabelScheme::SixClass
    };
    let mut ds = LabeledDataset::new(scheme);
    for (class, &n) in counts.iter().enumerate() {
        for i in 0..n {
            ds.samples.push(LabeledSample {
                source_id: format!("c{class}-{i}"),
                patient_id: Some((class * 10_000 + i) as u32),
                label: class,
                spec: MelSpectrogram::new(
                    rows,
                    cols,
                    (0..rows * cols).map(|_| s.uniform() as f32).collect(),
                    true,
                ),
                synthetic: false,
                parents: Vec::new(),
            });
        }
    }
    ds
}

#[test]
fn criterion_5_oversampler_properties() {
    let _serial = gate();
    let start = Instant::now();
    let rng = StreamRng::new(505);

    // Replay every synthetic from its recorded parents.
    let mut gen = rng.stream("rows");
    let minority: Vec<Vec<f32>> = (0..40)
        .map(|_| (0..12).map(|_| gen.uniform() as f32).collect())
        .collect();
    let non_minority: Vec<Vec<f32>> = (0..60)
        .map(|_| (0..12).map(|_| gen.uniform_in(2.0, 3.0) as f32).collect())
        .collect();
    let mut s1 = rng.stream("smote");
    let smote_out = smote(&minority, 120, 5, &mut s1).unwrap();
    let mut s2 = rng.stream("adasyn");
    let adasyn_out = adasyn(&minority, &non_minority, 77, 5, &mut s2).unwrap();
    assert_eq!(adasyn_out.len(), 77, "ADASYN allocations must sum to n_new");
    for synth in smote_out.iter().chain(&adasyn_out) {
        for d in 0..12 {
            let base = f64::from(minority[synth.base][d]);
            let nb = f64::from(minority[synth.neighbor][d]);
            let expect = base + synth.lambda * (nb - base);
            assert!(
                (f64::from(synth.row[d]) - expect).abs() < 1e-6,
                "replay mismatch at dim {d}"
            );
        }
    }

    // apply_plan hits the published targets exactly on published counts,
    // through both the interpolating and the generative method.
    let ds = standin_dataset(&[810, 75, 35], 4, 6, 7);
    let plan = OversamplePlan::new(BalanceMethod::Smote, TERNARY_PAPER_TARGETS.to_vec(), 5, 11);
    let out = apply_plan(&ds, &plan, &VaeTrainConfig::default()).unwrap();
    assert_eq!(out.class_counts(), vec![810, 900, 840]);

    let ds_vae = standin_dataset(&[810, 75, 35], 8, 8, 8);
    let vae_config = VaeTrainConfig {
        epochs: 1,
        batch_size: 16,
        latent_dim: 2,
        hidden_dim: 8,
        ..VaeTrainConfig::default()
    };
    let plan = OversamplePlan::new(BalanceMethod::Vae, TERNARY_PAPER_TARGETS.to_vec(), 5, 12);
    let out_vae = apply_plan(&ds_vae, &plan, &vae_config).unwrap();
    assert_eq!(out_vae.class_counts(), vec![810, 900, 840]);

    // Six-class paper targets resolve to the documented 4874 total.
    let six = resolve_targets(
        &TargetPolicy::Paper,
        LabelScheme::SixClass,
        &[793, 37, 35, 23, 16, 13],
    )
    .unwrap();
    assert_eq!(six.iter().sum::<usize>(), 4874);

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(30), "{elapsed:?}");
    println!("PASS criterion 5: oversampler replay + targets (810/900/840, six-class 4874) in {elapsed:?}");
}

// ---------------------------------------------------------------------
// Criterion 6: metrics against a per-sample tally oracle.
// ---------------------------------------------------------------------

#[test]
fn criterion_6_metrics_oracle() {
    let _serial = gate();
    let start = Instant::now();
    let rng = StreamRng::new(606);
    let mut s = rng.stream("tally");
    for case in 0..100 {
        let k = if case % 2 == 0 { 3 } else { 6 };
        let scheme = if k == 3 {
            LabelScheme::Ternary
        } else {
            LabelScheme::SixClass
        };
        let n = 4 + s.index(80);
        let preds: Vec<usize> = (0..n).map(|_| s.index(k)).collect();
        let truths: Vec<usize> = (0..n).map(|_| s.index(k)).collect();
        let cm = confusion(&preds, &truths, k).unwrap();
        let m = metrics_for_scheme(&cm, scheme).unwrap();

        // Oracle: direct per-sample tally, healthy class index 2.
        let healthy = 2usize;
        let count = |f: &dyn Fn(usize, usize) -> bool| {
            preds.iter().zip(&truths).filter(|&(&p, &t)| f(p, t)).count() as f64
        };
        let disease_total = count(&|_, t| t != healthy);
        let disease_correct = count(&|p, t| t != healthy && p == t);
        let healthy_total = count(&|_, t| t == healthy);
        let healthy_correct = count(&|p, t| t == healthy && p == healthy);
        let predicted_healthy = count(&|p, _| p == healthy);
        let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        let sens = div(disease_correct, disease_total);
        let spec = div(healthy_correct, healthy_total);
        let prec = div(healthy_correct, predicted_healthy);
        assert_eq!(m.sensitivity, sens, "case {case}");
        assert_eq!(m.specificity, spec, "case {case}");
        assert_eq!(m.precision, prec, "case {case}");
        assert_eq!(m.score, (sens + spec) / 2.0, "case {case}");
        assert_eq!(m.recall, m.specificity, "case {case}");
        let f = if prec + spec == 0.0 { 0.0 } else { 2.0 * prec * spec / (prec + spec) };
        assert_eq!(m.fscore, f, "case {case}");
    }

    // The worked 3x3 example reproduces exactly.
    let preds = [vec![0; 9], vec![1], vec![0], vec![1; 8], vec![2], vec![0], vec![2; 4]].concat();
    let truths = [vec![0; 10], vec![1; 10], vec![2; 5]].concat();
    let cm = confusion(&preds, &truths, 3).unwrap();
    let m = metrics_for_scheme(&cm, LabelScheme::Ternary).unwrap();
    assert_eq!(m.sensitivity, 0.85);
    assert_eq!(m.specificity, 0.8);
    assert!((m.score - 0.825).abs() < 1e-15);

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "{elapsed:?}");
    println!("PASS criterion 6: metrics match the tally oracle on 100 random sets in {elapsed:?}");
}

// ---------------------------------------------------------------------
// Criteria 7 and 8: end-to-end desk run, determinism, --jobs equality.
// ---------------------------------------------------------------------

/// 60 separable 32x64 samples in three classes (30/20/10): a bright band
/// whose vertical position encodes the class, plus noise. Values start in
/// a dB-like range and go through the same resize + min-max normalization
/// as featurized audio.
fn toy_corpus() -> LabeledDataset {
    let rng = StreamRng::new(7070);
    let mut s = rng.stream("toy");
    let mut ds = LabeledDataset::new(LabelScheme::Ternary);
    let counts = [30usize, 20, 10];
    let mut raw: Vec<(usize, MelSpectrogram)> = Vec::new();
    for (class, &n) in counts.iter().enumerate() {
        for i in 0..n {
            let mut values = vec![0f32; 32 * 64];
            for v in values.iter_mut() {
                *v = s.uniform_in(-80.0, -68.0) as f32;
            }
            for r in class * 10..class * 10 + 8 {
                for c in 0..64 {
                    values[r * 64 + c] = s.uniform_in(-12.0, 0.0) as f32;
                }
            }
            raw.push((class, MelSpectrogram::new(32, 64, values, false)));
            let _ = i;
        }
    }
    let specs: Vec<MelSpectrogram> = raw.iter().map(|(_, m)| m.clone()).collect();
    let target = mean_columns(&specs).unwrap();
    for (i, (class, spec)) in raw.into_iter().enumerate() {
        let normalized = minmax_normalize(&resize_columns(&spec, target));
        ds.samples.push(LabeledSample {
            source_id: format!("toy-{class}-{i}"),
            patient_id: Some(i as u32),
            label: class,
            spec: normalized,
            synthetic: false,
            parents: Vec::new(),
        });
    }
    ds
}

const TOY_CONFIG: &str = r#"
[balance]
method = "vae"
k_neighbors = 5
targets = [30, 20, 30]

[vae]
epochs = 30
batch_size = 8
lr = 0.001
latent_dim = 8
hidden_dim = 32
kl_weight = 1.0

[train]
epochs = 25
batch_size = 8
lr = 0.001
patience = 0
dropout = 0.3

[evaluate]
folds = 5
validation_fraction = 0.1

[run]
seed = 42
jobs = 1
"#;

struct E2eBase {
    dir: tempfile::TempDir,
    features: PathBuf,
    config: PathBuf,
    out: PathBuf,
    elapsed: Duration,
}

fn run_experiment_binary(features: &Path, config: &Path, out: &Path, jobs: usize) {
    let status = Command::new(env!("CARGO_BIN_EXE_auscult"))
        .args([
            "experiment",
            "--features",
            features.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--jobs",
            &jobs.to_string(),
        ])
        .status()
        .expect("binary runs");
    assert!(status.success(), "experiment run failed");
}

fn e2e_base() -> &'static E2eBase {
    static BASE: OnceLock<E2eBase> = OnceLock::new();
    BASE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let features = dir.path().join("features");
        write_features(&toy_corpus(), &features).unwrap();
        let config = dir.path().join("toy.toml");
        std::fs::write(&config, TOY_CONFIG).unwrap();
        let out = dir.path().join("out-base");
        let start = Instant::now();
        run_experiment_binary(&features, &config, &out, 1);
        let elapsed = start.elapsed();
        E2eBase {
            dir,
            features,
            config,
            out,
            elapsed,
        }
    })
}

fn read_fold_accuracies(out: &Path) -> Vec<f64> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("confusion-"))
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).unwrap();
            let mut trace = 0u64;
            let mut total = 0u64;
            for (r, line) in text.lines().enumerate() {
                for (c, cell) in line.split(',').enumerate() {
                    let v: u64 = cell.parse().unwrap();
                    total += v;
                    if r == c {
                        trace += v;
                    }
                }
            }
            trace as f64 / total as f64
        })
        .collect()
}

#[test]
fn criterion_7_end_to_end_desk_run() {
    let _serial = gate();
    let base = e2e_base();
    assert!(
        base.elapsed < Duration::from_secs(300),
        "single-threaded run took {:?}",
        base.elapsed
    );
    let accuracies = read_fold_accuracies(&base.out);
    assert_eq!(accuracies.len(), 5);
    let mean: f64 = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    assert!(mean >= 0.90, "mean CV accuracy {mean}");

    // VAE loss trend at the same desk scale: train the generator on the
    // minority class and require a non-increasing 5-epoch moving average.
    let ds = toy_corpus();
    let minority: Vec<&MelSpectrogram> = ds
        .samples
        .iter()
        .filter(|s| s.label == 2)
        .map(|s| &s.spec)
        .collect();
    let config = VaeTrainConfig {
        epochs: 30,
        batch_size: 8,
        lr: 1e-3,
        latent_dim: 8,
        hidden_dim: 32,
        kl_weight: 1.0,
        seed: 42,
    };
    let (_, history) = train_vae(&minority, &config).unwrap();
    let ma: Vec<f64> = history
        .windows(5)
        .map(|w| w.iter().map(|e| e.loss).sum::<f64>() / 5.0)
        .collect();
    for pair in ma.windows(2) {
        assert!(
            pair[1] <= pair[0] + 1e-9,
            "VAE moving average increased: {} -> {}",
            pair[0],
            pair[1]
        );
    }
    println!(
        "PASS criterion 7: toy 5-fold CV accuracy {mean:.3} in {:?}, VAE loss trend non-increasing",
        base.elapsed
    );
}

fn dir_file_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_str().unwrap().to_string(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    entries
}

#[test]
fn criterion_8_determinism() {
    let _serial = gate();
    // Criterion 5 artifacts: the same plan and seed write identical bytes.
    let ds = standin_dataset(&[12, 8, 5], 4, 6, 99);
    let plan = OversamplePlan::new(BalanceMethod::Smote, vec![12, 12, 12], 5, 3);
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    write_features(&apply_plan(&ds, &plan, &VaeTrainConfig::default()).unwrap(), &a).unwrap();
    write_features(&apply_plan(&ds, &plan, &VaeTrainConfig::default()).unwrap(), &b).unwrap();
    assert_eq!(dir_file_bytes(&a), dir_file_bytes(&b));

    // Criterion 7 rerun with the same seed: byte-identical result files.
    let base = e2e_base();
    let rerun = base.dir.path().join("out-rerun");
    run_experiment_binary(&base.features, &base.config, &rerun, 1);
    assert_eq!(
        dir_file_bytes(&base.out),
        dir_file_bytes(&rerun),
        "rerun differs from the first run"
    );

    // --jobs 4 equals --jobs 1.
    let par = base.dir.path().join("out-jobs4");
    run_experiment_binary(&base.features, &base.config, &par, 4);
    assert_eq!(
        dir_file_bytes(&base.out),
        dir_file_bytes(&par),
        "--jobs 4 differs from --jobs 1"
    );
    println!("PASS criterion 8: reruns and --jobs 4 are byte-identical");
}

// ---------------------------------------------------------------------
// Criterion 9: dataset-conditional checks on the real corpus.
// ---------------------------------------------------------------------

#[test]
fn criterion_9_dataset_conditional_counts() {
    let _serial = gate();
    let (Ok(audio_dir), Ok(diagnoses)) = (
        std::env::var("ICBHI_AUDIO_DIR"),
        std::env::var("ICBHI_DIAGNOSES"),
    ) else {
        println!(
            "PASS criterion 9: SKIPPED (set ICBHI_AUDIO_DIR and ICBHI_DIAGNOSES to run against the corpus)"
        );
        return;
    };
    let table_text = std::fs::read_to_string(&diagnoses).unwrap();
    let table = auscult_core::ingest::load_diagnoses(&table_text).unwrap();

    let ternary =
        auscult_core::ingest::build_dataset(Path::new(&audio_dir), &table, LabelScheme::Ternary)
            .unwrap();
    assert_eq!(ternary.class_counts(LabelScheme::Ternary), vec![810, 75, 35]);

    let six =
        auscult_core::ingest::build_dataset(Path::new(&audio_dir), &table, LabelScheme::SixClass)
            .unwrap();
    assert_eq!(
        six.class_counts(LabelScheme::SixClass),
        vec![793, 37, 35, 23, 16, 13]
    );
    assert_eq!(six.dropped, 3);

    let targets = resolve_targets(
        &TargetPolicy::Paper,
        LabelScheme::SixClass,
        &six.class_counts(LabelScheme::SixClass),
    )
    .unwrap();
    assert_eq!(targets.iter().sum::<usize>(), 4874);
    println!("PASS criterion 9: corpus counts 810/75/35 and 793/37/35/23/16/13 (+3 dropped), plan total 4874");
}
