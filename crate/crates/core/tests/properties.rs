//! Property tests for the pipeline's structural invariants.

use auscult_core::balance::{apply_plan, smote, BalanceMethod, OversamplePlan};
use auscult_core::dataset::{LabeledDataset, LabeledSample};
use auscult_core::eval::{confusion, kfold_split, metrics_for_scheme};
use auscult_core::ingest::LabelScheme;
use auscult_core::melspec::{
    hz_to_mel, mean_columns, minmax_normalize, read_spec_from, resize_columns, write_spec_to,
    MelSpectrogram,
};
use auscult_core::tensor::StreamRng;
use auscult_core::vae::VaeTrainConfig;
use proptest::prelude::*;

fn spec_strategy() -> impl Strategy<Value = MelSpectrogram> {
    (1usize..6, 1usize..24).prop_flat_map(|(rows, cols)| {
        proptest::collection::vec(-80.0f32..20.0, rows * cols)
            .prop_map(move |v| MelSpectrogram::new(rows, cols, v, false))
    })
}

proptest! {
    #[test]
    fn hz_to_mel_is_monotonic(a in 0.0f64..20_000.0, b in 0.0f64..20_000.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi > lo);
        prop_assert!(hz_to_mel(hi).unwrap() > hz_to_mel(lo).unwrap());
    }

    #[test]
    fn minmax_is_idempotent_and_bounded(spec in spec_strategy()) {
        let once = minmax_normalize(&spec);
        prop_assert!(once.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let twice = minmax_normalize(&once);
        prop_assert_eq!(once.values(), twice.values());
    }

    #[test]
    fn resize_preserves_row_bounds(spec in spec_strategy(), target in 1usize..40) {
        let out = resize_columns(&spec, target);
        prop_assert_eq!(out.rows(), spec.rows());
        prop_assert_eq!(out.cols(), target);
        for r in 0..spec.rows() {
            let row: Vec<f32> = (0..spec.cols()).map(|c| spec.at(r, c)).collect();
            let lo = row.iter().cloned().fold(f32::MAX, f32::min);
            let hi = row.iter().cloned().fold(f32::MIN, f32::max);
            for c in 0..target {
                prop_assert!(out.at(r, c) >= lo - 1e-5 && out.at(r, c) <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn melspec_file_round_trips(spec in spec_strategy()) {
        let mut buf = Vec::new();
        write_spec_to(&spec, &mut buf).unwrap();
        let back = read_spec_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(spec.values(), back.values());
        prop_assert_eq!((spec.rows(), spec.cols()), (back.rows(), back.cols()));
    }

    #[test]
    fn mean_columns_is_order_independent(mut cols in proptest::collection::vec(1usize..2000, 1..30)) {
        let specs: Vec<MelSpectrogram> = cols
            .iter()
            .map(|&c| MelSpectrogram::new(1, c, vec![0.0; c], false))
            .collect();
        let forward = mean_columns(&specs).unwrap();
        cols.reverse();
        let reversed: Vec<MelSpectrogram> = cols
            .iter()
            .map(|&c| MelSpectrogram::new(1, c, vec![0.0; c], false))
            .collect();
        prop_assert_eq!(forward, mean_columns(&reversed).unwrap());
        // Nearest integer to the true mean, half rounding up.
        let exact = cols.iter().sum::<usize>() as f64 / cols.len() as f64;
        prop_assert!((forward as f64 - exact).abs() <= 0.5);
    }

    #[test]
    fn folds_partition_any_dataset(n in 4usize..120, k in 2usize..8, seed in 0u64..50) {
        prop_assume!(k <= n);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let rng = StreamRng::new(seed);
        let folds = kfold_split(&labels, k, true, &mut rng.stream("split")).unwrap();
        let mut seen = vec![false; n];
        for fold in &folds {
            for &i in fold {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().all(|&v| v));
    }

    #[test]
    fn metric_identities_hold_for_random_predictions(
        n in 1usize..80,
        seed in 0u64..500,
        six in proptest::bool::ANY,
    ) {
        let k = if six { 6 } else { 3 };
        let rng = StreamRng::new(seed);
        let mut s = rng.stream("pred");
        let preds: Vec<usize> = (0..n).map(|_| s.index(k)).collect();
        let truths: Vec<usize> = (0..n).map(|_| s.index(k)).collect();
        let cm = confusion(&preds, &truths, k).unwrap();
        let scheme = if six { LabelScheme::SixClass } else { LabelScheme::Ternary };
        let m = metrics_for_scheme(&cm, scheme).unwrap();
        prop_assert_eq!(m.score, (m.sensitivity + m.specificity) / 2.0);
        prop_assert_eq!(m.recall, m.specificity);
        let expected_f = if m.precision + m.recall == 0.0 {
            0.0
        } else {
            2.0 * m.precision * m.recall / (m.precision + m.recall)
        };
        prop_assert_eq!(m.fscore, expected_f);
        for v in [m.sensitivity, m.specificity, m.score, m.precision, m.recall, m.fscore] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn smote_synthetics_interpolate_their_parents(
        seed in 0u64..100,
        n_new in 0usize..30,
        dims in 1usize..12,
    ) {
        let rng = StreamRng::new(seed);
        let mut gen = rng.stream("rows");
        let minority: Vec<Vec<f32>> = (0..8)
            .map(|_| (0..dims).map(|_| gen.uniform() as f32).collect())
            .collect();
        let mut stream = rng.stream("smote");
        let synths = smote(&minority, n_new, 3, &mut stream).unwrap();
        prop_assert_eq!(synths.len(), n_new);
        for s in &synths {
            prop_assert!((0.0..=1.0).contains(&s.lambda));
            for d in 0..dims {
                let base = f64::from(minority[s.base][d]);
                let nb = f64::from(minority[s.neighbor][d]);
                let expect = base + s.lambda * (nb - base);
                prop_assert!((f64::from(s.row[d]) - expect).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn oversampling_keeps_originals_exactly() {
    // Originals are a strict prefix of the augmented set, untouched.
    let rng = StreamRng::new(9);
    let mut s = rng.stream("toy");
    let mut ds = LabeledDataset::new(LabelScheme::Ternary);
    for class in 0..3usize {
        for i in 0..6 + class {
            ds.samples.push(LabeledSample {
                source_id: format!("c{class}-{i}"),
                patient_id: Some(i as u32),
                label: class,
                spec: MelSpectrogram::new(3, 5, (0..15).map(|_| s.uniform() as f32).collect(), true),
                synthetic: false,
                parents: Vec::new(),
            });
        }
    }
    for method in [BalanceMethod::Smote, BalanceMethod::Adasyn] {
        let plan = OversamplePlan::new(method, vec![12, 12, 12], 4, 3);
        let out = apply_plan(&ds, &plan, &VaeTrainConfig::default()).unwrap();
        assert_eq!(out.len(), 36);
        for (orig, kept) in ds.samples.iter().zip(&out.samples) {
            assert_eq!(orig.source_id, kept.source_id);
            assert_eq!(orig.spec.values(), kept.spec.values());
            assert!(!kept.synthetic);
        }
    }
}
