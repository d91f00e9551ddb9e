use std::collections::BTreeSet;

use confset::conformal::order_statistic_rank;
use confset::io::{load_model, save_model};
use confset::{
    calibrate, coverage_audit, disparity_test, filter_by_set_size, nonconformity, predict_batch, predict_set,
    sweep, weighted_kappa, CalibrationModel, PredictionSet, ScoreRecord, Weighting,
};
use proptest::prelude::*;

const GRID: u32 = 1024;

/// Alpha as an exact number of thousandths, so the rank has an integer oracle.
fn permille() -> impl Strategy<Value = u32> {
    1u32..1000
}

fn integer_rank(permille: u32, m: usize) -> usize {
    ((1000 - permille) as usize * (m + 1)).div_ceil(1000)
}

/// Nonconformity multisets with plenty of ties mixed in.
fn nc_multiset(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![0.0..=1.0f64, (0u32..=8).prop_map(|i| i as f64 / 8.0)],
        1..=max_len,
    )
}

/// A probability vector whose entries are multiples of `1 / GRID`, so that
/// `1 - p` and comparisons against it are exact.
fn grid_scores(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0..=GRID, k - 1).prop_map(move |mut cuts| {
        cuts.sort_unstable();
        let mut prev = 0;
        let mut out = Vec::with_capacity(k);
        for c in cuts.into_iter().chain([GRID]) {
            out.push((c - prev) as f64 / GRID as f64);
            prev = c;
        }
        out
    })
}

fn grid_records(k: usize, max_len: usize) -> impl Strategy<Value = Vec<ScoreRecord>> {
    prop::collection::vec((grid_scores(k), 0..k), 1..=max_len).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (scores, y))| ScoreRecord::new(format!("r{i}"), Some(y), scores))
            .collect()
    })
}

/// Random sets paired with labelled records carrying matching ids.
fn sets_and_records() -> impl Strategy<Value = (usize, Vec<PredictionSet>, Vec<ScoreRecord>)> {
    (2usize..=6).prop_flat_map(|k| {
        let row = (prop::collection::btree_set(0..k, 0..=k), 0..k, grid_scores(k));
        (Just(k), prop::collection::vec(row, 1..60)).prop_map(|(k, rows)| {
            let mut sets = Vec::new();
            let mut records = Vec::new();
            for (i, (classes, y, scores)) in rows.into_iter().enumerate() {
                let id = format!("x{i}");
                sets.push(PredictionSet {
                    id: id.clone(),
                    classes: classes.into_iter().collect(),
                    threshold: None,
                });
                records.push(ScoreRecord::new(id, Some(y), scores));
            }
            (k, sets, records)
        })
    })
}

proptest! {
    #[test]
    fn rank_matches_integer_formula(p in permille(), m in 1usize..5000) {
        prop_assert_eq!(order_statistic_rank(p as f64 / 1000.0, m), integer_rank(p, m));
    }

    #[test]
    fn q_hat_is_sorted_order_statistic(nc in nc_multiset(1000), p in permille()) {
        let alpha = p as f64 / 1000.0;
        let model = CalibrationModel::from_nonconformity(nc.clone(), alpha, 3).unwrap();
        let k = integer_rank(p, nc.len());
        prop_assert_eq!(model.k, k);
        if k > nc.len() {
            prop_assert!(model.full_set_mode);
            prop_assert_eq!(model.threshold(), None);
        } else {
            let mut sorted = nc;
            sorted.sort_by(f64::total_cmp);
            prop_assert!(!model.full_set_mode);
            prop_assert_eq!(model.q_hat, sorted[k - 1]);
        }
    }

    #[test]
    fn smaller_alpha_gives_larger_sets(
        cal in grid_records(4, 200),
        test in grid_records(4, 50),
        a in 1u32..999,
        gap in 1u32..500,
    ) {
        let lo = a as f64 / 1000.0;
        let hi = ((a + gap).min(999)) as f64 / 1000.0;
        prop_assume!(lo < hi);
        let strict = calibrate(&cal, lo).unwrap();
        let loose = calibrate(&cal, hi).unwrap();
        prop_assert!(strict.q_hat >= loose.q_hat);
        let big = predict_batch(&test, &strict).unwrap();
        let small = predict_batch(&test, &loose).unwrap();
        for (b, s) in big.iter().zip(&small) {
            let b: BTreeSet<_> = b.classes.iter().collect();
            prop_assert!(s.classes.iter().all(|c| b.contains(c)));
        }
    }

    #[test]
    fn label_in_set_iff_nonconformity_below_q_hat(
        cal in grid_records(5, 100),
        test in grid_records(5, 40),
        p in 1u32..1000,
    ) {
        let model = calibrate(&cal, p as f64 / 1000.0).unwrap();
        prop_assume!(!model.full_set_mode);
        for r in &test {
            let y = r.label.unwrap();
            let set = predict_set(r, &model).unwrap();
            let by_score = r.scores[y] > 1.0 - model.q_hat;
            let by_nc = nonconformity(r, y).unwrap() < model.q_hat;
            prop_assert_eq!(set.contains(y), by_score);
            prop_assert_eq!(by_score, by_nc);
        }
    }

    #[test]
    fn calibration_ignores_record_order(
        (cal, shuffled) in grid_records(3, 150)
            .prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle())),
        p in permille(),
    ) {
        let alpha = p as f64 / 1000.0;
        prop_assert_eq!(calibrate(&cal, alpha).unwrap(), calibrate(&shuffled, alpha).unwrap());
    }

    #[test]
    fn kappa_swap_transposes_confusion(
        (k, a, b) in (2usize..=6).prop_flat_map(|k| {
            (2usize..80).prop_flat_map(move |n| {
                (
                    Just(k),
                    prop::collection::vec(0..k, n),
                    prop::collection::vec(0..k, n),
                )
            })
        })
    ) {
        for w in [Weighting::Linear, Weighting::None] {
            match (weighted_kappa(&a, &b, k, w), weighted_kappa(&b, &a, k, w)) {
                (Ok(ab), Ok(ba)) => {
                    for i in 0..k {
                        for j in 0..k {
                            prop_assert_eq!(ab.confusion[i][j], ba.confusion[j][i]);
                        }
                    }
                    prop_assert!((ab.kappa - ba.kappa).abs() <= 1e-12);
                    prop_assert!(ab.kappa <= 1.0 + 1e-12);
                    prop_assert_eq!(ab.kappa == 1.0, ab.p_o == 1.0);
                    let direct = (ab.p_o - ab.p_e) / (1.0 - ab.p_e);
                    prop_assert_eq!(ab.kappa, direct);
                }
                (Err(_), Err(_)) => {}
                (x, y) => prop_assert!(false, "asymmetric outcome {:?} / {:?}", x, y),
            }
        }
    }

    #[test]
    fn identical_raters_have_unit_kappa(labels in prop::collection::vec(0usize..4, 2..50)) {
        prop_assume!(labels.iter().collect::<BTreeSet<_>>().len() > 1);
        let r = weighted_kappa(&labels, &labels, 4, Weighting::Linear).unwrap();
        prop_assert_eq!(r.kappa, 1.0);
    }

    #[test]
    fn histograms_conserve_mass((k, sets, records) in sets_and_records(), p in permille()) {
        let report = coverage_audit(&sets, &records, k, p as f64 / 1000.0).unwrap();
        prop_assert_eq!(report.set_size_hist.iter().sum::<usize>(), report.n);
        for class in 0..k {
            let expected = records.iter().filter(|r| r.label == Some(class)).count();
            prop_assert_eq!(report.per_class_hist[class].iter().sum::<usize>(), expected);
        }
        let covered = sets.iter().zip(&records).filter(|(s, r)| s.contains(r.label.unwrap())).count();
        prop_assert_eq!(report.covered, covered);
        let scaled = report.coverage * report.n as f64;
        prop_assert!((scaled - covered as f64).abs() < 1e-9);
        prop_assert_eq!(report.empty_set_count, report.set_size_hist[0]);
    }

    #[test]
    fn filter_partitions_every_index((k, sets, records) in sets_and_records()) {
        let mut previous = usize::MAX;
        for max in (1..=k).rev() {
            let part = filter_by_set_size(&sets, max).unwrap();
            let retained: BTreeSet<_> = part.retained.iter().copied().collect();
            let deferred: BTreeSet<_> = part.deferred.iter().copied().collect();
            prop_assert!(retained.is_disjoint(&deferred));
            prop_assert_eq!(retained.len() + deferred.len(), sets.len());
            prop_assert!(part.retained.iter().all(|&i| (1..=max).contains(&sets[i].len())));
            prop_assert!(part.retained.len() <= previous);
            previous = part.retained.len();
        }
        let table = sweep(&sets, &records, k, 0.1).unwrap();
        let nonempty = sets.iter().filter(|s| !s.is_empty()).count();
        prop_assert_eq!(table.rows[0].retained_n, nonempty);
        for pair in table.rows.windows(2) {
            prop_assert!(pair[1].retained_n <= pair[0].retained_n);
            prop_assert!(pair[1].retained_fraction <= pair[0].retained_fraction);
        }
    }

    #[test]
    fn disparity_is_symmetric(
        a in prop::collection::vec(0u8..5, 1..40),
        b in prop::collection::vec(0u8..5, 1..40),
        seed in any::<u64>(),
    ) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let ab = disparity_test(&a, &b, 199, seed).unwrap();
        let ba = disparity_test(&b, &a, 199, seed).unwrap();
        prop_assert_eq!(ab.mean_diff, -ba.mean_diff);
        prop_assert_eq!(ab.p_value, ba.p_value);
        prop_assert!(ab.p_value > 0.0 && ab.p_value <= 1.0);
        prop_assert!(ab.p_value >= 1.0 / 200.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn model_file_round_trip(cal in grid_records(4, 80), test in grid_records(4, 30), p in permille()) {
        let model = calibrate(&cal, p as f64 / 1000.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        prop_assert_eq!(&loaded, &model);
        prop_assert_eq!(predict_batch(&test, &loaded).unwrap(), predict_batch(&test, &model).unwrap());
    }
}
