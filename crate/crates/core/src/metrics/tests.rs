use proptest::prelude::*;

use super::*;
use crate::classifier::StudyPrediction;
use crate::rng::{rng_for, stream};
use rand::Rng;

/// Prediction whose three organ rows are identical.
fn pred_all(row: [f64; 3]) -> StudyPrediction {
    StudyPrediction { probs: [row, row, row] }
}

fn labels_all(label: InjuryLabel) -> OrganLabelTriple {
    OrganLabelTriple { kidney: label, liver: label, spleen: label }
}

fn set_of(entries: Vec<(String, StudyPrediction, OrganLabelTriple)>) -> EvalSet {
    EvalSet { entries }
}

#[test]
fn rsna_perfect_predictions_are_near_zero() {
    let set = set_of(vec![
        ("a".into(), pred_all([1.0, 0.0, 0.0]), labels_all(InjuryLabel::Healthy)),
        ("b".into(), pred_all([0.0, 0.0, 1.0]), labels_all(InjuryLabel::High)),
    ]);
    let score = rsna_score(&set, &WeightTable::default()).unwrap();
    assert!(score >= 0.0 && score <= 3.4e-14, "{score}");
}

#[test]
fn rsna_hand_computed_two_sample_case() {
    // Single-organ worked example replicated on all three organs:
    // y1 = healthy p = 0.8 (w 1), y2 = high p(high) = 0.5 (w 4)
    // -> (1*0.223144 + 4*0.693147) / 5 = 0.599147.
    let set = set_of(vec![
        ("a".into(), pred_all([0.8, 0.1, 0.1]), labels_all(InjuryLabel::Healthy)),
        ("b".into(), pred_all([0.3, 0.2, 0.5]), labels_all(InjuryLabel::High)),
    ]);
    let score = rsna_score(&set, &WeightTable::default()).unwrap();
    let expect = (1.0 * (-f64::ln(0.8)) + 4.0 * (-f64::ln(0.5))) / 5.0;
    assert!((score - expect).abs() < 1e-12, "{score} vs {expect}");
    assert!((score - 0.599146).abs() < 1e-6);
}

#[test]
fn rsna_uniform_prediction_is_ln3_for_any_weights() {
    let set = set_of(vec![
        ("a".into(), StudyPrediction::uniform(), labels_all(InjuryLabel::Low)),
        ("b".into(), StudyPrediction::uniform(), labels_all(InjuryLabel::Healthy)),
        ("c".into(), StudyPrediction::uniform(), labels_all(InjuryLabel::High)),
    ]);
    for w in [WeightTable::default(), WeightTable { healthy: 3.0, low: 1.0, high: 9.0 }] {
        let score = rsna_score(&set, &w).unwrap();
        assert!((score - 3f64.ln()).abs() < 1e-12, "{score}");
    }
}

#[test]
fn rsna_invariant_under_weight_rescale() {
    let mut rng = rng_for(5, stream::SYNTH_LABELS, 0);
    let entries: Vec<(String, StudyPrediction, OrganLabelTriple)> = (0..20)
        .map(|i| {
            let mut probs = [[0.0f64; 3]; 3];
            for row in probs.iter_mut() {
                let a: f64 = rng.gen_range(0.05..1.0);
                let b: f64 = rng.gen_range(0.05..1.0);
                let c: f64 = rng.gen_range(0.05..1.0);
                let s = a + b + c;
                *row = [a / s, b / s, c / s];
            }
            let labels = OrganLabelTriple {
                kidney: InjuryLabel::ALL[rng.gen_range(0..3)],
                liver: InjuryLabel::ALL[rng.gen_range(0..3)],
                spleen: InjuryLabel::ALL[rng.gen_range(0..3)],
            };
            (format!("p{i}"), StudyPrediction { probs }, labels)
        })
        .collect();
    let set = set_of(entries);
    let base = rsna_score(&set, &WeightTable::default()).unwrap();
    let scaled = rsna_score(
        &set,
        &WeightTable { healthy: 7.3, low: 14.6, high: 29.2 },
    )
    .unwrap();
    assert!((base - scaled).abs() < 1e-12, "{base} vs {scaled}");
}

#[test]
fn rsna_rejects_empty_and_mismatched_ids() {
    let empty = EvalSet { entries: vec![] };
    assert!(rsna_score(&empty, &WeightTable::default()).is_err());
    let preds = vec![("a".to_string(), StudyPrediction::uniform())];
    let labels = vec![("b".to_string(), labels_all(InjuryLabel::Healthy))];
    let err = join_predictions(&preds, &labels).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("\"a\"") && msg.contains("\"b\""), "{msg}");
}

#[test]
fn average_precision_worked_examples() {
    // Perfect ranking.
    assert_eq!(average_precision(&[(0.9, true), (0.2, false)]).unwrap(), 1.0);
    // Scores [0.9, 0.8, 0.1], labels [1, 0, 1] -> (1/1 + 2/3) / 2.
    let ap = average_precision(&[(0.9, true), (0.8, false), (0.1, true)]).unwrap();
    assert!((ap - 5.0 / 6.0).abs() < 1e-12, "{ap}");
    assert!((ap - 0.833333).abs() < 1e-6);
    // All-identical scores, one positive among k placed last in input order:
    // stable tie-break ranks it k-th -> AP = 1/k.
    for k in [2usize, 5, 9] {
        let mut items = vec![(0.5, false); k];
        items[k - 1].1 = true;
        let ap = average_precision(&items).unwrap();
        assert!((ap - 1.0 / k as f64).abs() < 1e-12, "k {k}: {ap}");
    }
    // No positives -> undefined.
    assert!(average_precision(&[(0.3, false)]).is_none());
}

#[test]
fn map_skips_positive_free_columns_and_reports_them() {
    // Everything healthy: the low/high columns have no positives.
    let set = set_of(vec![
        ("a".into(), pred_all([0.9, 0.05, 0.05]), labels_all(InjuryLabel::Healthy)),
        ("b".into(), pred_all([0.6, 0.3, 0.1]), labels_all(InjuryLabel::Healthy)),
    ]);
    let result = mean_average_precision(&set).unwrap();
    assert_eq!(result.skipped_columns.len(), 6);
    assert!(result.skipped_columns.contains(&"kidney_low".to_string()));
    assert!((result.map - 1.0).abs() < 1e-12);
}

#[test]
fn map_invariant_under_monotone_score_transform() {
    let mut rng = rng_for(11, stream::SYNTH_LABELS, 1);
    let entries: Vec<(String, StudyPrediction, OrganLabelTriple)> = (0..15)
        .map(|i| {
            let mut probs = [[0.0f64; 3]; 3];
            for row in probs.iter_mut() {
                let a: f64 = rng.gen_range(0.01..1.0);
                let b: f64 = rng.gen_range(0.01..1.0);
                let c: f64 = rng.gen_range(0.01..1.0);
                let s = a + b + c;
                *row = [a / s, b / s, c / s];
            }
            let labels = OrganLabelTriple {
                kidney: InjuryLabel::ALL[rng.gen_range(0..3)],
                liver: InjuryLabel::ALL[rng.gen_range(0..3)],
                spleen: InjuryLabel::ALL[rng.gen_range(0..3)],
            };
            (format!("p{i}"), StudyPrediction { probs }, labels)
        })
        .collect();
    let base = mean_average_precision(&set_of(entries.clone())).unwrap().map;
    // Strictly monotone transform of every score. The transformed rows are no
    // longer probability vectors, which mAP does not require.
    let transformed: Vec<(String, StudyPrediction, OrganLabelTriple)> = entries
        .iter()
        .map(|(id, pred, labels)| {
            let mut probs = pred.probs;
            for row in probs.iter_mut() {
                for v in row.iter_mut() {
                    *v = v.powi(3) + 0.5 * *v;
                }
            }
            (id.clone(), StudyPrediction { probs }, *labels)
        })
        .collect();
    let t = mean_average_precision(&set_of(transformed)).unwrap().map;
    assert!((base - t).abs() < 1e-12, "{base} vs {t}");
}

#[test]
fn macro_pr_perfect_predictions() {
    let set = set_of(vec![
        ("a".into(), pred_all([0.9, 0.05, 0.05]), labels_all(InjuryLabel::Healthy)),
        ("b".into(), pred_all([0.05, 0.9, 0.05]), labels_all(InjuryLabel::Low)),
        ("c".into(), pred_all([0.05, 0.05, 0.9]), labels_all(InjuryLabel::High)),
    ]);
    let pr = macro_precision_recall(&set, &[0.5; NUM_COLUMNS]).unwrap();
    assert_eq!((pr.precision, pr.recall), (1.0, 1.0));
    assert!(pr.flagged_columns.is_empty());
}

#[test]
fn macro_pr_zero_denominator_contributes_zero_and_flags() {
    // Threshold 1.0 on a column with no predicted positives.
    let set = set_of(vec![(
        "a".into(),
        pred_all([0.5, 0.3, 0.2]),
        labels_all(InjuryLabel::Healthy),
    )]);
    let pr = macro_precision_recall(&set, &[1.0; NUM_COLUMNS]).unwrap();
    assert!(pr.precision < 1e-12);
    assert!(!pr.flagged_columns.is_empty());
}

#[test]
fn macro_pr_hand_counted_two_column_case() {
    // Counts (tp, fp, fn) = (1, 1, 0) and (1, 0, 1):
    // precision (0.5 + 1) / 2 = 0.75, recall (1 + 0.5) / 2 = 0.75.
    let a = ColumnCounts { tp: 1, fp: 1, fn_: 0 };
    let b = ColumnCounts { tp: 1, fp: 0, fn_: 1 };
    let p = (precision_of(&a) + precision_of(&b)) / 2.0;
    let r = (recall_of(&a) + recall_of(&b)) / 2.0;
    assert_eq!((p, r), (0.75, 0.75));
}

#[test]
fn macro_pr_permutation_invariant() {
    let mut rng = rng_for(13, stream::SYNTH_LABELS, 2);
    let entries: Vec<(String, StudyPrediction, OrganLabelTriple)> = (0..12)
        .map(|i| {
            let mut probs = [[0.0f64; 3]; 3];
            for row in probs.iter_mut() {
                let a: f64 = rng.gen_range(0.01..1.0);
                let b: f64 = rng.gen_range(0.01..1.0);
                let c: f64 = rng.gen_range(0.01..1.0);
                let s = a + b + c;
                *row = [a / s, b / s, c / s];
            }
            let labels = OrganLabelTriple {
                kidney: InjuryLabel::ALL[rng.gen_range(0..3)],
                liver: InjuryLabel::ALL[rng.gen_range(0..3)],
                spleen: InjuryLabel::ALL[rng.gen_range(0..3)],
            };
            (format!("p{i}"), StudyPrediction { probs }, labels)
        })
        .collect();
    let thresholds = [0.4; NUM_COLUMNS];
    let base = macro_precision_recall(&set_of(entries.clone()), &thresholds).unwrap();
    let mut shuffled = entries;
    shuffled.reverse();
    shuffled.swap(0, 5);
    let perm = macro_precision_recall(&set_of(shuffled), &thresholds).unwrap();
    assert_eq!((base.precision, base.recall), (perm.precision, perm.recall));
}

#[test]
fn split_ten_patients_is_eight_two() {
    let ids: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
    let plan = make_split(&ids, 7).unwrap();
    assert_eq!(plan.test_ids.len(), 2);
    assert_eq!(plan.train_folds.len(), 8);
}

#[test]
fn split_is_deterministic_and_label_independent() {
    let ids: Vec<String> = (0..40).map(|i| format!("patient-{i:03}")).collect();
    let a = make_split(&ids, 99).unwrap();
    let b = make_split(&ids, 99).unwrap();
    assert_eq!(a, b);
    let c = make_split(&ids, 100).unwrap();
    assert_ne!(a, c);
    // Input order must not matter either.
    let mut reversed = ids.clone();
    reversed.reverse();
    let d = make_split(&reversed, 99).unwrap();
    assert_eq!(a, d);
}

#[test]
fn split_partitions_exhaustively() {
    let ids: Vec<String> = (0..1000).map(|i| format!("id{i}")).collect();
    let plan = make_split(&ids, 3).unwrap();
    assert_eq!(plan.test_ids.len(), 200);
    let mut seen = std::collections::HashSet::new();
    for id in &plan.test_ids {
        assert!(seen.insert(id.clone()));
    }
    for (id, fold) in &plan.train_folds {
        assert!(seen.insert(id.clone()));
        assert!(*fold < NUM_FOLDS);
    }
    assert_eq!(seen.len(), 1000);
    // Fold balance within 1.
    let mut counts = [0usize; NUM_FOLDS];
    for (_, fold) in &plan.train_folds {
        counts[*fold] += 1;
    }
    let min = counts.iter().min().unwrap();
    let max = counts.iter().max().unwrap();
    assert!(max - min <= 1, "{counts:?}");
}

#[test]
fn split_rejects_duplicates() {
    let ids = vec!["a".to_string(), "a".to_string()];
    assert!(make_split(&ids, 0).is_err());
}

fn single_column_set(
    plan_ids: &[(String, usize)],
    scores: impl Fn(usize) -> f64,
    positive: impl Fn(usize) -> bool,
) -> EvalSet {
    let entries = plan_ids
        .iter()
        .enumerate()
        .map(|(i, (id, _))| {
            let s = scores(i);
            let rest = (1.0 - s) / 2.0;
            let probs = [[s, rest, rest], [1.0 / 3.0; 3], [1.0 / 3.0; 3]];
            let label = OrganLabelTriple {
                kidney: if positive(i) { InjuryLabel::Healthy } else { InjuryLabel::Low },
                liver: InjuryLabel::Healthy,
                spleen: InjuryLabel::Healthy,
            };
            (id.clone(), StudyPrediction { probs }, label)
        })
        .collect();
    EvalSet { entries }
}

#[test]
fn thresholds_perfectly_separated_at_half_select_half() {
    let ids: Vec<String> = (0..25).map(|i| format!("p{i}")).collect();
    let plan = make_split(&ids, 1).unwrap();
    // Positives score exactly 0.50, negatives 0.49: the only F1-maximizing
    // grid point is 0.50 on every fold.
    let set = single_column_set(&plan.train_folds, |i| if i % 2 == 0 { 0.50 } else { 0.49 }, |i| i % 2 == 0);
    let thresholds = select_thresholds(&set, &plan).unwrap();
    assert!((thresholds[column_index(Organ::Kidney, InjuryLabel::Healthy)] - 0.5).abs() < 1e-12);
}

#[test]
fn thresholds_all_positive_column_selects_zero() {
    let ids: Vec<String> = (0..25).map(|i| format!("p{i}")).collect();
    let plan = make_split(&ids, 2).unwrap();
    let set = single_column_set(&plan.train_folds, |i| 0.2 + 0.001 * i as f64, |_| true);
    let thresholds = select_thresholds(&set, &plan).unwrap();
    assert_eq!(thresholds[column_index(Organ::Kidney, InjuryLabel::Healthy)], 0.0);
}

#[test]
fn fold_threshold_mean_is_arithmetic() {
    let mean = mean_fold_thresholds(&[0.3, 0.3, 0.4, 0.4, 0.5]);
    assert!((mean - 0.38).abs() < 1e-12);
}

#[test]
fn thresholds_require_exact_train_coverage() {
    let ids: Vec<String> = (0..25).map(|i| format!("p{i}")).collect();
    let plan = make_split(&ids, 3).unwrap();
    let mut partial = plan.train_folds.clone();
    partial.pop();
    let set = single_column_set(&partial, |_| 0.5, |i| i % 2 == 0);
    assert!(select_thresholds(&set, &plan).is_err());
}

#[test]
fn evaluation_report_has_sane_ranges_and_csv() {
    let set = set_of(vec![
        ("a".into(), pred_all([0.8, 0.1, 0.1]), labels_all(InjuryLabel::Healthy)),
        ("b".into(), pred_all([0.2, 0.6, 0.2]), labels_all(InjuryLabel::Low)),
        ("c".into(), pred_all([0.1, 0.2, 0.7]), labels_all(InjuryLabel::High)),
    ]);
    let report = evaluate(&set, &WeightTable::default(), &[0.5; NUM_COLUMNS], Some(9)).unwrap();
    assert!(report.rsna_score >= 0.0);
    assert!((0.0..=1.0).contains(&report.map));
    assert!((0.0..=1.0).contains(&report.macro_precision));
    assert!((0.0..=1.0).contains(&report.macro_recall));
    assert_eq!(report.num_samples, 3);
    let csv = report.to_csv();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("rsna_score,map,macro_precision,macro_recall"));
    assert!(header.contains("threshold_spleen_high"));
    assert_eq!(lines.next().unwrap().split(',').count(), header.split(',').count());
    // JSON round-trip.
    let json = serde_json::to_string(&report).unwrap();
    let back: EvaluationReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.num_samples, 3);
}

/// Brute-force AP oracle: sweep distinct thresholds descending and integrate
/// precision over recall increments. Equals the rank formula for distinct
/// scores (ties would differ under stable-order ranking, so inputs here are
/// constructed tie-free).
fn ap_threshold_sweep(items: &[(f64, bool)]) -> Option<f64> {
    let num_pos = items.iter().filter(|(_, p)| *p).count();
    if num_pos == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = items.iter().map(|(s, _)| *s).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut acc = 0.0;
    let mut prev_recall = 0.0;
    for &t in &thresholds {
        let tp = items.iter().filter(|(s, p)| *s >= t && *p).count();
        let predicted = items.iter().filter(|(s, _)| *s >= t).count();
        let precision = tp as f64 / predicted as f64;
        let recall = tp as f64 / num_pos as f64;
        acc += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(acc)
}

proptest! {
    #[test]
    fn ap_rank_formula_matches_threshold_sweep(
        seed in 0u64..5000,
        n in 2usize..24,
    ) {
        let mut rng = rng_for(seed, stream::SYNTH_LABELS, 77);
        // Distinct scores by construction.
        let mut items: Vec<(f64, bool)> = (0..n)
            .map(|i| (i as f64 / n as f64 + rng.gen_range(0.0..0.4 / n as f64), rng.gen_bool(0.4)))
            .collect();
        // Shuffle deterministically.
        for k in (1..items.len()).rev() {
            let j = rng.gen_range(0..=k);
            items.swap(k, j);
        }
        let rank = average_precision(&items);
        let sweep = ap_threshold_sweep(&items);
        match (rank, sweep) {
            (None, None) => {}
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-10, "rank {a} sweep {b}"),
            other => prop_assert!(false, "mismatch {other:?}"),
        }
    }

    #[test]
    fn split_same_ids_any_seed_partitions(seed in 0u64..500) {
        let ids: Vec<String> = (0..37).map(|i| format!("p{i}")).collect();
        let plan = make_split(&ids, seed).unwrap();
        let total = plan.test_ids.len() + plan.train_folds.len();
        prop_assert_eq!(total, 37);
        // round(0.2 * 37) = 7.
        prop_assert_eq!(plan.test_ids.len(), 7);
    }
}
