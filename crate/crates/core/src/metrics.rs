//! Evaluation suite: the weighted log-loss score, mean average precision,
//! macro precision/recall under per-class thresholds, threshold selection by
//! cross-validated F1, and patient-level dataset splitting.
//!
//! Metrics operate over nine one-vs-rest class columns (3 organs x 3 classes,
//! organ-major order: kidney_healthy .. spleen_high).

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::classifier::StudyPrediction;
use crate::data::labels::{InjuryLabel, Organ, OrganLabelTriple};
use crate::error::{Error, Result};
use crate::rng::{fnv1a64, splitmix64};

/// Probability clip applied before logs.
pub const LOG_CLIP: f64 = 1e-15;
/// Number of one-vs-rest class columns.
pub const NUM_COLUMNS: usize = 9;
/// Cross-validation folds.
pub const NUM_FOLDS: usize = 5;
/// Held-out fraction of patients.
pub const TEST_FRACTION: f64 = 0.2;

/// Per-class sample weights for the weighted log loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub healthy: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for WeightTable {
    fn default() -> Self {
        WeightTable { healthy: 1.0, low: 2.0, high: 4.0 }
    }
}

impl WeightTable {
    pub fn validate(&self) -> Result<()> {
        if [self.healthy, self.low, self.high].iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("weights must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn weight(&self, label: InjuryLabel) -> f64 {
        match label {
            InjuryLabel::Healthy => self.healthy,
            InjuryLabel::Low => self.low,
            InjuryLabel::High => self.high,
        }
    }
}

/// Matched predictions and ground truth, one entry per patient.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub entries: Vec<(String, StudyPrediction, OrganLabelTriple)>,
}

/// Join by patient id; every id must appear on both sides exactly once.
pub fn join_predictions(
    preds: &[(String, StudyPrediction)],
    labels: &[(String, OrganLabelTriple)],
) -> Result<EvalSet> {
    let mut label_map = BTreeMap::new();
    for (id, triple) in labels {
        if label_map.insert(id.clone(), *triple).is_some() {
            return Err(Error::Data(format!("duplicate label id {id:?}")));
        }
    }
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(preds.len());
    let mut missing = Vec::new();
    for (id, pred) in preds {
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!("duplicate prediction id {id:?}")));
        }
        match label_map.get(id) {
            Some(triple) => entries.push((id.clone(), pred.clone(), *triple)),
            None => missing.push(id.clone()),
        }
    }
    let unpredicted: Vec<String> =
        label_map.keys().filter(|id| !seen.contains(*id)).cloned().collect();
    if !missing.is_empty() || !unpredicted.is_empty() {
        return Err(Error::Data(format!(
            "id mismatch: predictions without labels {missing:?}, labels without predictions {unpredicted:?}"
        )));
    }
    if entries.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    Ok(EvalSet { entries })
}

/// Column index for (organ, class), organ-major.
pub fn column_index(organ: Organ, class: InjuryLabel) -> usize {
    organ.index() * 3 + class.index()
}

pub fn column_name(column: usize) -> String {
    let organ = Organ::ALL[column / 3];
    let class = InjuryLabel::ALL[column % 3];
    format!("{}_{}", organ.name(), class.name())
}

fn column_items(set: &EvalSet, column: usize) -> Vec<(f64, bool)> {
    let organ = Organ::ALL[column / 3];
    let class = InjuryLabel::ALL[column % 3];
    set.entries
        .iter()
        .map(|(_, pred, labels)| (pred.prob(organ, class), labels.get(organ) == class))
        .collect()
}

/// Sample-weighted multiclass log loss: per organ the weighted mean of
/// `-ln p(true class)` with weights from the true class, then the mean over
/// the three organs. Probabilities are clipped to `[LOG_CLIP, 1 - LOG_CLIP]`.
pub fn rsna_score(set: &EvalSet, w: &WeightTable) -> Result<f64> {
    let per_organ = rsna_per_organ(set, w)?;
    Ok(per_organ.iter().sum::<f64>() / 3.0)
}

/// Per-organ weighted log-loss components (same convention as [`rsna_score`]).
pub fn rsna_per_organ(set: &EvalSet, w: &WeightTable) -> Result<[f64; 3]> {
    w.validate()?;
    if set.entries.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut out = [0.0f64; 3];
    for organ in Organ::ALL {
        let mut num = 0.0;
        let mut den = 0.0;
        for (_, pred, labels) in &set.entries {
            let truth = labels.get(organ);
            let weight = w.weight(truth);
            let p = pred.prob(organ, truth).clamp(LOG_CLIP, 1.0 - LOG_CLIP);
            num += weight * (-p.ln());
            den += weight;
        }
        out[organ.index()] = num / den;
    }
    Ok(out)
}

/// Average precision of one column: scores descending, ties in stable input
/// order; `AP = mean over positives of precision-at-their-rank`. `None` when
/// the column has no positives.
pub fn average_precision(items: &[(f64, bool)]) -> Option<f64> {
    let num_pos = items.iter().filter(|(_, pos)| *pos).count();
    if num_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    // Stable sort: equal scores keep input order.
    order.sort_by(|&a, &b| items[b].0.partial_cmp(&items[a].0).expect("finite scores"));
    let mut seen_pos = 0usize;
    let mut acc = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if items[idx].1 {
            seen_pos += 1;
            acc += seen_pos as f64 / (rank0 + 1) as f64;
        }
    }
    Some(acc / num_pos as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    pub per_column: Vec<Option<f64>>,
    /// Columns with no positives, skipped from the mean.
    pub skipped_columns: Vec<String>,
}

/// Mean average precision over the evaluated class columns.
pub fn mean_average_precision(set: &EvalSet) -> Result<MapResult> {
    if set.entries.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut per_column = Vec::with_capacity(NUM_COLUMNS);
    let mut skipped = Vec::new();
    let mut acc = 0.0;
    let mut counted = 0usize;
    for column in 0..NUM_COLUMNS {
        let ap = average_precision(&column_items(set, column));
        match ap {
            Some(v) => {
                acc += v;
                counted += 1;
            }
            None => skipped.push(column_name(column)),
        }
        per_column.push(ap);
    }
    if counted == 0 {
        return Err(Error::Data("no column has positives".into()));
    }
    Ok(MapResult { map: acc / counted as f64, per_column, skipped_columns: skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn column_counts(items: &[(f64, bool)], threshold: f64) -> ColumnCounts {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for &(score, positive) in items {
        let predicted = score >= threshold;
        match (predicted, positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    ColumnCounts { tp, fp, fn_ }
}

fn precision_of(c: &ColumnCounts) -> f64 {
    if c.tp + c.fp == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    }
}

fn recall_of(c: &ColumnCounts) -> f64 {
    if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    }
}

fn f1_of(c: &ColumnCounts) -> f64 {
    let p = precision_of(c);
    let r = recall_of(c);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrResult {
    pub precision: f64,
    pub recall: f64,
    pub per_column: Vec<ColumnCounts>,
    /// Columns where a zero denominator forced the 0 convention.
    pub flagged_columns: Vec<String>,
}

/// Binarize at per-column thresholds; unweighted mean of per-column precision
/// and recall over all nine columns. Zero denominators contribute 0 and are
/// flagged.
pub fn macro_precision_recall(set: &EvalSet, thresholds: &[f64; NUM_COLUMNS]) -> Result<PrResult> {
    if set.entries.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    if thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::InvalidArgument(format!("thresholds outside [0, 1]: {thresholds:?}")));
    }
    let mut per_column = Vec::with_capacity(NUM_COLUMNS);
    let mut flagged = Vec::new();
    let mut p_acc = 0.0;
    let mut r_acc = 0.0;
    for column in 0..NUM_COLUMNS {
        let counts = column_counts(&column_items(set, column), thresholds[column]);
        if counts.tp + counts.fp == 0 || counts.tp + counts.fn_ == 0 {
            flagged.push(column_name(column));
        }
        p_acc += precision_of(&counts);
        r_acc += recall_of(&counts);
        per_column.push(counts);
    }
    Ok(PrResult {
        precision: p_acc / NUM_COLUMNS as f64,
        recall: r_acc / NUM_COLUMNS as f64,
        per_column,
        flagged_columns: flagged,
    })
}

/// Patient-level split: hash-ordered ids, ~20% test, remaining train ids
/// assigned round-robin to five folds. Deterministic in (ids, seed) and
/// independent of labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub test_ids: Vec<String>,
    /// Train ids with their fold, in hash order.
    pub train_folds: Vec<(String, usize)>,
}

impl SplitPlan {
    pub fn train_ids(&self) -> Vec<String> {
        self.train_folds.iter().map(|(id, _)| id.clone()).collect()
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.train_folds.iter().find(|(i, _)| i == id).map(|(_, f)| *f)
    }

    pub fn is_test(&self, id: &str) -> bool {
        self.test_ids.iter().any(|i| i == id)
    }
}

pub fn make_split(patient_ids: &[String], seed: u64) -> Result<SplitPlan> {
    let mut seen = HashSet::new();
    for id in patient_ids {
        if !seen.insert(id) {
            return Err(Error::InvalidArgument(format!("duplicate patient id {id:?}")));
        }
    }
    if patient_ids.is_empty() {
        return Err(Error::InvalidArgument("empty id list".into()));
    }
    let mut keyed: Vec<(u64, &String)> = patient_ids
        .iter()
        .map(|id| (splitmix64(fnv1a64(id.as_bytes()) ^ splitmix64(seed)), id))
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let n_test = ((patient_ids.len() as f64) * TEST_FRACTION).round() as usize;
    let test_ids: Vec<String> = keyed[..n_test].iter().map(|(_, id)| (*id).clone()).collect();
    let train_folds: Vec<(String, usize)> = keyed[n_test..]
        .iter()
        .enumerate()
        .map(|(i, (_, id))| ((*id).clone(), i % NUM_FOLDS))
        .collect();
    Ok(SplitPlan { seed, test_ids, train_folds })
}

/// Grid of candidate thresholds: 0.00, 0.01, ..., 1.00.
fn threshold_grid() -> impl Iterator<Item = f64> {
    (0..=100).map(|i| i as f64 / 100.0)
}

/// Mean of per-fold thresholds.
pub fn mean_fold_thresholds(fold_thresholds: &[f64]) -> f64 {
    fold_thresholds.iter().sum::<f64>() / fold_thresholds.len() as f64
}

/// Per class column: for every fold, grid-search the F1-maximizing threshold
/// on that fold's validation items (ties pick the lowest grid point); the
/// final threshold is the fold mean. `oof` must cover exactly the plan's
/// train ids.
pub fn select_thresholds(oof: &EvalSet, plan: &SplitPlan) -> Result<[f64; NUM_COLUMNS]> {
    let oof_ids: HashSet<&str> = oof.entries.iter().map(|(id, _, _)| id.as_str()).collect();
    let train_ids: HashSet<&str> = plan.train_folds.iter().map(|(id, _)| id.as_str()).collect();
    if oof_ids != train_ids {
        let missing: Vec<&&str> = train_ids.difference(&oof_ids).collect();
        let extra: Vec<&&str> = oof_ids.difference(&train_ids).collect();
        return Err(Error::Data(format!(
            "out-of-fold predictions do not cover the train split: missing {missing:?}, extra {extra:?}"
        )));
    }
    let mut fold_sets: Vec<Vec<usize>> = vec![Vec::new(); NUM_FOLDS];
    for (i, (id, _, _)) in oof.entries.iter().enumerate() {
        let fold = plan.fold_of(id).expect("coverage checked");
        fold_sets[fold].push(i);
    }
    if let Some(empty) = fold_sets.iter().position(|f| f.is_empty()) {
        return Err(Error::Data(format!("fold {empty} has no validation patients")));
    }
    let mut thresholds = [0.0f64; NUM_COLUMNS];
    for column in 0..NUM_COLUMNS {
        let items = column_items(oof, column);
        let mut fold_best = Vec::with_capacity(NUM_FOLDS);
        for fold in &fold_sets {
            let fold_items: Vec<(f64, bool)> = fold.iter().map(|&i| items[i]).collect();
            let mut best_t = 0.0;
            let mut best_f1 = -1.0;
            for t in threshold_grid() {
                let f1 = f1_of(&column_counts(&fold_items, t));
                if f1 > best_f1 {
                    best_f1 = f1;
                    best_t = t;
                }
            }
            fold_best.push(best_t);
        }
        thresholds[column] = mean_fold_thresholds(&fold_best);
    }
    Ok(thresholds)
}

/// Everything one evaluation produces, serialized into reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rsna_score: f64,
    pub map: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub per_organ_rsna: BTreeMap<String, f64>,
    pub per_organ_map: BTreeMap<String, Option<f64>>,
    pub thresholds: BTreeMap<String, f64>,
    pub weight_table: WeightTable,
    pub skipped_columns: Vec<String>,
    pub flagged_columns: Vec<String>,
    pub num_samples: usize,
    pub split_seed: Option<u64>,
}

/// Compute all four metrics with the given thresholds.
pub fn evaluate(
    set: &EvalSet,
    w: &WeightTable,
    thresholds: &[f64; NUM_COLUMNS],
    split_seed: Option<u64>,
) -> Result<EvaluationReport> {
    let rsna = rsna_score(set, w)?;
    let per_organ = rsna_per_organ(set, w)?;
    let map_result = mean_average_precision(set)?;
    let pr = macro_precision_recall(set, thresholds)?;
    let mut per_organ_rsna = BTreeMap::new();
    let mut per_organ_map = BTreeMap::new();
    for organ in Organ::ALL {
        per_organ_rsna.insert(organ.name().to_string(), per_organ[organ.index()]);
        let aps: Vec<f64> = InjuryLabel::ALL
            .iter()
            .filter_map(|&class| map_result.per_column[column_index(organ, class)])
            .collect();
        per_organ_map.insert(
            organ.name().to_string(),
            if aps.is_empty() { None } else { Some(aps.iter().sum::<f64>() / aps.len() as f64) },
        );
    }
    let thresholds_map: BTreeMap<String, f64> =
        (0..NUM_COLUMNS).map(|c| (column_name(c), thresholds[c])).collect();
    Ok(EvaluationReport {
        rsna_score: rsna,
        map: map_result.map,
        macro_precision: pr.precision,
        macro_recall: pr.recall,
        per_organ_rsna,
        per_organ_map,
        thresholds: thresholds_map,
        weight_table: *w,
        skipped_columns: map_result.skipped_columns,
        flagged_columns: pr.flagged_columns,
        num_samples: set.entries.len(),
        split_seed,
    })
}

impl EvaluationReport {
    /// One-row CSV with a fixed header; columns follow the predictions CSV
    /// organ_class naming.
    pub fn to_csv(&self) -> String {
        let mut header = String::from("rsna_score,map,macro_precision,macro_recall,num_samples");
        let mut row = format!(
            "{:.6},{:.6},{:.6},{:.6},{}",
            self.rsna_score, self.map, self.macro_precision, self.macro_recall, self.num_samples
        );
        for c in 0..NUM_COLUMNS {
            let name = column_name(c);
            header.push_str(&format!(",threshold_{name}"));
            row.push_str(&format!(",{:.6}", self.thresholds[&name]));
        }
        format!("{header}\n{row}\n")
    }
}

#[cfg(test)]
mod tests;
