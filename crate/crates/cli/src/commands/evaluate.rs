//! `evaluate` and `select-thresholds`.
//!
//! Evaluation runs either from a classifier checkpoint plus a labeled
//! dataset (split, threshold selection on the train side, metrics on the
//! test side) or directly from a predictions CSV plus labels.

use std::path::{Path, PathBuf};

use slicevoco_core::classifier::{
    load_state, predict_stack, read_predictions_csv, write_predictions_csv, ClassifierState,
    StudyPrediction,
};
use slicevoco_core::data::labels::{read_labels_csv, OrganLabelTriple};
use slicevoco_core::data::preprocess;
use slicevoco_core::metrics::{
    column_name, evaluate, join_predictions, make_split, select_thresholds, SplitPlan,
    NUM_COLUMNS,
};
use slicevoco_core::Error;

use crate::config::RunConfig;
use crate::util::{atomic_write, ensure_dir, load_dataset, Manifest};

type Result<T> = std::result::Result<T, Error>;

pub struct EvaluateArgs {
    pub out: PathBuf,
    pub config: RunConfig,
    /// Checkpoint mode.
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    /// Predictions mode.
    pub predictions: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub thresholds: Option<PathBuf>,
}

fn thresholds_to_json(thresholds: &[f64; NUM_COLUMNS]) -> String {
    let map: std::collections::BTreeMap<String, f64> =
        (0..NUM_COLUMNS).map(|c| (column_name(c), thresholds[c])).collect();
    serde_json::to_string_pretty(&map).expect("thresholds serialize")
}

pub fn read_thresholds_json(path: &Path) -> Result<[f64; NUM_COLUMNS]> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map: std::collections::BTreeMap<String, f64> = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut out = [0.0f64; NUM_COLUMNS];
    for c in 0..NUM_COLUMNS {
        let name = column_name(c);
        out[c] = *map
            .get(&name)
            .ok_or_else(|| Error::Format(format!("{}: missing column {name}", path.display())))?;
    }
    Ok(out)
}

/// Predict train- and test-side studies with the checkpointed model.
struct CheckpointEval {
    train_preds: Vec<(String, StudyPrediction)>,
    test_preds: Vec<(String, StudyPrediction)>,
    train_labels: Vec<(String, OrganLabelTriple)>,
    test_labels: Vec<(String, OrganLabelTriple)>,
    plan: SplitPlan,
    data_digest: String,
}

fn run_checkpoint_predictions(
    state: &ClassifierState,
    data: &Path,
    config: &RunConfig,
) -> Result<CheckpointEval> {
    let dataset = load_dataset(data)?;
    let labeled = dataset.labeled()?;
    let ids: Vec<String> = labeled.iter().map(|(id, _, _)| id.clone()).collect();
    let plan = make_split(&ids, config.eval.split_seed)?;
    let mut out = CheckpointEval {
        train_preds: Vec::new(),
        test_preds: Vec::new(),
        train_labels: Vec::new(),
        test_labels: Vec::new(),
        plan,
        data_digest: dataset.digest.clone(),
    };
    for (id, volume, triple) in &labeled {
        let stack = preprocess(volume, &config.preprocess_downstream)?;
        let pred = predict_stack(state, &stack)?;
        if out.plan.is_test(id) {
            out.test_preds.push((id.clone(), pred));
            out.test_labels.push((id.clone(), *triple));
        } else {
            out.train_preds.push((id.clone(), pred));
            out.train_labels.push((id.clone(), *triple));
        }
    }
    Ok(out)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let config = &args.config;
    ensure_dir(&args.out)?;
    let (report, test_preds, manifest) = match (&args.checkpoint, &args.predictions) {
        (Some(ckpt_path), None) => {
            let data = args.data.as_ref().ok_or_else(|| {
                Error::InvalidArgument("evaluate with --checkpoint requires --data".into())
            })?;
            let state = load_state(ckpt_path)?;
            let eval = run_checkpoint_predictions(&state, data, config)?;
            let train_set = join_predictions(&eval.train_preds, &eval.train_labels)?;
            let thresholds = select_thresholds(&train_set, &eval.plan)?;
            let test_set = join_predictions(&eval.test_preds, &eval.test_labels)?;
            let report = evaluate(
                &test_set,
                &config.eval.weight_table,
                &thresholds,
                Some(config.eval.split_seed),
            )?;
            atomic_write(&args.out.join("thresholds.json"), thresholds_to_json(&thresholds).as_bytes())?;
            let manifest = Manifest::new(
                "evaluate",
                config.seed,
                serde_json::to_value(config).unwrap_or_default(),
            )
            .input("checkpoint", ckpt_path.display().to_string())
            .input("data", data.display().to_string())
            .input("data_digest", eval.data_digest)
            .note("thresholds from 5-fold F1 grid search on train-side predictions".to_string());
            (report, Some(eval.test_preds), manifest)
        }
        (None, Some(pred_path)) => {
            let labels_path = args.labels.as_ref().ok_or_else(|| {
                Error::InvalidArgument("evaluate with --predictions requires --labels".into())
            })?;
            let preds = read_predictions_csv(pred_path)?;
            let labels = read_labels_csv(labels_path)?;
            let set = join_predictions(&preds, &labels)?;
            let thresholds = match &args.thresholds {
                Some(path) => read_thresholds_json(path)?,
                None => [0.5; NUM_COLUMNS],
            };
            let report = evaluate(&set, &config.eval.weight_table, &thresholds, None)?;
            let manifest = Manifest::new(
                "evaluate",
                config.seed,
                serde_json::to_value(config).unwrap_or_default(),
            )
            .input("predictions", pred_path.display().to_string())
            .input("labels", labels_path.display().to_string())
            .note(match &args.thresholds {
                Some(p) => format!("thresholds from {}", p.display()),
                None => "thresholds defaulted to 0.5 for every column".to_string(),
            });
            (report, None, manifest)
        }
        _ => {
            return Err(Error::InvalidArgument(
                "evaluate needs either --checkpoint + --data or --predictions + --labels".into(),
            ))
        }
    };

    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Format(format!("report: {e}")))?;
    atomic_write(&args.out.join("report.json"), json.as_bytes())?;
    atomic_write(&args.out.join("report.csv"), report.to_csv().as_bytes())?;
    if let Some(preds) = test_preds {
        write_predictions_csv(&preds, args.out.join("predictions.csv"))?;
    }
    manifest.write(&args.out)?;
    Ok(())
}

pub struct SelectThresholdsArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: RunConfig,
}

pub fn cmd_select_thresholds(args: &SelectThresholdsArgs) -> Result<()> {
    let config = &args.config;
    let state = load_state(&args.checkpoint)?;
    let eval = run_checkpoint_predictions(&state, &args.data, config)?;
    let train_set = join_predictions(&eval.train_preds, &eval.train_labels)?;
    let thresholds = select_thresholds(&train_set, &eval.plan)?;
    ensure_dir(&args.out)?;
    atomic_write(&args.out.join("thresholds.json"), thresholds_to_json(&thresholds).as_bytes())?;
    Manifest::new(
        "select-thresholds",
        config.seed,
        serde_json::to_value(config).unwrap_or_default(),
    )
    .input("checkpoint", args.checkpoint.display().to_string())
    .input("data", args.data.display().to_string())
    .input("data_digest", eval.data_digest)
    .write(&args.out)?;
    Ok(())
}
