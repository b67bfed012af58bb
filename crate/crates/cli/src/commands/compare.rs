//! `compare`: aggregate per-seed evaluation reports into a table of
//! mean ± sd per arm, with SVG plots. Arms must share the split seed and
//! weight table; mixing protocols is a hard error.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Serialize;

use slicevoco_core::metrics::EvaluationReport;
use slicevoco_core::Error;

use crate::config::RunConfig;
use crate::svg;
use crate::util::{atomic_write, ensure_dir, Manifest};

type Result<T> = std::result::Result<T, Error>;

pub struct CompareArgs {
    pub out: PathBuf,
    pub config: RunConfig,
    /// `name=dir[,dir...]` per arm; each dir holds a report.json from
    /// `evaluate` (and optionally a loss_log.jsonl for the curves plot).
    pub arms: Vec<String>,
}

#[derive(Debug, Serialize)]
struct ArmSummary {
    name: String,
    runs: usize,
    rsna_mean: f64,
    rsna_sd: f64,
    map_mean: f64,
    map_sd: f64,
    precision_mean: f64,
    precision_sd: f64,
    recall_mean: f64,
    recall_sd: f64,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn parse_arm(spec: &str) -> Result<(String, Vec<PathBuf>)> {
    let (name, dirs) = spec.split_once('=').ok_or_else(|| {
        Error::InvalidArgument(format!("arm {spec:?}: expected name=dir[,dir...]"))
    })?;
    let dirs: Vec<PathBuf> = dirs.split(',').map(PathBuf::from).collect();
    if name.is_empty() || dirs.is_empty() {
        return Err(Error::InvalidArgument(format!("arm {spec:?}: empty name or dirs")));
    }
    Ok((name.to_string(), dirs))
}

fn load_report(dir: &PathBuf) -> Result<EvaluationReport> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn load_loss_curve(dir: &PathBuf) -> Option<Vec<(f64, f64)>> {
    let path = dir.join("loss_log.jsonl");
    let text = std::fs::read_to_string(&path).ok()?;
    let mut points = Vec::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).ok()?;
        let step = v.get("step")?.as_f64()?;
        let total = v.get("total").or_else(|| v.get("loss"))?.as_f64()?;
        points.push((step, total));
    }
    if points.is_empty() {
        None
    } else {
        Some(points)
    }
}

pub fn cmd_compare(args: &CompareArgs) -> Result<()> {
    if args.arms.len() < 2 {
        return Err(Error::InvalidArgument("compare needs at least two arms".into()));
    }
    let mut summaries = Vec::new();
    let mut protocol: Option<(Option<u64>, String)> = None;
    let mut curves: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let mut arm_reports: BTreeMap<String, Vec<EvaluationReport>> = BTreeMap::new();

    for arm_spec in &args.arms {
        let (name, dirs) = parse_arm(arm_spec)?;
        let mut reports = Vec::new();
        for (i, dir) in dirs.iter().enumerate() {
            let report = load_report(dir)?;
            let this = (
                report.split_seed,
                serde_json::to_string(&report.weight_table)
                    .map_err(|e| Error::Format(e.to_string()))?,
            );
            match &protocol {
                None => protocol = Some(this),
                Some(expected) if *expected == this => {}
                Some(expected) => {
                    return Err(Error::Data(format!(
                        "arm {name:?} run {} uses a different protocol (split seed / weight table) than the first arm: {:?} vs {:?}",
                        dir.display(),
                        this,
                        expected
                    )))
                }
            }
            if let Some(points) = load_loss_curve(dir) {
                curves.push((format!("{name}/{i}"), points));
            }
            reports.push(report);
        }
        let rsna: Vec<f64> = reports.iter().map(|r| r.rsna_score).collect();
        let map: Vec<f64> = reports.iter().map(|r| r.map).collect();
        let precision: Vec<f64> = reports.iter().map(|r| r.macro_precision).collect();
        let recall: Vec<f64> = reports.iter().map(|r| r.macro_recall).collect();
        let (rsna_mean, rsna_sd) = mean_sd(&rsna);
        let (map_mean, map_sd) = mean_sd(&map);
        let (precision_mean, precision_sd) = mean_sd(&precision);
        let (recall_mean, recall_sd) = mean_sd(&recall);
        summaries.push(ArmSummary {
            name: name.clone(),
            runs: reports.len(),
            rsna_mean,
            rsna_sd,
            map_mean,
            map_sd,
            precision_mean,
            precision_sd,
            recall_mean,
            recall_sd,
        });
        arm_reports.insert(name, reports);
    }

    ensure_dir(&args.out)?;

    // Text table mirroring the four metric columns, percentages for the
    // ranking metrics.
    let mut text = format!(
        "{:<24} {:>20} {:>20} {:>20} {:>20}\n",
        "arm", "rsna_score (down)", "mAP % (up)", "precision % (up)", "recall % (up)"
    );
    for s in &summaries {
        text.push_str(&format!(
            "{:<24} {:>20} {:>20} {:>20} {:>20}\n",
            s.name,
            format!("{:.4} ± {:.4}", s.rsna_mean, s.rsna_sd),
            format!("{:.2} ± {:.2}", s.map_mean * 100.0, s.map_sd * 100.0),
            format!("{:.2} ± {:.2}", s.precision_mean * 100.0, s.precision_sd * 100.0),
            format!("{:.2} ± {:.2}", s.recall_mean * 100.0, s.recall_sd * 100.0),
        ));
    }
    atomic_write(&args.out.join("comparison.txt"), text.as_bytes())?;

    let mut csv = String::from(
        "arm,runs,rsna_mean,rsna_sd,map_mean,map_sd,precision_mean,precision_sd,recall_mean,recall_sd\n",
    );
    for s in &summaries {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            s.name,
            s.runs,
            s.rsna_mean,
            s.rsna_sd,
            s.map_mean,
            s.map_sd,
            s.precision_mean,
            s.precision_sd,
            s.recall_mean,
            s.recall_sd
        ));
    }
    atomic_write(&args.out.join("comparison.csv"), csv.as_bytes())?;
    atomic_write(
        &args.out.join("comparison.json"),
        serde_json::to_string_pretty(&summaries)
            .map_err(|e| Error::Format(format!("summaries: {e}")))?
            .as_bytes(),
    )?;

    let panels: Vec<(String, Vec<(String, f64, f64)>)> = vec![
        (
            "rsna_score (lower is better)".to_string(),
            summaries.iter().map(|s| (s.name.clone(), s.rsna_mean, s.rsna_sd)).collect(),
        ),
        (
            "mAP".to_string(),
            summaries.iter().map(|s| (s.name.clone(), s.map_mean, s.map_sd)).collect(),
        ),
        (
            "macro precision".to_string(),
            summaries.iter().map(|s| (s.name.clone(), s.precision_mean, s.precision_sd)).collect(),
        ),
        (
            "macro recall".to_string(),
            summaries.iter().map(|s| (s.name.clone(), s.recall_mean, s.recall_sd)).collect(),
        ),
    ];
    atomic_write(
        &args.out.join("metrics.svg"),
        svg::bar_panels("arm comparison", &panels).as_bytes(),
    )?;
    if !curves.is_empty() {
        atomic_write(
            &args.out.join("losses.svg"),
            svg::line_chart("training loss", &curves).as_bytes(),
        )?;
    }

    Manifest::new("compare", args.config.seed, serde_json::to_value(&args.config).unwrap_or_default())
        .input("arms", args.arms.join(" "))
        .write(&args.out)?;
    Ok(())
}
