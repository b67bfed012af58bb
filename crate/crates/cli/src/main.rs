use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use slicevoco_cli::{
    cmd_bench, cmd_compare, cmd_evaluate, cmd_finetune, cmd_pretrain, cmd_select_thresholds,
    cmd_synth, config, exit_code_for, BenchArgs, CompareArgs, EvaluateArgs, FinetuneArgs,
    InitMode, PretrainArgs, RunConfig, SelectThresholdsArgs, SynthArgs,
};

/// Slice-level self-supervised pretraining and multi-organ CT classification.
///
/// Every run is single-threaded and bitwise reproducible from its seed and
/// manifest; `SLICEVOCO_DETERMINISTIC=1` (or `--single-thread`) is recorded
/// in the manifest and guarantees the same.
#[derive(Parser)]
#[command(name = "slicevoco", version, about, after_long_help = config::describe_defaults())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Voco,
    Scratch,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic RVOL dataset with a labels CSV.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Root seed (overrides [run] seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of studies (overrides [synth] count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Self-supervised pretraining over a volume directory.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Merge a second unlabeled volume directory into the pool.
        #[arg(long)]
        extra_unlabeled: Option<PathBuf>,
        /// Single-threaded mode (always on; recorded in the manifest).
        #[arg(long)]
        single_thread: bool,
        /// Also write a per-step crop-layout debug log.
        #[arg(long)]
        crop_log: bool,
    },
    /// Fine-tune the downstream classifier.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Backbone initialization: the pretrained student or seed-random.
        #[arg(long, value_enum)]
        init: InitArg,
        /// Pretraining checkpoint (required for --init voco).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        single_thread: bool,
    },
    /// Compute metrics, either from a classifier checkpoint plus data or
    /// from a predictions CSV plus labels.
    Evaluate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Thresholds JSON (predictions mode; defaults to 0.5 per column).
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
    /// Select per-column thresholds by cross-validated F1 grid search.
    SelectThresholds {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Aggregate evaluation reports from several arms into a comparison
    /// table and SVG plots.
    Compare {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Arms as name=dir[,dir...]; each dir holds a report.json.
        #[arg(required = true)]
        arms: Vec<String>,
    },
    /// Measure pretraining throughput at batch sizes 2, 4, and 8.
    Bench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Timed steps per batch size.
        #[arg(long, default_value_t = 8)]
        steps: u64,
    },
}

fn load_config(path: Option<&PathBuf>, seed: Option<u64>) -> Result<RunConfig, slicevoco_core::Error> {
    let mut config = RunConfig::load(path.map(|p| p.as_path()))?;
    if let Some(seed) = seed {
        config.seed = seed;
        config.pretrain.rng_seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), slicevoco_core::Error> {
    match cli.command {
        Command::Synth { out, config, seed, count } => {
            let config = load_config(config.as_ref(), seed)?;
            cmd_synth(&SynthArgs { out, config, count_override: count })
        }
        Command::Pretrain { data, out, config, seed, extra_unlabeled, single_thread: _, crop_log } => {
            let config = load_config(config.as_ref(), seed)?;
            cmd_pretrain(&PretrainArgs { data, out, config, extra_unlabeled, crop_log })
        }
        Command::Finetune { data, out, init, checkpoint, config, seed, single_thread: _ } => {
            let config = load_config(config.as_ref(), seed)?;
            let init = match init {
                InitArg::Voco => InitMode::Voco,
                InitArg::Scratch => InitMode::Scratch,
            };
            cmd_finetune(&FinetuneArgs { data, out, init, checkpoint, config })
        }
        Command::Evaluate { out, config, checkpoint, data, predictions, labels, thresholds } => {
            let config = load_config(config.as_ref(), None)?;
            cmd_evaluate(&EvaluateArgs { out, config, checkpoint, data, predictions, labels, thresholds })
        }
        Command::SelectThresholds { checkpoint, data, out, config } => {
            let config = load_config(config.as_ref(), None)?;
            cmd_select_thresholds(&SelectThresholdsArgs { checkpoint, data, out, config })
        }
        Command::Compare { out, config, arms } => {
            let config = load_config(config.as_ref(), None)?;
            cmd_compare(&CompareArgs { out, config, arms })
        }
        Command::Bench { data, out, config, steps } => {
            let config = load_config(config.as_ref(), None)?;
            cmd_bench(&BenchArgs { data, out, config, timed_steps: steps })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if let slicevoco_core::Error::NonFinite { dump: Some(dump), .. } = &err {
                eprintln!("offending batch: {dump}");
            }
            ExitCode::from(exit_code_for(&err) as u8)
        }
    }
}
