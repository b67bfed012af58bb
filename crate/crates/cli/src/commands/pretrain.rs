//! `pretrain`: run the self-supervised loop over a volume directory, writing
//! the checkpoint, loss log, optional crop-layout log, throughput summary,
//! and manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use slicevoco_core::data::{preprocess, SliceStack};
use slicevoco_core::loss::LossBreakdown;
use slicevoco_core::pretrain::{
    run_pretraining_from, save_state, state_to_checkpoint, init_state, PretrainBatch,
    PretrainConfig, StudentTeacherState, TrainObserver,
};
use slicevoco_core::Error;

use crate::config::RunConfig;
use crate::util::{atomic_write, ensure_dir, load_dataset, Manifest};

type Result<T> = std::result::Result<T, Error>;

pub struct PretrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: RunConfig,
    pub extra_unlabeled: Option<PathBuf>,
    pub crop_log: bool,
}

#[derive(serde::Serialize)]
struct LossLine {
    step: u64,
    intra: f64,
    inter: f64,
    reg: f64,
    total: f64,
}

#[derive(serde::Serialize)]
struct Throughput {
    steps: u64,
    elapsed_seconds: f64,
    steps_per_second: f64,
    patients_per_batch: usize,
}

struct RunLogger<'a> {
    loss_log: BufWriter<File>,
    crop_log: Option<BufWriter<File>>,
    checkpoint_every: u64,
    out: &'a std::path::Path,
    pretrain_config: &'a PretrainConfig,
}

impl TrainObserver for RunLogger<'_> {
    fn on_step(
        &mut self,
        state: &StudentTeacherState,
        batch: &PretrainBatch,
        losses: &LossBreakdown,
    ) -> Result<()> {
        let line = LossLine {
            step: state.step,
            intra: losses.intra,
            inter: losses.inter,
            reg: losses.reg,
            total: losses.total,
        };
        let json = serde_json::to_string(&line)
            .map_err(|e| Error::Format(format!("loss log line: {e}")))?;
        writeln!(self.loss_log, "{json}")
            .map_err(|e| Error::io(self.out.join("loss_log.jsonl"), e))?;
        if let Some(crop_log) = &mut self.crop_log {
            let record = serde_json::to_string(&batch.layout_record(state.step))
                .map_err(|e| Error::Format(format!("crop log line: {e}")))?;
            writeln!(crop_log, "{record}")
                .map_err(|e| Error::io(self.out.join("crops_log.jsonl"), e))?;
        }
        if self.checkpoint_every > 0 && state.step % self.checkpoint_every == 0 {
            let path = self.out.join(format!("checkpoint_step{}.svck", state.step));
            save_state(state, self.pretrain_config, &path)?;
        }
        Ok(())
    }
}

/// Preprocess a loaded dataset into pretraining slice stacks.
pub fn preprocess_pool(config: &RunConfig, dirs: &[&std::path::Path]) -> Result<(Vec<SliceStack>, Vec<String>)> {
    let mut stacks = Vec::new();
    let mut digests = Vec::new();
    for dir in dirs {
        let dataset = load_dataset(dir)?;
        digests.push(dataset.digest.clone());
        for (_, volume) in &dataset.volumes {
            stacks.push(preprocess(volume, &config.preprocess_pretrain)?);
        }
    }
    Ok((stacks, digests))
}

pub fn cmd_pretrain(args: &PretrainArgs) -> Result<()> {
    let config = &args.config;
    // Validate inputs before any output exists, so a missing dataset leaves
    // no partial checkpoint behind.
    let mut dirs: Vec<&std::path::Path> = vec![&args.data];
    if let Some(extra) = &args.extra_unlabeled {
        dirs.push(extra);
    }
    let (stacks, digests) = preprocess_pool(config, &dirs)?;
    config.pretrain.validate()?;

    ensure_dir(&args.out)?;
    let loss_path = args.out.join("loss_log.jsonl");
    let loss_log = BufWriter::new(File::create(&loss_path).map_err(|e| Error::io(&loss_path, e))?);
    let crop_log = if args.crop_log {
        let path = args.out.join("crops_log.jsonl");
        Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
    } else {
        None
    };
    let mut logger = RunLogger {
        loss_log,
        crop_log,
        checkpoint_every: config.pretrain.checkpoint_every,
        out: &args.out,
        pretrain_config: &config.pretrain,
    };

    let start = Instant::now();
    let initial = init_state(&config.pretrain)?;
    let state = run_pretraining_from(initial, &config.pretrain, &stacks, &mut logger)?;
    let elapsed = start.elapsed().as_secs_f64();
    logger.loss_log.flush().map_err(|e| Error::io(&loss_path, e))?;
    if let Some(mut crop_log) = logger.crop_log.take() {
        crop_log.flush().map_err(|e| Error::io(args.out.join("crops_log.jsonl"), e))?;
    }

    // Final checkpoint via a serialized buffer and atomic rename.
    let ckpt = state_to_checkpoint(&state, &config.pretrain)?;
    let mut bytes = Vec::new();
    slicevoco_core::nn::checkpoint::save_checkpoint_to(&ckpt, &mut bytes)?;
    atomic_write(&args.out.join("checkpoint.svck"), &bytes)?;

    let throughput = Throughput {
        steps: state.step,
        elapsed_seconds: elapsed,
        steps_per_second: if elapsed > 0.0 { state.step as f64 / elapsed } else { 0.0 },
        patients_per_batch: config.pretrain.patients_per_batch,
    };
    atomic_write(
        &args.out.join("throughput.json"),
        serde_json::to_string_pretty(&throughput)
            .map_err(|e| Error::Format(format!("throughput: {e}")))?
            .as_bytes(),
    )?;

    let mut manifest = Manifest::new(
        "pretrain",
        config.seed,
        serde_json::to_value(config).unwrap_or_default(),
    )
    .input("data", args.data.display().to_string())
    .input("data_digest", digests[0].clone());
    if let Some(extra) = &args.extra_unlabeled {
        manifest = manifest
            .input("extra_unlabeled", extra.display().to_string())
            .input("extra_unlabeled_digest", digests[1].clone())
            .note(format!("merged pool size: {} volumes", stacks.len()));
    }
    manifest.write(&args.out)?;
    Ok(())
}
