//! `bench`: measure pretraining throughput at several batch sizes and emit a
//! JSON report with a peak-memory estimate.

use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;

use slicevoco_core::pretrain::{assemble_batch, init_state, pretrain_step, PretrainConfig};
use slicevoco_core::rng::{rng_for, stream};
use slicevoco_core::Error;

use crate::config::RunConfig;
use crate::util::{atomic_write, ensure_dir, Manifest};

type Result<T> = std::result::Result<T, Error>;

pub struct BenchArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: RunConfig,
    pub timed_steps: u64,
}

#[derive(Debug, Serialize)]
struct BenchRow {
    patients_per_batch: usize,
    timed_steps: u64,
    seconds: f64,
    steps_per_second: f64,
    samples_per_second: f64,
    peak_memory_estimate_bytes: u64,
}

/// Rough upper bound: three parameter copies (student, teacher, gradients),
/// plus per-encoding activation traces for the student side of one batch.
fn memory_estimate(config: &PretrainConfig, params: usize, slice_w: usize, slice_h: usize) -> u64 {
    let crop_w = config.grid.crop_w.unwrap_or(slice_w / config.grid.cols.max(1));
    let crop_h = config.grid.crop_h.unwrap_or(slice_h / config.grid.rows.max(1));
    let cells = config.grid.rows * config.grid.cols;
    // Trace per encoding: input + three conv activations + vectors.
    let c1 = (crop_h.div_ceil(2)) * (crop_w.div_ceil(2)) * 16;
    let c2 = (crop_h.div_ceil(4)) * (crop_w.div_ceil(4)) * 32;
    let c3 = (crop_h.div_ceil(8)) * (crop_w.div_ceil(8)) * 64;
    let trace = crop_w * crop_h + c1 + c2 + c3 + 4 * config.encoder.embedding_dim;
    let traces = config.patients_per_batch * (cells + 1);
    ((3 * params + traces * trace) as u64) * 8
}

pub fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let config = &args.config;
    let (stacks, digests) =
        crate::commands::pretrain::preprocess_pool(config, &[args.data.as_path()])?;
    ensure_dir(&args.out)?;
    let [_, slice_h, slice_w] = config.preprocess_pretrain.target_shape;

    let mut rows = Vec::new();
    for patients in [2usize, 4, 8] {
        if stacks.len() < patients {
            continue;
        }
        let bench_config = PretrainConfig { patients_per_batch: patients, ..config.pretrain.clone() };
        let mut state = init_state(&bench_config)?;
        // Warm up, then time.
        for step in 0..2u64 {
            let mut rng = rng_for(config.seed, stream::PRETRAIN_BATCH, step);
            let batch = assemble_batch(&stacks, &bench_config.grid, &mut rng, patients)?;
            pretrain_step(&mut state, &batch, &bench_config)?;
        }
        let start = Instant::now();
        for step in 2..2 + args.timed_steps {
            let mut rng = rng_for(config.seed, stream::PRETRAIN_BATCH, step);
            let batch = assemble_batch(&stacks, &bench_config.grid, &mut rng, patients)?;
            pretrain_step(&mut state, &batch, &bench_config)?;
        }
        let seconds = start.elapsed().as_secs_f64();
        let steps_per_second = args.timed_steps as f64 / seconds.max(1e-9);
        rows.push(BenchRow {
            patients_per_batch: patients,
            timed_steps: args.timed_steps,
            seconds,
            steps_per_second,
            samples_per_second: steps_per_second * patients as f64,
            peak_memory_estimate_bytes: memory_estimate(
                &bench_config,
                state.student.num_values(),
                slice_w,
                slice_h,
            ),
        });
    }
    if rows.len() < 3 {
        return Err(Error::Data(format!(
            "bench needs at least 8 volumes to cover batch sizes 2/4/8, found {}",
            stacks.len()
        )));
    }
    atomic_write(
        &args.out.join("bench.json"),
        serde_json::to_string_pretty(&rows)
            .map_err(|e| Error::Format(format!("bench rows: {e}")))?
            .as_bytes(),
    )?;
    Manifest::new("bench", config.seed, serde_json::to_value(config).unwrap_or_default())
        .input("data", args.data.display().to_string())
        .input("data_digest", digests[0].clone())
        .write(&args.out)?;
    Ok(())
}
