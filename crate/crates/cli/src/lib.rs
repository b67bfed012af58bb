//! Library surface of the command-line harness, exposed so integration and
//! acceptance tests can drive full runs in-process.

pub mod commands;
pub mod config;
pub mod svg;
pub mod util;

pub use commands::{
    cmd_bench, cmd_compare, cmd_evaluate, cmd_finetune, cmd_pretrain, cmd_select_thresholds,
    cmd_synth, BenchArgs, CompareArgs, EvaluateArgs, FinetuneArgs, InitMode, PretrainArgs,
    SelectThresholdsArgs, SynthArgs,
};
pub use config::{ConfigFile, RunConfig};
pub use util::exit_code_for;
