//! Subcommand implementations. Each takes resolved arguments, performs the
//! run, and writes its outputs plus a manifest into the out directory.

mod bench;
mod compare;
mod evaluate;
mod finetune;
pub(crate) mod pretrain;
mod synth;

pub use bench::{cmd_bench, BenchArgs};
pub use compare::{cmd_compare, CompareArgs};
pub use evaluate::{cmd_evaluate, cmd_select_thresholds, EvaluateArgs, SelectThresholdsArgs};
pub use finetune::{cmd_finetune, FinetuneArgs, InitMode};
pub use pretrain::{cmd_pretrain, PretrainArgs};
pub use synth::{cmd_synth, SynthArgs};
