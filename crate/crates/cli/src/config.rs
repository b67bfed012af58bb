//! Plain-text configuration files and the resolved run configuration.
//!
//! File format: `[section]` headers, `key = value` pairs, `#` comments and
//! blank lines ignored. Every knob has a default; the resolved configuration
//! (defaults included) is serialized into each run's manifest so nothing is
//! hidden. `--help` lists the same defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use slicevoco_core::crop::OverlapMeasure;
use slicevoco_core::data::PreprocessSpec;
use slicevoco_core::metrics::WeightTable;
use slicevoco_core::nn::encoder::{EncoderConfig, ProjectionKind};
use slicevoco_core::pretrain::{GridConfig, OptimizerKind, PretrainConfig};
use slicevoco_core::Error;

type Result<T> = std::result::Result<T, Error>;

/// Raw parsed key/value sections.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::InvalidArgument(msg) => {
                Error::InvalidArgument(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidArgument(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    lineno + 1
                )));
            };
            if current.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "line {}: key {key:?} appears before any [section]",
                    lineno + 1
                )));
            }
            sections
                .get_mut(&current)
                .expect("section entry exists")
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(ConfigFile { sections })
    }

    fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section).and_then(|s| s.get(key)).map(|s| s.as_str())
    }

    fn parse_as<T: std::str::FromStr>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|e| {
                Error::InvalidArgument(format!("config {section}.{key} = {s:?}: {e}"))
            }),
        }
    }

    fn parse_bool(&self, section: &str, key: &str, default: bool) -> Result<bool> {
        match self.raw(section, key) {
            None => Ok(default),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(other) => Err(Error::InvalidArgument(format!(
                "config {section}.{key} = {other:?}: expected true/false"
            ))),
        }
    }

    fn parse_shape(&self, section: &str, key: &str, default: [usize; 3]) -> Result<[usize; 3]> {
        match self.raw(section, key) {
            None => Ok(default),
            Some(s) => {
                let parts: Vec<&str> = s.split(',').map(|p| p.trim()).collect();
                if parts.len() != 3 {
                    return Err(Error::InvalidArgument(format!(
                        "config {section}.{key} = {s:?}: expected T,H,W"
                    )));
                }
                let mut shape = [0usize; 3];
                for (i, p) in parts.iter().enumerate() {
                    shape[i] = p.parse().map_err(|e| {
                        Error::InvalidArgument(format!("config {section}.{key} = {s:?}: {e}"))
                    })?;
                }
                Ok(shape)
            }
        }
    }

    fn parse_triple(&self, section: &str, key: &str, default: [f64; 3]) -> Result<[f64; 3]> {
        match self.raw(section, key) {
            None => Ok(default),
            Some(s) => {
                let parts: Vec<&str> = s.split(',').map(|p| p.trim()).collect();
                if parts.len() != 3 {
                    return Err(Error::InvalidArgument(format!(
                        "config {section}.{key} = {s:?}: expected three comma-separated numbers"
                    )));
                }
                let mut out = [0.0f64; 3];
                for (i, p) in parts.iter().enumerate() {
                    out[i] = p.parse().map_err(|e| {
                        Error::InvalidArgument(format!("config {section}.{key} = {s:?}: {e}"))
                    })?;
                }
                Ok(out)
            }
        }
    }

    /// Reject unknown keys so typos fail loudly.
    fn check_known(&self, known: &[(&str, &[&str])]) -> Result<()> {
        for (section, keys) in &self.sections {
            let Some((_, allowed)) = known.iter().find(|(s, _)| s == section) else {
                return Err(Error::InvalidArgument(format!(
                    "unknown config section [{section}]"
                )));
            };
            for key in keys.keys() {
                if !allowed.contains(&key.as_str()) {
                    return Err(Error::InvalidArgument(format!(
                        "unknown config key {section}.{key}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Synthesis knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub shape: [usize; 3],
    pub num_blobs: usize,
    pub class_prior: [f64; 3],
    /// Emit a labels CSV alongside the volumes.
    pub labeled: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 64,
            shape: [32, 96, 96],
            num_blobs: 3,
            class_prior: [0.5, 0.3, 0.2],
            labeled: true,
        }
    }
}

/// Downstream classifier knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub hidden: usize,
    pub layers: usize,
    pub pooling: String,
    pub mode: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cap on labeled training studies (0 = all).
    pub train_budget: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            hidden: 256,
            layers: 1,
            pooling: "mean".into(),
            mode: "full".into(),
            epochs: 8,
            batch_size: 8,
            learning_rate: 0.05,
            train_budget: 0,
        }
    }
}

/// Evaluation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub weight_table: WeightTable,
    pub split_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { weight_table: WeightTable::default(), split_seed: 17 }
    }
}

/// The complete resolved configuration; every run manifest embeds one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub single_thread: bool,
    pub synth: SynthConfig,
    pub preprocess_pretrain: PreprocessSpec,
    pub preprocess_downstream: PreprocessSpec,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            single_thread: true,
            synth: SynthConfig::default(),
            preprocess_pretrain: PreprocessSpec {
                target_shape: [32, 96, 96],
                ..PreprocessSpec::pretrain_default()
            },
            preprocess_downstream: PreprocessSpec {
                target_shape: [16, 64, 64],
                ..PreprocessSpec::downstream_default()
            },
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

const KNOWN_KEYS: &[(&str, &[&str])] = &[
    ("run", &["seed", "single_thread"]),
    ("synth", &["count", "shape", "blobs", "prior", "labeled"]),
    (
        "preprocess",
        &["window_center", "window_width", "shape", "foreground_crop", "threshold", "margin"],
    ),
    (
        "downstream",
        &["window_center", "window_width", "shape", "foreground_crop", "threshold", "margin"],
    ),
    ("grid", &["rows", "cols", "crop_w", "crop_h", "rand_crop_w", "rand_crop_h", "measure"]),
    ("encoder", &["embedding_dim", "projection"]),
    (
        "pretrain",
        &[
            "steps",
            "patients",
            "learning_rate",
            "optimizer",
            "ema_momentum",
            "w_intra",
            "w_inter",
            "w_reg",
            "checkpoint_every",
        ],
    ),
    (
        "finetune",
        &[
            "hidden",
            "layers",
            "pooling",
            "mode",
            "epochs",
            "batch_size",
            "learning_rate",
            "train_budget",
        ],
    ),
    ("eval", &["w_healthy", "w_low", "w_high", "split_seed"]),
];

impl RunConfig {
    /// Resolve a config file over the defaults.
    pub fn from_file(file: &ConfigFile) -> Result<RunConfig> {
        file.check_known(KNOWN_KEYS)?;
        let d = RunConfig::default();

        let preprocess = |section: &str, base: &PreprocessSpec| -> Result<PreprocessSpec> {
            Ok(PreprocessSpec {
                window_center: file.parse_as(section, "window_center", base.window_center)?,
                window_width: file.parse_as(section, "window_width", base.window_width)?,
                target_shape: file.parse_shape(section, "shape", base.target_shape)?,
                foreground_crop: file.parse_bool(section, "foreground_crop", base.foreground_crop)?,
                foreground_threshold_hu: file.parse_as(
                    section,
                    "threshold",
                    base.foreground_threshold_hu,
                )?,
                foreground_margin: file.parse_as(section, "margin", base.foreground_margin)?,
            })
        };

        let seed = file.parse_as("run", "seed", d.seed)?;
        let prior = file.parse_triple("synth", "prior", d.synth.class_prior)?;
        let synth = SynthConfig {
            count: file.parse_as("synth", "count", d.synth.count)?,
            shape: file.parse_shape("synth", "shape", d.synth.shape)?,
            num_blobs: file.parse_as("synth", "blobs", d.synth.num_blobs)?,
            class_prior: prior,
            labeled: file.parse_bool("synth", "labeled", d.synth.labeled)?,
        };

        let grid = GridConfig {
            rows: file.parse_as("grid", "rows", d.pretrain.grid.rows)?,
            cols: file.parse_as("grid", "cols", d.pretrain.grid.cols)?,
            crop_w: match file.raw("grid", "crop_w") {
                None => d.pretrain.grid.crop_w,
                Some(s) => Some(s.parse().map_err(|e| {
                    Error::InvalidArgument(format!("config grid.crop_w = {s:?}: {e}"))
                })?),
            },
            crop_h: match file.raw("grid", "crop_h") {
                None => d.pretrain.grid.crop_h,
                Some(s) => Some(s.parse().map_err(|e| {
                    Error::InvalidArgument(format!("config grid.crop_h = {s:?}: {e}"))
                })?),
            },
            rand_crop_w: match file.raw("grid", "rand_crop_w") {
                None => d.pretrain.grid.rand_crop_w,
                Some(s) => Some(s.parse().map_err(|e| {
                    Error::InvalidArgument(format!("config grid.rand_crop_w = {s:?}: {e}"))
                })?),
            },
            rand_crop_h: match file.raw("grid", "rand_crop_h") {
                None => d.pretrain.grid.rand_crop_h,
                Some(s) => Some(s.parse().map_err(|e| {
                    Error::InvalidArgument(format!("config grid.rand_crop_h = {s:?}: {e}"))
                })?),
            },
            overlap_measure: match file.raw("grid", "measure") {
                None => OverlapMeasure::Iou,
                Some("iou") => OverlapMeasure::Iou,
                Some("overlap_fraction") => OverlapMeasure::OverlapFraction,
                Some(other) => {
                    return Err(Error::InvalidArgument(format!(
                        "config grid.measure = {other:?}: expected iou or overlap_fraction"
                    )))
                }
            },
        };

        let encoder = EncoderConfig {
            embedding_dim: file.parse_as("encoder", "embedding_dim", 128usize)?,
            projection: match file.raw("encoder", "projection") {
                None => ProjectionKind::Linear,
                Some("linear") => ProjectionKind::Linear,
                Some("two_layer_mlp") => ProjectionKind::TwoLayerMlp,
                Some("none") => ProjectionKind::None,
                Some(other) => {
                    return Err(Error::InvalidArgument(format!(
                        "config encoder.projection = {other:?}"
                    )))
                }
            },
            ..EncoderConfig::default()
        };

        let pretrain = PretrainConfig {
            steps: file.parse_as("pretrain", "steps", d.pretrain.steps)?,
            patients_per_batch: file.parse_as("pretrain", "patients", d.pretrain.patients_per_batch)?,
            learning_rate: file.parse_as("pretrain", "learning_rate", d.pretrain.learning_rate)?,
            optimizer: match file.raw("pretrain", "optimizer") {
                None => OptimizerKind::Sgd,
                Some("sgd") => OptimizerKind::Sgd,
                Some("adam") => OptimizerKind::Adam,
                Some(other) => {
                    return Err(Error::InvalidArgument(format!(
                        "config pretrain.optimizer = {other:?}: expected sgd or adam"
                    )))
                }
            },
            ema_momentum: file.parse_as("pretrain", "ema_momentum", d.pretrain.ema_momentum)?,
            loss_weights: [
                file.parse_as("pretrain", "w_intra", 1.0f64)?,
                file.parse_as("pretrain", "w_inter", 1.0f64)?,
                file.parse_as("pretrain", "w_reg", 1.0f64)?,
            ],
            rng_seed: seed,
            checkpoint_every: file.parse_as("pretrain", "checkpoint_every", d.pretrain.checkpoint_every)?,
            grid,
            encoder,
        };

        let finetune = FinetuneConfig {
            hidden: file.parse_as("finetune", "hidden", d.finetune.hidden)?,
            layers: file.parse_as("finetune", "layers", d.finetune.layers)?,
            pooling: file.parse_as("finetune", "pooling", d.finetune.pooling.clone())?,
            mode: file.parse_as("finetune", "mode", d.finetune.mode.clone())?,
            epochs: file.parse_as("finetune", "epochs", d.finetune.epochs)?,
            batch_size: file.parse_as("finetune", "batch_size", d.finetune.batch_size)?,
            learning_rate: file.parse_as("finetune", "learning_rate", d.finetune.learning_rate)?,
            train_budget: file.parse_as("finetune", "train_budget", d.finetune.train_budget)?,
        };

        let eval = EvalConfig {
            weight_table: WeightTable {
                healthy: file.parse_as("eval", "w_healthy", 1.0f64)?,
                low: file.parse_as("eval", "w_low", 2.0f64)?,
                high: file.parse_as("eval", "w_high", 4.0f64)?,
            },
            split_seed: file.parse_as("eval", "split_seed", d.eval.split_seed)?,
        };

        Ok(RunConfig {
            seed,
            single_thread: file.parse_bool("run", "single_thread", d.single_thread)?,
            synth,
            preprocess_pretrain: preprocess("preprocess", &d.preprocess_pretrain)?,
            preprocess_downstream: preprocess("downstream", &d.preprocess_downstream)?,
            pretrain,
            finetune,
            eval,
        })
    }

    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => Self::from_file(&ConfigFile::load(p)?),
        }
    }
}

/// Defaults rendered for `--help`.
pub fn describe_defaults() -> String {
    let d = RunConfig::default();
    format!(
        "Config file keys and defaults (key = default):\n\
         [run] seed = {seed}; single_thread = {st}\n\
         [synth] count = {count}; shape = {sy0},{sy1},{sy2}; blobs = {blobs}; prior = {p0},{p1},{p2}; labeled = {labeled}\n\
         [preprocess] window_center = {wc}; window_width = {ww}; shape = {pp0},{pp1},{pp2}; foreground_crop = {fc}; threshold = {th}; margin = {mg}\n\
         [downstream] shape = {dd0},{dd1},{dd2} (other keys as [preprocess])\n\
         [grid] rows = {rows}; cols = {cols}; crop_w/crop_h = slice/cols, slice/rows; measure = iou\n\
         [encoder] embedding_dim = 128; projection = linear\n\
         [pretrain] steps = {steps}; patients = {pat}; learning_rate = {plr}; optimizer = sgd; ema_momentum = {mom}; w_intra = 1; w_inter = 1; w_reg = 1; checkpoint_every = 0\n\
         [finetune] hidden = {hid}; layers = {lay}; pooling = mean; mode = full; epochs = {ep}; batch_size = {bs}; learning_rate = {flr}; train_budget = 0 (all)\n\
         [eval] w_healthy = 1; w_low = 2; w_high = 4; split_seed = {ss}",
        seed = d.seed,
        st = d.single_thread,
        count = d.synth.count,
        sy0 = d.synth.shape[0], sy1 = d.synth.shape[1], sy2 = d.synth.shape[2],
        blobs = d.synth.num_blobs,
        p0 = d.synth.class_prior[0], p1 = d.synth.class_prior[1], p2 = d.synth.class_prior[2],
        labeled = d.synth.labeled,
        wc = d.preprocess_pretrain.window_center,
        ww = d.preprocess_pretrain.window_width,
        pp0 = d.preprocess_pretrain.target_shape[0], pp1 = d.preprocess_pretrain.target_shape[1], pp2 = d.preprocess_pretrain.target_shape[2],
        fc = d.preprocess_pretrain.foreground_crop,
        th = d.preprocess_pretrain.foreground_threshold_hu,
        mg = d.preprocess_pretrain.foreground_margin,
        dd0 = d.preprocess_downstream.target_shape[0], dd1 = d.preprocess_downstream.target_shape[1], dd2 = d.preprocess_downstream.target_shape[2],
        rows = d.pretrain.grid.rows,
        cols = d.pretrain.grid.cols,
        steps = d.pretrain.steps,
        pat = d.pretrain.patients_per_batch,
        plr = d.pretrain.learning_rate,
        mom = d.pretrain.ema_momentum,
        hid = d.finetune.hidden,
        lay = d.finetune.layers,
        ep = d.finetune.epochs,
        bs = d.finetune.batch_size,
        flr = d.finetune.learning_rate,
        ss = d.eval.split_seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_defaults() {
        let text = "\n# comment\n[pretrain]\nsteps = 42\n\n[eval]\nw_high = 8\n";
        let file = ConfigFile::parse(text).unwrap();
        let config = RunConfig::from_file(&file).unwrap();
        assert_eq!(config.pretrain.steps, 42);
        assert_eq!(config.eval.weight_table.high, 8.0);
        assert_eq!(config.eval.weight_table.low, 2.0);
        assert_eq!(config.synth.count, SynthConfig::default().count);
    }

    #[test]
    fn rejects_unknown_keys_and_sections() {
        let file = ConfigFile::parse("[pretrain]\nstepz = 3\n").unwrap();
        assert!(RunConfig::from_file(&file).is_err());
        let file = ConfigFile::parse("[wat]\nx = 1\n").unwrap();
        assert!(RunConfig::from_file(&file).is_err());
    }

    #[test]
    fn rejects_keys_outside_sections_and_bad_lines() {
        assert!(ConfigFile::parse("steps = 3\n").is_err());
        assert!(ConfigFile::parse("[a]\nnot a pair\n").is_err());
    }

    #[test]
    fn shape_and_prior_parsing() {
        let file =
            ConfigFile::parse("[synth]\nshape = 8, 24, 24\nprior = 0.2,0.3,0.5\nlabeled = false\n")
                .unwrap();
        let config = RunConfig::from_file(&file).unwrap();
        assert_eq!(config.synth.shape, [8, 24, 24]);
        assert_eq!(config.synth.class_prior, [0.2, 0.3, 0.5]);
        assert!(!config.synth.labeled);
    }

    #[test]
    fn seed_flows_into_pretrain_config() {
        let file = ConfigFile::parse("[run]\nseed = 99\n").unwrap();
        let config = RunConfig::from_file(&file).unwrap();
        assert_eq!(config.seed, 99);
        assert_eq!(config.pretrain.rng_seed, 99);
    }

    #[test]
    fn defaults_description_mentions_every_section() {
        let text = describe_defaults();
        for section in ["[run]", "[synth]", "[preprocess]", "[downstream]", "[grid]", "[encoder]", "[pretrain]", "[finetune]", "[eval]"] {
            assert!(text.contains(section), "{section} missing");
        }
    }
}
