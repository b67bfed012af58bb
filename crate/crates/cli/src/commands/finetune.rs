//! `finetune`: train the downstream classifier from either the pretrained
//! student backbone (`--init voco`) or a seed-random backbone
//! (`--init scratch`).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use slicevoco_core::classifier::{
    finetune_step, init_classifier_params, save_state, ClassifierConfig, ClassifierState,
    FinetuneMode, Pooling,
};
use slicevoco_core::data::labels::OrganLabelTriple;
use slicevoco_core::data::{preprocess, SliceStack};
use slicevoco_core::nn::encoder::init_params;
use slicevoco_core::pretrain::load_state as load_pretrain_state;
use slicevoco_core::rng::{rng_for, stream};
use slicevoco_core::metrics::make_split;
use slicevoco_core::Error;

use crate::config::{FinetuneConfig, RunConfig};
use crate::util::{ensure_dir, load_dataset, Manifest};

type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    Voco,
    Scratch,
}

impl InitMode {
    pub fn name(self) -> &'static str {
        match self {
            InitMode::Voco => "voco",
            InitMode::Scratch => "scratch",
        }
    }
}

pub struct FinetuneArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub init: InitMode,
    pub checkpoint: Option<PathBuf>,
    pub config: RunConfig,
}

pub fn parse_pooling(s: &str) -> Result<Pooling> {
    match s {
        "mean" => Ok(Pooling::Mean),
        "last_states" => Ok(Pooling::LastStates),
        other => Err(Error::InvalidArgument(format!(
            "finetune.pooling = {other:?}: expected mean or last_states"
        ))),
    }
}

pub fn parse_mode(s: &str) -> Result<FinetuneMode> {
    match s {
        "full" => Ok(FinetuneMode::Full),
        "frozen_backbone" => Ok(FinetuneMode::FrozenBackbone),
        other => Err(Error::InvalidArgument(format!(
            "finetune.mode = {other:?}: expected full or frozen_backbone"
        ))),
    }
}

pub fn classifier_config(config: &RunConfig, feature_dim: usize) -> Result<ClassifierConfig> {
    let ft: &FinetuneConfig = &config.finetune;
    Ok(ClassifierConfig {
        feature_dim,
        hidden: ft.hidden,
        layers: ft.layers,
        pooling: parse_pooling(&ft.pooling)?,
        finetune_mode: parse_mode(&ft.mode)?,
        organ_class_weights: [config.eval.weight_table; 3],
    })
}

#[derive(serde::Serialize)]
struct FinetuneLossLine {
    epoch: usize,
    step: u64,
    loss: f64,
}

pub fn cmd_finetune(args: &FinetuneArgs) -> Result<()> {
    let config = &args.config;
    let dataset = load_dataset(&args.data)?;
    let labeled = dataset.labeled()?;

    // Patient-level split; only train-side studies are used here.
    let ids: Vec<String> = labeled.iter().map(|(id, _, _)| id.clone()).collect();
    let plan = make_split(&ids, config.eval.split_seed)?;
    let mut train: Vec<(SliceStack, OrganLabelTriple)> = Vec::new();
    for (id, volume, triple) in &labeled {
        if plan.fold_of(id).is_some() {
            train.push((preprocess(volume, &config.preprocess_downstream)?, *triple));
        }
    }
    if config.finetune.train_budget > 0 {
        train.truncate(config.finetune.train_budget);
    }
    if train.is_empty() {
        return Err(Error::Data("no training studies after the split".into()));
    }

    // Backbone: pretrained student or seed-random.
    let (backbone, encoder_config, init_note) = match args.init {
        InitMode::Voco => {
            let path = args.checkpoint.as_ref().ok_or_else(|| {
                Error::InvalidArgument("--init voco requires --checkpoint".into())
            })?;
            let state = load_pretrain_state(path)?;
            let ckpt_dim = state
                .student
                .get("fc.b")
                .map(|b| b.len())
                .map_err(|_| Error::Format("checkpoint lacks the backbone fc layer".into()))?;
            if ckpt_dim != config.pretrain.encoder.embedding_dim {
                return Err(Error::Data(format!(
                    "checkpoint embedding_dim {ckpt_dim} does not match configured {}",
                    config.pretrain.encoder.embedding_dim
                )));
            }
            (state.student, config.pretrain.encoder, format!("voco:{}", path.display()))
        }
        InitMode::Scratch => {
            let mut rng = rng_for(config.seed, stream::PARAM_INIT, 1);
            let params = init_params(&config.pretrain.encoder, &mut rng)?;
            (params, config.pretrain.encoder, "scratch".to_string())
        }
    };

    let class_config = classifier_config(config, encoder_config.embedding_dim)?;
    let class_params =
        init_classifier_params(&class_config, &mut rng_for(config.seed, stream::CLASSIFIER_INIT, 0))?;
    let mut state = ClassifierState {
        backbone,
        encoder_config,
        params: class_params,
        config: class_config,
        step: 0,
    };

    ensure_dir(&args.out)?;
    let loss_path = args.out.join("loss_log.jsonl");
    let mut loss_log =
        BufWriter::new(File::create(&loss_path).map_err(|e| Error::io(&loss_path, e))?);

    let batch_size = config.finetune.batch_size.max(1);
    for epoch in 0..config.finetune.epochs {
        // Deterministic per-epoch shuffle.
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = rng_for(config.seed, stream::FINETUNE_BATCH, epoch as u64);
        slicevoco_core::rng::shuffle(&mut order, &mut rng);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<(SliceStack, OrganLabelTriple)> =
                chunk.iter().map(|&i| train[i].clone()).collect();
            let loss = finetune_step(&mut state, &batch, config.finetune.learning_rate)?;
            let line = FinetuneLossLine { epoch, step: state.step, loss };
            writeln!(
                loss_log,
                "{}",
                serde_json::to_string(&line).map_err(|e| Error::Format(format!("loss line: {e}")))?
            )
            .map_err(|e| Error::io(&loss_path, e))?;
        }
    }
    loss_log.flush().map_err(|e| Error::io(&loss_path, e))?;

    save_state(&state, args.out.join("classifier.svck"))?;
    Manifest::new("finetune", config.seed, serde_json::to_value(config).unwrap_or_default())
        .input("data", args.data.display().to_string())
        .input("data_digest", dataset.digest)
        .input("init", init_note)
        .input("train_studies", train.len().to_string())
        .note(format!("split_seed {} selects the train side", config.eval.split_seed))
        .write(&args.out)?;
    Ok(())
}
