//! Downstream multi-organ injury classifier: per-slice features from the
//! pretrained backbone, a bidirectional LSTM over the slice sequence,
//! temporal pooling, and three independent 3-class heads trained with
//! class-weighted cross-entropy.

use serde::{Deserialize, Serialize};

use crate::data::labels::{InjuryLabel, Organ, OrganLabelTriple};
use crate::data::{preprocess, PreprocessSpec, SliceStack, VolumeGrid};
use crate::error::{Error, Result};
use crate::metrics::WeightTable;
use crate::nn::encoder::{self, EncoderConfig};
use crate::nn::lstm::{self, BiLstmDims, BiLstmTrace};
use crate::nn::params::{Array, ParameterSet};
use crate::rng::sample_normal;

/// One feature row per axial slice, anatomical order, T x d.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFeatures {
    pub t_len: usize,
    pub dim: usize,
    pub rows: Vec<f64>,
}

impl SequenceFeatures {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.rows[t * self.dim..(t + 1) * self.dim]
    }
}

/// Per-organ 3-class probabilities; each triple sums to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyPrediction {
    /// Organ-major: probs[organ][class].
    pub probs: [[f64; 3]; 3],
}

impl StudyPrediction {
    pub fn uniform() -> Self {
        StudyPrediction { probs: [[1.0 / 3.0; 3]; 3] }
    }

    pub fn prob(&self, organ: Organ, class: InjuryLabel) -> f64 {
        self.probs[organ.index()][class.index()]
    }

    pub fn validate(&self) -> Result<()> {
        for organ in Organ::ALL {
            let row = self.probs[organ.index()];
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidArgument(format!(
                    "{} probabilities outside [0, 1]: {row:?}",
                    organ.name()
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "{} probabilities sum to {sum}, expected 1",
                    organ.name()
                )));
            }
        }
        Ok(())
    }

    pub fn argmax(&self) -> OrganLabelTriple {
        let mut triple = OrganLabelTriple::ALL_HEALTHY;
        for organ in Organ::ALL {
            let row = self.probs[organ.index()];
            let mut best = 0;
            for c in 1..3 {
                if row[c] > row[best] {
                    best = c;
                }
            }
            triple.set(organ, InjuryLabel::from_index(best).expect("index in range"));
        }
        triple
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean of the per-step 2h outputs.
    #[default]
    Mean,
    /// Concatenation of each direction's final hidden state.
    LastStates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Backbone and classifier both receive gradients.
    #[default]
    Full,
    /// Backbone stays bitwise frozen; only the classifier trains.
    FrozenBackbone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Input feature dimension (the encoder's embedding_dim).
    pub feature_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub pooling: Pooling,
    pub finetune_mode: FinetuneMode,
    /// Per-organ class weight tables for the training loss.
    pub organ_class_weights: [WeightTable; 3],
}

impl ClassifierConfig {
    pub fn new(feature_dim: usize) -> Self {
        ClassifierConfig {
            feature_dim,
            hidden: 256,
            layers: 1,
            pooling: Pooling::Mean,
            finetune_mode: FinetuneMode::Full,
            organ_class_weights: [WeightTable::default(); 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidArgument(format!("degenerate classifier config {self:?}")));
        }
        for w in &self.organ_class_weights {
            // Training weights may be zero (organ ablation); only reject
            // negatives and non-finite values.
            if [w.healthy, w.low, w.high].iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("negative class weight in {w:?}")));
            }
        }
        Ok(())
    }

    fn lstm_dims(&self) -> BiLstmDims {
        BiLstmDims { input_dim: self.feature_dim, hidden: self.hidden, layers: self.layers }
    }

    fn pooled_dim(&self) -> usize {
        2 * self.hidden
    }
}

fn head_name(organ: Organ, which: &str) -> String {
    format!("head.{}.{which}", organ.name())
}

/// LSTM plus head parameters.
pub fn init_classifier_params(
    config: &ClassifierConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<ParameterSet> {
    config.validate()?;
    let mut params = ParameterSet::new();
    lstm::init_bilstm_params(&config.lstm_dims(), rng, &mut params)?;
    let pooled = config.pooled_dim();
    let std = 1.0 / (pooled as f64).sqrt();
    for organ in Organ::ALL {
        let w: Vec<f64> = (0..3 * pooled).map(|_| std * sample_normal(rng)).collect();
        params.insert(head_name(organ, "w"), Array::new(vec![3, pooled], w)?)?;
        params.insert(head_name(organ, "b"), Array::zeros(vec![3]))?;
    }
    Ok(params)
}

/// Row t = backbone feature of slice t; order preserved.
pub fn extract_sequence_features(
    backbone: &ParameterSet,
    encoder_config: &EncoderConfig,
    stack: &SliceStack,
) -> Result<SequenceFeatures> {
    let [t_len, h, w] = stack.shape();
    let dim = encoder_config.embedding_dim;
    let mut rows = Vec::with_capacity(t_len * dim);
    for t in 0..t_len {
        let feature = encoder::encode_slice(backbone, encoder_config, h, w, stack.slice(t))?;
        rows.extend_from_slice(&feature);
    }
    Ok(SequenceFeatures { t_len, dim, rows })
}

fn softmax3(logits: &[f64; 3]) -> [f64; 3] {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = [(logits[0] - m).exp(), (logits[1] - m).exp(), (logits[2] - m).exp()];
    let sum: f64 = exps.iter().sum();
    [exps[0] / sum, exps[1] / sum, exps[2] / sum]
}

/// Caches for the classifier backward pass.
pub struct ClassifierTrace {
    lstm: BiLstmTrace,
    pooled: Vec<f64>,
    pub logits: [[f64; 3]; 3],
    pub prediction: StudyPrediction,
    t_len: usize,
}

/// Bi-LSTM over the feature rows, temporal pooling, three softmax heads.
pub fn forward_classifier(
    config: &ClassifierConfig,
    params: &ParameterSet,
    seq: &SequenceFeatures,
) -> Result<ClassifierTrace> {
    config.validate()?;
    if seq.dim != config.feature_dim {
        return Err(Error::InvalidArgument(format!(
            "feature dim {} does not match classifier config {}",
            seq.dim, config.feature_dim
        )));
    }
    let dims = config.lstm_dims();
    let lstm_trace = lstm::forward_bilstm(params, &dims, &seq.rows, seq.t_len)?;
    let two_h = config.pooled_dim();
    let pooled: Vec<f64> = match config.pooling {
        Pooling::Mean => {
            let mut acc = vec![0.0; two_h];
            for t in 0..seq.t_len {
                for (a, v) in acc.iter_mut().zip(&lstm_trace.outputs[t * two_h..(t + 1) * two_h]) {
                    *a += v;
                }
            }
            acc.iter().map(|v| v / seq.t_len as f64).collect()
        }
        Pooling::LastStates => {
            let h = config.hidden;
            let mut out = Vec::with_capacity(two_h);
            // Forward direction's last state lives at t = T-1, backward's at t = 0.
            out.extend_from_slice(&lstm_trace.outputs[(seq.t_len - 1) * two_h..(seq.t_len - 1) * two_h + h]);
            out.extend_from_slice(&lstm_trace.outputs[h..two_h]);
            out
        }
    };
    let mut logits = [[0.0f64; 3]; 3];
    let mut probs = [[0.0f64; 3]; 3];
    for organ in Organ::ALL {
        let w = params.get(&head_name(organ, "w"))?;
        let b = params.get(&head_name(organ, "b"))?;
        let mut l = [0.0f64; 3];
        for c in 0..3 {
            let row = &w.data[c * two_h..(c + 1) * two_h];
            l[c] = b.data[c] + row.iter().zip(&pooled).map(|(wi, xi)| wi * xi).sum::<f64>();
        }
        if l.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("{} head logits", organ.name())));
        }
        logits[organ.index()] = l;
        probs[organ.index()] = softmax3(&l);
    }
    let prediction = StudyPrediction { probs };
    Ok(ClassifierTrace { lstm: lstm_trace, pooled, logits, prediction, t_len: seq.t_len })
}

/// Class-weighted cross-entropy of a prediction: per organ
/// `w(y) * -ln p(y)`, summed over organs.
pub fn weighted_ce_loss(
    pred: &StudyPrediction,
    labels: &OrganLabelTriple,
    organ_weights: &[WeightTable; 3],
) -> f64 {
    Organ::ALL
        .iter()
        .map(|&organ| {
            let y = labels.get(organ);
            let w = organ_weights[organ.index()].weight(y);
            if w == 0.0 {
                return 0.0;
            }
            w * -pred.prob(organ, y).ln()
        })
        .sum()
}

/// Backward from the cross-entropy loss of one study. Accumulates classifier
/// gradients (scaled by `scale`, e.g. 1/batch) and returns the gradient
/// w.r.t. the feature rows for backbone fine-tuning.
pub fn backward_classifier(
    config: &ClassifierConfig,
    params: &ParameterSet,
    trace: &ClassifierTrace,
    labels: &OrganLabelTriple,
    scale: f64,
    grads: &mut ParameterSet,
) -> Result<Vec<f64>> {
    let two_h = config.pooled_dim();
    let mut d_pooled = vec![0.0; two_h];
    for organ in Organ::ALL {
        let y = labels.get(organ).index();
        let w_class = config.organ_class_weights[organ.index()]
            .weight(labels.get(organ));
        if w_class == 0.0 {
            continue;
        }
        let probs = trace.prediction.probs[organ.index()];
        // d loss / d logit_c = w * (softmax_c - [c == y]).
        let mut d_logits = [0.0f64; 3];
        for c in 0..3 {
            d_logits[c] = scale * w_class * (probs[c] - if c == y { 1.0 } else { 0.0 });
        }
        let w = params.get(&head_name(organ, "w"))?;
        let mut d_w = std::mem::take(&mut grads.get_mut(&head_name(organ, "w"))?.data);
        let mut d_b = std::mem::take(&mut grads.get_mut(&head_name(organ, "b"))?.data);
        for c in 0..3 {
            let g = d_logits[c];
            if g == 0.0 {
                continue;
            }
            d_b[c] += g;
            let row = &w.data[c * two_h..(c + 1) * two_h];
            let d_row = &mut d_w[c * two_h..(c + 1) * two_h];
            for i in 0..two_h {
                d_row[i] += g * trace.pooled[i];
                d_pooled[i] += g * row[i];
            }
        }
        grads.get_mut(&head_name(organ, "w"))?.data = d_w;
        grads.get_mut(&head_name(organ, "b"))?.data = d_b;
    }
    // Pooling backward.
    let t_len = trace.t_len;
    let mut d_outputs = vec![0.0; t_len * two_h];
    match config.pooling {
        Pooling::Mean => {
            for t in 0..t_len {
                for (dst, g) in
                    d_outputs[t * two_h..(t + 1) * two_h].iter_mut().zip(&d_pooled)
                {
                    *dst = g / t_len as f64;
                }
            }
        }
        Pooling::LastStates => {
            let h = config.hidden;
            d_outputs[(t_len - 1) * two_h..(t_len - 1) * two_h + h]
                .copy_from_slice(&d_pooled[..h]);
            d_outputs[h..two_h].copy_from_slice(&d_pooled[h..]);
        }
    }
    lstm::backward_bilstm(params, &config.lstm_dims(), &trace.lstm, &d_outputs, grads)
}

/// Training state for the fine-tuning stage.
#[derive(Debug, Clone)]
pub struct ClassifierState {
    pub backbone: ParameterSet,
    pub encoder_config: EncoderConfig,
    pub params: ParameterSet,
    pub config: ClassifierConfig,
    pub step: u64,
}

/// One SGD step over a batch of whole studies. Returns the mean loss.
pub fn finetune_step(
    state: &mut ClassifierState,
    batch: &[(SliceStack, OrganLabelTriple)],
    learning_rate: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty fine-tune batch".into()));
    }
    state.config.validate()?;
    let scale = 1.0 / batch.len() as f64;
    let mut class_grads = state.params.zeros_like();
    let mut backbone_grads = match state.config.finetune_mode {
        FinetuneMode::Full => Some(state.backbone.zeros_like()),
        FinetuneMode::FrozenBackbone => None,
    };
    let mut total_loss = 0.0;
    for (stack, labels) in batch {
        let [_, h, w] = stack.shape();
        // Keep per-slice traces only in full mode, where the backbone needs
        // the backward pass.
        let mut slice_traces = Vec::new();
        let seq = if backbone_grads.is_some() {
            let mut rows = Vec::with_capacity(stack.shape()[0] * state.encoder_config.embedding_dim);
            for t in 0..stack.shape()[0] {
                let trace = encoder::forward_trunk(
                    &state.backbone,
                    &state.encoder_config,
                    h,
                    w,
                    stack.slice(t),
                )?;
                rows.extend_from_slice(&trace.feature);
                slice_traces.push(trace);
            }
            SequenceFeatures {
                t_len: stack.shape()[0],
                dim: state.encoder_config.embedding_dim,
                rows,
            }
        } else {
            extract_sequence_features(&state.backbone, &state.encoder_config, stack)?
        };
        let trace = forward_classifier(&state.config, &state.params, &seq)?;
        let loss = weighted_ce_loss(&trace.prediction, labels, &state.config.organ_class_weights);
        if !loss.is_finite() {
            return Err(Error::non_finite("fine-tune loss"));
        }
        total_loss += loss;
        let d_seq = backward_classifier(
            &state.config,
            &state.params,
            &trace,
            labels,
            scale,
            &mut class_grads,
        )?;
        if let Some(bg) = backbone_grads.as_mut() {
            for (t, slice_trace) in slice_traces.iter().enumerate() {
                let d_feature = &d_seq[t * seq.dim..(t + 1) * seq.dim];
                encoder::backward_trunk(
                    &state.backbone,
                    &state.encoder_config,
                    slice_trace,
                    d_feature,
                    bg,
                )?;
            }
        }
    }
    state.params.axpy(-learning_rate, &class_grads)?;
    if let Some(bg) = backbone_grads {
        state.backbone.axpy(-learning_rate, &bg)?;
    }
    state.step += 1;
    Ok(total_loss * scale)
}

/// Preprocess a raw volume, extract features, and classify. Pure in inputs.
pub fn predict_study(
    state: &ClassifierState,
    volume: &VolumeGrid,
    spec: &PreprocessSpec,
) -> Result<StudyPrediction> {
    let stack = preprocess(volume, spec)?;
    predict_stack(state, &stack)
}

/// Classify an already-preprocessed slice stack.
pub fn predict_stack(state: &ClassifierState, stack: &SliceStack) -> Result<StudyPrediction> {
    let seq = extract_sequence_features(&state.backbone, &state.encoder_config, stack)?;
    let trace = forward_classifier(&state.config, &state.params, &seq)?;
    trace.prediction.validate()?;
    Ok(trace.prediction)
}

const CKPT_KIND: &str = "classifier";

/// Serialize the fine-tuning state (backbone + classifier parameters).
pub fn state_to_checkpoint(state: &ClassifierState) -> Result<crate::nn::Checkpoint> {
    let mut extras = std::collections::BTreeMap::new();
    extras.insert("step".to_string(), serde_json::json!(state.step));
    let config = serde_json::json!({
        "encoder": state.encoder_config,
        "classifier": state.config,
    });
    Ok(crate::nn::Checkpoint {
        kind: CKPT_KIND.to_string(),
        config,
        extras,
        sections: vec![
            ("backbone".to_string(), state.backbone.clone()),
            ("classifier".to_string(), state.params.clone()),
        ],
    })
}

pub fn state_from_checkpoint(ckpt: &crate::nn::Checkpoint) -> Result<ClassifierState> {
    if ckpt.kind != CKPT_KIND {
        return Err(Error::Format(format!(
            "expected a {CKPT_KIND} checkpoint, found {:?}",
            ckpt.kind
        )));
    }
    let encoder_config: EncoderConfig =
        serde_json::from_value(ckpt.config.get("encoder").cloned().unwrap_or_default())
            .map_err(|e| Error::Format(format!("checkpoint encoder config: {e}")))?;
    let config: ClassifierConfig =
        serde_json::from_value(ckpt.config.get("classifier").cloned().unwrap_or_default())
            .map_err(|e| Error::Format(format!("checkpoint classifier config: {e}")))?;
    Ok(ClassifierState {
        backbone: ckpt.section("backbone")?.clone(),
        encoder_config,
        params: ckpt.section("classifier")?.clone(),
        config,
        step: ckpt.extra_u64("step")?,
    })
}

pub fn save_state(state: &ClassifierState, path: impl AsRef<std::path::Path>) -> Result<()> {
    crate::nn::save_checkpoint(&state_to_checkpoint(state)?, path)
}

pub fn load_state(path: impl AsRef<std::path::Path>) -> Result<ClassifierState> {
    state_from_checkpoint(&crate::nn::load_checkpoint(path)?)
}

const PREDICTIONS_HEADER: &str = "patient_id,kidney_healthy,kidney_low,kidney_high,liver_healthy,liver_low,liver_high,spleen_healthy,spleen_low,spleen_high";

/// Predictions CSV: one row per study, probabilities with 6 decimal digits.
pub fn write_predictions_csv(
    entries: &[(String, StudyPrediction)],
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(PREDICTIONS_HEADER);
    out.push('\n');
    for (id, pred) in entries {
        if id.is_empty() || id.contains(',') || id.contains('\n') {
            return Err(Error::InvalidArgument(format!("patient id {id:?} unusable in CSV")));
        }
        out.push_str(id);
        for organ in Organ::ALL {
            for class in InjuryLabel::ALL {
                out.push_str(&format!(",{:.9}", pred.prob(organ, class)));
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions_csv(
    path: impl AsRef<std::path::Path>,
) -> Result<Vec<(String, StudyPrediction)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == PREDICTIONS_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "{}: expected predictions header, got {other:?}",
                path.display()
            )))
        }
    }
    let mut entries = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Format(format!(
                "{}: line {}: expected 10 fields, got {}",
                path.display(),
                lineno + 2,
                fields.len()
            )));
        }
        let mut probs = [[0.0f64; 3]; 3];
        for organ in 0..3 {
            for class in 0..3 {
                probs[organ][class] = fields[1 + organ * 3 + class].parse().map_err(|e| {
                    Error::Format(format!("{}: line {}: {e}", path.display(), lineno + 2))
                })?;
            }
        }
        // Files written with few decimal digits can be off by rounding; accept
        // small row-sum error and renormalize, reject anything larger.
        for row in probs.iter_mut() {
            let sum: f64 = row.iter().sum();
            if !(0.9999..=1.0001).contains(&sum) || row.iter().any(|p| !(0.0..=1.0001).contains(p)) {
                return Err(Error::Format(format!(
                    "{}: line {}: probabilities {row:?} do not form a distribution",
                    path.display(),
                    lineno + 2
                )));
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let pred = StudyPrediction { probs };
        pred.validate().map_err(|e| {
            Error::Format(format!("{}: line {}: {e}", path.display(), lineno + 2))
        })?;
        entries.push((fields[0].to_string(), pred));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests;
