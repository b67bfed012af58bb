//! The self-supervised training loop: batch assembly over distinct patients,
//! student forward/backward on the combined objective, the teacher EMA
//! update, and deterministic, resumable execution.
//!
//! Per step and patient: the student encodes the random crop and the base
//! crops; the teacher encodes both with no gradient. The intra term drives
//! cos(student random, teacher base_i) toward the overlap target r_i; the
//! inter term aligns student cross-patient similarities with the teacher's;
//! the reg term pushes the student's base-crop embeddings apart. The student
//! takes an optimizer step on the weighted sum, then the teacher moves by
//! EMA. The generator for step k is derived from (seed, k), so resuming from
//! a checkpoint replays the identical run.

use serde::{Deserialize, Serialize};

use crate::crop::{
    self, CropBox, CropGridSpec, OverlapMeasure, OverlapVector, Patch,
};
use crate::data::SliceStack;
use crate::error::{Error, Result};
use crate::loss::{self, LossBreakdown};
use crate::nn::encoder::{self, EncoderConfig};
use crate::nn::params::ParameterSet;
use crate::nn::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::rng::{rng_for, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd
    }
}

/// Grid geometry knobs; cell sizes default to slice extent / count, and the
/// random crop defaults to the cell size (perfect alignment then gives
/// r = 1). A larger random crop spreads the overlap targets over more cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
    pub crop_w: Option<usize>,
    pub crop_h: Option<usize>,
    #[serde(default)]
    pub rand_crop_w: Option<usize>,
    #[serde(default)]
    pub rand_crop_h: Option<usize>,
    #[serde(default)]
    pub overlap_measure: OverlapMeasure,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            rows: 4,
            cols: 4,
            crop_w: None,
            crop_h: None,
            rand_crop_w: None,
            rand_crop_h: None,
            overlap_measure: OverlapMeasure::Iou,
        }
    }
}

impl GridConfig {
    pub fn spec_for(&self, slice_w: usize, slice_h: usize) -> Result<CropGridSpec> {
        let crop_w = self.crop_w.unwrap_or(slice_w / self.cols.max(1));
        let crop_h = self.crop_h.unwrap_or(slice_h / self.rows.max(1));
        CropGridSpec::new(self.rows, self.cols, crop_w, crop_h, slice_w, slice_h)
    }

    /// Random-crop extent; the cell size unless overridden.
    pub fn random_crop_size(&self, spec: &CropGridSpec) -> (usize, usize) {
        (self.rand_crop_w.unwrap_or(spec.crop_w), self.rand_crop_h.unwrap_or(spec.crop_h))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: u64,
    pub patients_per_batch: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub ema_momentum: f64,
    pub loss_weights: [f64; 3],
    pub rng_seed: u64,
    /// 0 means a final checkpoint only.
    #[serde(default)]
    pub checkpoint_every: u64,
    pub grid: GridConfig,
    pub encoder: EncoderConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 500,
            patients_per_batch: 4,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Sgd,
            ema_momentum: 0.99,
            loss_weights: [1.0, 1.0, 1.0],
            rng_seed: 0,
            checkpoint_every: 0,
            grid: GridConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patients_per_batch < 2 {
            return Err(Error::InvalidArgument(
                "patients_per_batch must be at least 2 (the inter loss needs a pair)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::InvalidArgument(format!(
                "ema_momentum {} outside [0, 1]",
                self.ema_momentum
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.loss_weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "loss weights {:?} must be >= 0",
                self.loss_weights
            )));
        }
        self.encoder.validate()
    }
}

#[derive(Debug, Clone)]
enum OptState {
    Sgd,
    Adam { m: ParameterSet, v: ParameterSet, t: u64 },
}

/// Paired student/teacher parameters plus the optimizer state.
#[derive(Debug, Clone)]
pub struct StudentTeacherState {
    pub student: ParameterSet,
    pub teacher: ParameterSet,
    pub momentum: f64,
    pub step: u64,
    opt: OptState,
}

/// Fresh state: seeded student init, teacher an exact copy.
pub fn init_state(config: &PretrainConfig) -> Result<StudentTeacherState> {
    config.validate()?;
    let mut rng = rng_for(config.rng_seed, stream::PARAM_INIT, 0);
    let student = encoder::init_params(&config.encoder, &mut rng)?;
    let teacher = student.clone();
    let opt = match config.optimizer {
        OptimizerKind::Sgd => OptState::Sgd,
        OptimizerKind::Adam => {
            OptState::Adam { m: student.zeros_like(), v: student.zeros_like(), t: 0 }
        }
    };
    Ok(StudentTeacherState { student, teacher, momentum: config.ema_momentum, step: 0, opt })
}

/// Teacher moves toward the student: `t <- m*t + (1-m)*s`, student untouched.
pub fn ema_update(state: &mut StudentTeacherState) -> Result<()> {
    state.teacher.assert_compatible(&state.student)?;
    let m = state.momentum;
    for ((_, t), (_, s)) in state.teacher.iter_mut().zip(state.student.iter()) {
        for (tv, sv) in t.data.iter_mut().zip(&s.data) {
            *tv = m * *tv + (1.0 - m) * sv;
        }
    }
    Ok(())
}

/// One patient's geometry and pixels for a step.
#[derive(Debug, Clone)]
pub struct PatientSample {
    pub patient_id: String,
    pub slice_index: usize,
    pub slice_h: usize,
    pub slice_w: usize,
    pub slice: Vec<f32>,
    pub grid: Vec<CropBox>,
    pub random_crop: CropBox,
    pub overlaps: OverlapVector,
}

#[derive(Debug, Clone)]
pub struct PretrainBatch {
    pub patients: Vec<PatientSample>,
}

/// Serializable geometry summary for the crop debug log.
#[derive(Debug, Clone, Serialize)]
pub struct CropLayoutRecord<'a> {
    pub step: u64,
    pub patients: Vec<CropLayoutPatient<'a>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CropLayoutPatient<'a> {
    pub patient_id: &'a str,
    pub slice_index: usize,
    pub random_crop: &'a CropBox,
    pub r: &'a [f64],
}

impl PretrainBatch {
    pub fn layout_record(&self, step: u64) -> CropLayoutRecord<'_> {
        CropLayoutRecord {
            step,
            patients: self
                .patients
                .iter()
                .map(|p| CropLayoutPatient {
                    patient_id: &p.patient_id,
                    slice_index: p.slice_index,
                    random_crop: &p.random_crop,
                    r: &p.overlaps.r,
                })
                .collect(),
        }
    }
}

fn patch_of(sample: &PatientSample, b: &CropBox) -> Patch {
    let mut values = Vec::with_capacity(b.w * b.h);
    for dy in 0..b.h {
        let row = (b.y0 + dy) * sample.slice_w + b.x0;
        values.extend_from_slice(&sample.slice[row..row + b.w]);
    }
    Patch { h: b.h, w: b.w, values }
}

/// P distinct patients, each with a sampled slice, the base grid, a random
/// crop, and its overlap targets. Deterministic given the generator state.
pub fn assemble_batch(
    stacks: &[SliceStack],
    grid: &GridConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
    patients: usize,
) -> Result<PretrainBatch> {
    use rand::Rng;
    if patients < 2 {
        return Err(Error::InvalidArgument("a batch needs at least 2 patients".into()));
    }
    if stacks.len() < patients {
        return Err(Error::Data(format!(
            "need {patients} distinct patients, have {}",
            stacks.len()
        )));
    }
    // Partial Fisher-Yates over indices for a deterministic distinct sample.
    let mut indices: Vec<usize> = (0..stacks.len()).collect();
    for k in 0..patients {
        let j = rng.gen_range(k..indices.len());
        indices.swap(k, j);
    }
    let mut samples = Vec::with_capacity(patients);
    for &idx in &indices[..patients] {
        let stack = &stacks[idx];
        let [t_len, slice_h, slice_w] = stack.shape();
        let spec = grid.spec_for(slice_w, slice_h)?;
        let slice_index = rng.gen_range(0..t_len);
        let grid_boxes = crop::make_base_grid(&spec, slice_index)?;
        let (rc_w, rc_h) = grid.random_crop_size(&spec);
        let random_crop = crop::sample_random_crop_sized(&spec, rc_w, rc_h, slice_index, rng)?;
        let overlaps = crop::overlap_vector_with(grid.overlap_measure, &random_crop, &grid_boxes)?;
        samples.push(PatientSample {
            patient_id: stack.source_patient_id.clone(),
            slice_index,
            slice_h,
            slice_w,
            slice: stack.slice(slice_index).to_vec(),
            grid: grid_boxes,
            random_crop,
            overlaps,
        });
    }
    for i in 0..samples.len() {
        for j in (i + 1)..samples.len() {
            if samples[i].patient_id == samples[j].patient_id {
                return Err(Error::Data(format!(
                    "duplicate patient id {:?} in the pool",
                    samples[i].patient_id
                )));
            }
        }
    }
    Ok(PretrainBatch { patients: samples })
}

fn apply_optimizer(
    opt: &mut OptState,
    params: &mut ParameterSet,
    grads: &ParameterSet,
    lr: f64,
) -> Result<()> {
    match opt {
        OptState::Sgd => params.axpy(-lr, grads),
        OptState::Adam { m, v, t } => {
            let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
            *t += 1;
            let t_f = *t as f64;
            let c1 = 1.0 - b1.powf(t_f);
            let c2 = 1.0 - b2.powf(t_f);
            for (((_, p), (_, g)), ((_, ms), (_, vs))) in params
                .iter_mut()
                .zip(grads.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                for i in 0..p.data.len() {
                    let gi = g.data[i];
                    ms.data[i] = b1 * ms.data[i] + (1.0 - b1) * gi;
                    vs.data[i] = b2 * vs.data[i] + (1.0 - b2) * gi * gi;
                    let mhat = ms.data[i] / c1;
                    let vhat = vs.data[i] / c2;
                    p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
            Ok(())
        }
    }
}

struct PatientForward {
    random_trace: encoder::PatchTrace,
    base_traces: Vec<encoder::PatchTrace>,
    teacher_random: Vec<f64>,
    teacher_bases: Vec<Vec<f64>>,
    d_random: Vec<f64>,
    d_bases: Vec<Vec<f64>>,
}

/// One optimizer step on a batch; returns the loss breakdown.
pub fn pretrain_step(
    state: &mut StudentTeacherState,
    batch: &PretrainBatch,
    config: &PretrainConfig,
) -> Result<LossBreakdown> {
    config.validate()?;
    let p_count = batch.patients.len();
    if p_count < 2 {
        return Err(Error::InvalidArgument("pretrain batch needs at least 2 patients".into()));
    }
    let d = config.encoder.embedding_dim;
    let cfg = &config.encoder;

    let mut forwards = Vec::with_capacity(p_count);
    for sample in &batch.patients {
        let random_patch = patch_of(sample, &sample.random_crop);
        let random_trace = encoder::forward_patch(&state.student, cfg, &random_patch)?;
        let mut base_traces = Vec::with_capacity(sample.grid.len());
        let mut teacher_bases = Vec::with_capacity(sample.grid.len());
        for cell in &sample.grid {
            let patch = patch_of(sample, cell);
            base_traces.push(encoder::forward_patch(&state.student, cfg, &patch)?);
            teacher_bases.push(encoder::encode_patch(&state.teacher, cfg, &patch)?);
        }
        let teacher_random = encoder::encode_patch(&state.teacher, cfg, &random_patch)?;
        let n_cells = sample.grid.len();
        forwards.push(PatientForward {
            random_trace,
            base_traces,
            teacher_random,
            teacher_bases,
            d_random: vec![0.0; d],
            d_bases: vec![vec![0.0; d]; n_cells],
        });
    }

    let [w_intra, w_inter, w_reg] = config.loss_weights;

    // Intra, symmetrized over the branch assignment the way the inter loss
    // averages its two pair directions: the student random crop against the
    // teacher's base-crop anchors, plus the student base crops against the
    // teacher's random-crop anchor. Gradients flow through the student side
    // of each direction only, so both halves of the student's geometry get
    // stable targets.
    let mut intra_sum = 0.0;
    for (sample, fwd) in batch.patients.iter().zip(forwards.iter_mut()) {
        let sims_crop: Vec<f64> = fwd
            .teacher_bases
            .iter()
            .map(|tb| loss::cosine_similarity(&fwd.random_trace.embedding, tb))
            .collect::<Result<_>>()?;
        let (l_crop, d_sims_crop) = loss::intra_loss_grad(&sims_crop, &sample.overlaps.r)?;
        let sims_base: Vec<f64> = fwd
            .base_traces
            .iter()
            .map(|bt| loss::cosine_similarity(&fwd.teacher_random, &bt.embedding))
            .collect::<Result<_>>()?;
        let (l_base, d_sims_base) = loss::intra_loss_grad(&sims_base, &sample.overlaps.r)?;
        intra_sum += 0.5 * (l_crop + l_base);
        let scale = 0.5 * w_intra / p_count as f64;
        if scale > 0.0 {
            for (i, tb) in fwd.teacher_bases.iter().enumerate() {
                if d_sims_crop[i] == 0.0 {
                    continue;
                }
                let (_, g_random, _) = loss::cosine_grad(&fwd.random_trace.embedding, tb)?;
                for (acc, g) in fwd.d_random.iter_mut().zip(&g_random) {
                    *acc += scale * d_sims_crop[i] * g;
                }
            }
            for (i, bt) in fwd.base_traces.iter().enumerate() {
                if d_sims_base[i] == 0.0 {
                    continue;
                }
                let (_, _, g_base) = loss::cosine_grad(&fwd.teacher_random, &bt.embedding)?;
                for (acc, g) in fwd.d_bases[i].iter_mut().zip(&g_base) {
                    *acc += scale * d_sims_base[i] * g;
                }
            }
        }
    }
    let intra = intra_sum / p_count as f64;

    // Inter: ordered cross-patient pairs (random crop from A, bases from B).
    let pair_count = (p_count * (p_count - 1)) as f64;
    let mut inter_sum = 0.0;
    for a in 0..p_count {
        for b in 0..p_count {
            if a == b {
                continue;
            }
            let (fa, fb) = if a < b {
                let (lo, hi) = forwards.split_at_mut(b);
                (&mut lo[a], &mut hi[0])
            } else {
                let (lo, hi) = forwards.split_at_mut(a);
                (&mut hi[0], &mut lo[b])
            };
            let teacher_sims: Vec<f64> = fb
                .teacher_bases
                .iter()
                .map(|tb| loss::cosine_similarity(&fa.teacher_random, tb))
                .collect::<Result<_>>()?;
            let student_sims: Vec<f64> = fb
                .base_traces
                .iter()
                .map(|bt| loss::cosine_similarity(&fa.random_trace.embedding, &bt.embedding))
                .collect::<Result<_>>()?;
            let (l, d_sims) = loss::inter_loss_grad(&teacher_sims, &student_sims)?;
            inter_sum += l;
            let scale = w_inter / pair_count;
            if scale > 0.0 {
                for (i, bt) in fb.base_traces.iter().enumerate() {
                    if d_sims[i] == 0.0 {
                        continue;
                    }
                    let (_, g_a, g_b) =
                        loss::cosine_grad(&fa.random_trace.embedding, &bt.embedding)?;
                    for (acc, g) in fa.d_random.iter_mut().zip(&g_a) {
                        *acc += scale * d_sims[i] * g;
                    }
                    for (acc, g) in fb.d_bases[i].iter_mut().zip(&g_b) {
                        *acc += scale * d_sims[i] * g;
                    }
                }
            }
        }
    }
    let inter = inter_sum / pair_count;

    // Reg: student base embeddings per patient.
    let mut reg_sum = 0.0;
    for fwd in forwards.iter_mut() {
        let embs: Vec<Vec<f64>> = fwd.base_traces.iter().map(|t| t.embedding.clone()).collect();
        let (l, d_embs) = loss::reg_loss_grad(&embs)?;
        reg_sum += l;
        let scale = w_reg / p_count as f64;
        if scale > 0.0 {
            for (acc_vec, g_vec) in fwd.d_bases.iter_mut().zip(&d_embs) {
                for (acc, g) in acc_vec.iter_mut().zip(g_vec) {
                    *acc += scale * g;
                }
            }
        }
    }
    let reg = reg_sum / p_count as f64;

    let breakdown = loss::total_loss(intra, inter, reg, config.loss_weights)?;
    if !breakdown.total.is_finite() {
        let dump = serde_json::to_string(&batch.layout_record(state.step)).ok();
        return Err(Error::NonFinite { context: format!("pretrain step {}", state.step), dump });
    }

    let mut grads = state.student.zeros_like();
    for fwd in &forwards {
        if fwd.d_random.iter().any(|&g| g != 0.0) {
            encoder::backward_patch(&state.student, cfg, &fwd.random_trace, &fwd.d_random, &mut grads)?;
        }
        for (trace, d_emb) in fwd.base_traces.iter().zip(&fwd.d_bases) {
            if d_emb.iter().any(|&g| g != 0.0) {
                encoder::backward_patch(&state.student, cfg, trace, d_emb, &mut grads)?;
            }
        }
    }
    if !grads.all_finite() {
        let dump = serde_json::to_string(&batch.layout_record(state.step)).ok();
        return Err(Error::NonFinite { context: format!("gradients at step {}", state.step), dump });
    }
    apply_optimizer(&mut state.opt, &mut state.student, &grads, config.learning_rate)?;
    ema_update(state)?;
    state.step += 1;
    Ok(breakdown)
}

/// Observer hook invoked after every step.
pub trait TrainObserver {
    fn on_step(
        &mut self,
        state: &StudentTeacherState,
        batch: &PretrainBatch,
        losses: &LossBreakdown,
    ) -> Result<()>;
}

/// Discards everything.
pub struct NoopObserver;

impl TrainObserver for NoopObserver {
    fn on_step(
        &mut self,
        _: &StudentTeacherState,
        _: &PretrainBatch,
        _: &LossBreakdown,
    ) -> Result<()> {
        Ok(())
    }
}

/// Run from a fresh state to `config.steps`.
pub fn run_pretraining(
    config: &PretrainConfig,
    stacks: &[SliceStack],
    observer: &mut dyn TrainObserver,
) -> Result<StudentTeacherState> {
    let state = init_state(config)?;
    run_pretraining_from(state, config, stacks, observer)
}

/// Continue a (possibly restored) state to `config.steps`. Because step k's
/// batch generator depends only on (seed, k), a resumed run is bitwise equal
/// to an uninterrupted one.
pub fn run_pretraining_from(
    mut state: StudentTeacherState,
    config: &PretrainConfig,
    stacks: &[SliceStack],
    observer: &mut dyn TrainObserver,
) -> Result<StudentTeacherState> {
    config.validate()?;
    while state.step < config.steps {
        let mut rng = rng_for(config.rng_seed, stream::PRETRAIN_BATCH, state.step);
        let batch = assemble_batch(stacks, &config.grid, &mut rng, config.patients_per_batch)?;
        let losses = pretrain_step(&mut state, &batch, config)?;
        observer.on_step(&state, &batch, &losses)?;
    }
    Ok(state)
}

const CKPT_KIND: &str = "student_teacher";

/// Serialize the full state (including optimizer moments under Adam).
pub fn state_to_checkpoint(state: &StudentTeacherState, config: &PretrainConfig) -> Result<Checkpoint> {
    let mut extras = std::collections::BTreeMap::new();
    extras.insert("momentum".to_string(), serde_json::json!(state.momentum));
    extras.insert("step".to_string(), serde_json::json!(state.step));
    let mut sections = vec![
        ("student".to_string(), state.student.clone()),
        ("teacher".to_string(), state.teacher.clone()),
    ];
    if let OptState::Adam { m, v, t } = &state.opt {
        extras.insert("adam_t".to_string(), serde_json::json!(*t));
        sections.push(("adam_m".to_string(), m.clone()));
        sections.push(("adam_v".to_string(), v.clone()));
    }
    Ok(Checkpoint {
        kind: CKPT_KIND.to_string(),
        config: serde_json::to_value(config)
            .map_err(|e| Error::Format(format!("config echo: {e}")))?,
        extras,
        sections,
    })
}

pub fn state_from_checkpoint(ckpt: &Checkpoint) -> Result<StudentTeacherState> {
    if ckpt.kind != CKPT_KIND {
        return Err(Error::Format(format!(
            "expected a {CKPT_KIND} checkpoint, found {:?}",
            ckpt.kind
        )));
    }
    let student = ckpt.section("student")?.clone();
    let teacher = ckpt.section("teacher")?.clone();
    student.assert_compatible(&teacher)?;
    let opt = if ckpt.extras.contains_key("adam_t") {
        OptState::Adam {
            m: ckpt.section("adam_m")?.clone(),
            v: ckpt.section("adam_v")?.clone(),
            t: ckpt.extra_u64("adam_t")?,
        }
    } else {
        OptState::Sgd
    };
    Ok(StudentTeacherState {
        student,
        teacher,
        momentum: ckpt.extra_f64("momentum")?,
        step: ckpt.extra_u64("step")?,
        opt,
    })
}

pub fn save_state(
    state: &StudentTeacherState,
    config: &PretrainConfig,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    save_checkpoint(&state_to_checkpoint(state, config)?, path)
}

pub fn load_state(path: impl AsRef<std::path::Path>) -> Result<StudentTeacherState> {
    state_from_checkpoint(&load_checkpoint(path)?)
}
