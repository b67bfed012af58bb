//! The tiny reference CNN.
//!
//! Pinned architecture: three 3x3 stride-2 conv blocks (channels 16, 32, 64,
//! each followed by tanh), global average pooling, a linear map to the
//! d-dimensional backbone feature, an optional SSL projection head, and L2
//! normalization. `encode_slice` returns the backbone feature (projection
//! bypassed, unnormalized); `encode_patch` returns the normalized projected
//! embedding. Global pooling makes the output dimension independent of the
//! input extent.
//!
//! Forward passes cache activations in a trace; backward passes consume the
//! trace and accumulate parameter gradients.

use serde::{Deserialize, Serialize};

use crate::crop::Patch;
use crate::error::{Error, Result};
use crate::rng::sample_normal;

use super::params::{Array, ParameterSet};

/// Conv channel widths, pinned.
pub const CONV_CHANNELS: [usize; 3] = [16, 32, 64];
/// GAP output width (last conv's channels).
pub const TRUNK_POOLED_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    TinyReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    #[default]
    Linear,
    TwoLayerMlp,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub embedding_dim: usize,
    pub input_channels: usize,
    pub projection: ProjectionKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::TinyReference,
            embedding_dim: 128,
            input_channels: 1,
            projection: ProjectionKind::Linear,
        }
    }
}

impl EncoderConfig {
    pub fn with_dim(embedding_dim: usize) -> Self {
        EncoderConfig { embedding_dim, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 8 {
            return Err(Error::InvalidArgument(format!(
                "embedding_dim {} below the minimum of 8",
                self.embedding_dim
            )));
        }
        if self.input_channels != 1 {
            return Err(Error::InvalidArgument(
                "the reference encoder supports exactly one input channel".into(),
            ));
        }
        Ok(())
    }
}

/// Inference surface an external backbone must provide to substitute for the
/// reference CNN; the in-repo training paths are specific to
/// [`EncoderKind::TinyReference`].
pub trait FeatureExtractor {
    fn embedding_dim(&self) -> usize;
    /// Normalized embedding of a patch.
    fn extract_patch(&self, patch: &Patch) -> Result<Vec<f64>>;
    /// Unnormalized per-slice feature (projection bypassed).
    fn extract_slice(&self, h: usize, w: usize, values: &[f32]) -> Result<Vec<f64>>;
}

/// The reference CNN viewed through the plug interface.
pub struct TinyReferenceExtractor<'a> {
    pub params: &'a ParameterSet,
    pub config: EncoderConfig,
}

impl FeatureExtractor for TinyReferenceExtractor<'_> {
    fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn extract_patch(&self, patch: &Patch) -> Result<Vec<f64>> {
        encode_patch(self.params, &self.config, patch)
    }

    fn extract_slice(&self, h: usize, w: usize, values: &[f32]) -> Result<Vec<f64>> {
        encode_slice(self.params, &self.config, h, w, values)
    }
}

#[inline]
fn conv_out_dim(n: usize) -> usize {
    (n - 1) / 2 + 1
}

/// Bias init scale; small but nonzero so a constant (even all-zero) input
/// still produces a nonzero pre-normalization feature, keeping the unit-norm
/// output contract total.
const BIAS_INIT_STD: f64 = 0.01;

/// Fan-in-scaled normal init: weight std exactly 1/sqrt(fan_in), biases
/// drawn at a small fixed scale.
pub fn init_params(config: &EncoderConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Result<ParameterSet> {
    config.validate()?;
    let d = config.embedding_dim;
    let mut params = ParameterSet::new();
    let mut bias = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| BIAS_INIT_STD * sample_normal(rng)).collect()
    };
    let mut conv_in = config.input_channels;
    for (layer, &c_out) in CONV_CHANNELS.iter().enumerate() {
        let fan_in = conv_in * 9;
        let std = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..c_out * conv_in * 9).map(|_| std * sample_normal(rng)).collect();
        params.insert(format!("conv{}.w", layer + 1), Array::new(vec![c_out, conv_in, 3, 3], w)?)?;
        let b = bias(rng, c_out);
        params.insert(format!("conv{}.b", layer + 1), Array::new(vec![c_out], b)?)?;
        conv_in = c_out;
    }
    let fc_std = 1.0 / (TRUNK_POOLED_DIM as f64).sqrt();
    let fc_w: Vec<f64> =
        (0..d * TRUNK_POOLED_DIM).map(|_| fc_std * sample_normal(rng)).collect();
    params.insert("fc.w", Array::new(vec![d, TRUNK_POOLED_DIM], fc_w)?)?;
    let fc_b = bias(rng, d);
    params.insert("fc.b", Array::new(vec![d], fc_b)?)?;
    let proj_std = 1.0 / (d as f64).sqrt();
    match config.projection {
        ProjectionKind::Linear => {
            let w: Vec<f64> = (0..d * d).map(|_| proj_std * sample_normal(rng)).collect();
            params.insert("proj.w", Array::new(vec![d, d], w)?)?;
            let b = bias(rng, d);
            params.insert("proj.b", Array::new(vec![d], b)?)?;
        }
        ProjectionKind::TwoLayerMlp => {
            for name in ["proj1", "proj2"] {
                let w: Vec<f64> = (0..d * d).map(|_| proj_std * sample_normal(rng)).collect();
                params.insert(format!("{name}.w"), Array::new(vec![d, d], w)?)?;
                let b = bias(rng, d);
                params.insert(format!("{name}.b"), Array::new(vec![d], b)?)?;
            }
        }
        ProjectionKind::None => {}
    }
    Ok(params)
}

fn conv3x3_s2_forward(
    inp: &[f64],
    c_in: usize,
    h_in: usize,
    w_in: usize,
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
) -> (Vec<f64>, usize, usize) {
    let h_out = conv_out_dim(h_in);
    let w_out = conv_out_dim(w_in);
    let mut out = vec![0.0; c_out * h_out * w_out];
    for co in 0..c_out {
        let out_plane = &mut out[co * h_out * w_out..(co + 1) * h_out * w_out];
        out_plane.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..c_in {
            let w9 = &weight[(co * c_in + ci) * 9..(co * c_in + ci) * 9 + 9];
            let in_plane = &inp[ci * h_in * w_in..(ci + 1) * h_in * w_in];
            for oy in 0..h_out {
                for ky in 0..3usize {
                    let iy = oy * 2 + ky;
                    if iy < 1 || iy > h_in {
                        continue;
                    }
                    let row = &in_plane[(iy - 1) * w_in..iy * w_in];
                    let w0 = w9[ky * 3];
                    let w1 = w9[ky * 3 + 1];
                    let w2 = w9[ky * 3 + 2];
                    let orow = &mut out_plane[oy * w_out..(oy + 1) * w_out];
                    // ix = ox*2 + kx - 1; the middle tap is always in
                    // bounds, the side taps miss only at the edges.
                    for (ox, o) in orow.iter_mut().enumerate() {
                        let ix = ox * 2;
                        let mut acc = w1 * row[ix];
                        if ix >= 1 {
                            acc += w0 * row[ix - 1];
                        }
                        if ix + 1 < w_in {
                            acc += w2 * row[ix + 1];
                        }
                        *o += acc;
                    }
                }
            }
        }
    }
    (out, h_out, w_out)
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_s2_backward(
    inp: &[f64],
    c_in: usize,
    h_in: usize,
    w_in: usize,
    weight: &[f64],
    c_out: usize,
    d_out: &[f64],
    h_out: usize,
    w_out: usize,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    d_inp: &mut [f64],
) {
    for co in 0..c_out {
        let out_plane = &d_out[co * h_out * w_out..(co + 1) * h_out * w_out];
        d_bias[co] += out_plane.iter().sum::<f64>();
        for ci in 0..c_in {
            let w_base = (co * c_in + ci) * 9;
            let w9 = &weight[w_base..w_base + 9];
            let in_plane = &inp[ci * h_in * w_in..(ci + 1) * h_in * w_in];
            let d_in_plane = &mut d_inp[ci * h_in * w_in..(ci + 1) * h_in * w_in];
            for oy in 0..h_out {
                let grow = &out_plane[oy * w_out..(oy + 1) * w_out];
                for ky in 0..3usize {
                    let iy = oy * 2 + ky;
                    if iy < 1 || iy > h_in {
                        continue;
                    }
                    let row = &in_plane[(iy - 1) * w_in..iy * w_in];
                    let d_row = &mut d_in_plane[(iy - 1) * w_in..iy * w_in];
                    let w0 = w9[ky * 3];
                    let w1 = w9[ky * 3 + 1];
                    let w2 = w9[ky * 3 + 2];
                    let mut dw0 = 0.0;
                    let mut dw1 = 0.0;
                    let mut dw2 = 0.0;
                    for (ox, &g) in grow.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let ix = ox * 2;
                        dw1 += g * row[ix];
                        d_row[ix] += g * w1;
                        if ix >= 1 {
                            dw0 += g * row[ix - 1];
                            d_row[ix - 1] += g * w0;
                        }
                        if ix + 1 < w_in {
                            dw2 += g * row[ix + 1];
                            d_row[ix + 1] += g * w2;
                        }
                    }
                    d_weight[w_base + ky * 3] += dw0;
                    d_weight[w_base + ky * 3 + 1] += dw1;
                    d_weight[w_base + ky * 3 + 2] += dw2;
                }
            }
        }
    }
}

fn linear_forward(w: &[f64], b: &[f64], out_dim: usize, in_dim: usize, x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let acc: f64 = row.iter().zip(x).map(|(wi, xi)| wi * xi).sum();
        out.push(acc + b[o]);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn linear_backward(
    w: &[f64],
    out_dim: usize,
    in_dim: usize,
    x: &[f64],
    d_out: &[f64],
    d_w: &mut [f64],
    d_b: &mut [f64],
    d_x: &mut [f64],
) {
    for o in 0..out_dim {
        let g = d_out[o];
        if g == 0.0 {
            continue;
        }
        d_b[o] += g;
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let d_row = &mut d_w[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            d_row[i] += g * x[i];
            d_x[i] += g * row[i];
        }
    }
}

pub(crate) fn l2_normalize(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::non_finite("zero or non-finite embedding norm"));
    }
    Ok((v.iter().map(|x| x / norm).collect(), norm))
}

struct LayerAct {
    post: Vec<f64>,
    c: usize,
    h: usize,
    w: usize,
}

/// Cached activations from the input up to the backbone feature.
pub struct TrunkTrace {
    input: Vec<f64>,
    in_h: usize,
    in_w: usize,
    acts: Vec<LayerAct>,
    pooled: Vec<f64>,
    pub feature: Vec<f64>,
}

/// Cached activations through the projection head and normalization.
pub struct PatchTrace {
    pub trunk: TrunkTrace,
    proj_hidden: Option<Vec<f64>>,
    norm: f64,
    pub embedding: Vec<f64>,
}

fn validate_image(h: usize, w: usize, values: &[f32]) -> Result<()> {
    if h == 0 || w == 0 || values.len() != h * w {
        return Err(Error::InvalidArgument(format!(
            "image buffer length {} does not match {h}x{w}",
            values.len()
        )));
    }
    if let Some(&bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("input value {bad} outside [0, 1]")));
    }
    Ok(())
}

/// Input through conv blocks, GAP, and the fc layer.
pub fn forward_trunk(
    params: &ParameterSet,
    config: &EncoderConfig,
    h: usize,
    w: usize,
    values: &[f32],
) -> Result<TrunkTrace> {
    config.validate()?;
    validate_image(h, w, values)?;
    let input: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
    let mut acts = Vec::with_capacity(3);
    let mut cur: &[f64] = &input;
    let mut c_in = 1usize;
    let mut cur_h = h;
    let mut cur_w = w;
    for (layer, &c_out) in CONV_CHANNELS.iter().enumerate() {
        let weight = params.get(&format!("conv{}.w", layer + 1))?;
        let bias = params.get(&format!("conv{}.b", layer + 1))?;
        let (mut pre, oh, ow) = conv3x3_s2_forward(cur, c_in, cur_h, cur_w, &weight.data, &bias.data, c_out);
        for v in pre.iter_mut() {
            *v = v.tanh();
        }
        acts.push(LayerAct { post: pre, c: c_out, h: oh, w: ow });
        let last = acts.last().expect("just pushed");
        cur = &last.post;
        c_in = c_out;
        cur_h = oh;
        cur_w = ow;
    }
    let last = acts.last().expect("three conv layers");
    let spatial = last.h * last.w;
    let mut pooled = Vec::with_capacity(last.c);
    for c in 0..last.c {
        let s: f64 = last.post[c * spatial..(c + 1) * spatial].iter().sum();
        pooled.push(s / spatial as f64);
    }
    let fc_w = params.get("fc.w")?;
    let fc_b = params.get("fc.b")?;
    let feature =
        linear_forward(&fc_w.data, &fc_b.data, config.embedding_dim, TRUNK_POOLED_DIM, &pooled);
    if feature.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("backbone feature"));
    }
    Ok(TrunkTrace { input, in_h: h, in_w: w, acts, pooled, feature })
}

/// Full SSL path: trunk, projection head, L2 normalization.
pub fn forward_patch(
    params: &ParameterSet,
    config: &EncoderConfig,
    patch: &Patch,
) -> Result<PatchTrace> {
    let trunk = forward_trunk(params, config, patch.h, patch.w, &patch.values)?;
    let d = config.embedding_dim;
    let (proj_hidden, proj_out) = match config.projection {
        ProjectionKind::Linear => {
            let w = params.get("proj.w")?;
            let b = params.get("proj.b")?;
            (None, linear_forward(&w.data, &b.data, d, d, &trunk.feature))
        }
        ProjectionKind::TwoLayerMlp => {
            let w1 = params.get("proj1.w")?;
            let b1 = params.get("proj1.b")?;
            let mut hidden = linear_forward(&w1.data, &b1.data, d, d, &trunk.feature);
            for v in hidden.iter_mut() {
                *v = v.tanh();
            }
            let w2 = params.get("proj2.w")?;
            let b2 = params.get("proj2.b")?;
            let out = linear_forward(&w2.data, &b2.data, d, d, &hidden);
            (Some(hidden), out)
        }
        ProjectionKind::None => (None, trunk.feature.clone()),
    };
    if proj_out.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("projection output"));
    }
    let (embedding, norm) = l2_normalize(&proj_out)?;
    Ok(PatchTrace { trunk, proj_hidden, norm, embedding })
}

/// Normalized d-dim embedding of a patch.
pub fn encode_patch(params: &ParameterSet, config: &EncoderConfig, patch: &Patch) -> Result<Vec<f64>> {
    Ok(forward_patch(params, config, patch)?.embedding)
}

/// Unnormalized pooled backbone feature of a slice (projection bypassed).
pub fn encode_slice(
    params: &ParameterSet,
    config: &EncoderConfig,
    h: usize,
    w: usize,
    values: &[f32],
) -> Result<Vec<f64>> {
    Ok(forward_trunk(params, config, h, w, values)?.feature)
}

/// Backprop from a backbone-feature gradient into parameter gradients.
pub fn backward_trunk(
    params: &ParameterSet,
    config: &EncoderConfig,
    trace: &TrunkTrace,
    d_feature: &[f64],
    grads: &mut ParameterSet,
) -> Result<()> {
    let d = config.embedding_dim;
    if d_feature.len() != d {
        return Err(Error::InvalidArgument(format!(
            "feature gradient length {} vs embedding_dim {d}",
            d_feature.len()
        )));
    }
    let fc_w = params.get("fc.w")?;
    let mut d_pooled = vec![0.0; TRUNK_POOLED_DIM];
    {
        let (d_fc_w, d_fc_b) = {
            // Split-borrow the two gradient arrays via raw indices.
            let mut w = std::mem::take(&mut grads.get_mut("fc.w")?.data);
            let mut b = std::mem::take(&mut grads.get_mut("fc.b")?.data);
            linear_backward(
                &fc_w.data,
                d,
                TRUNK_POOLED_DIM,
                &trace.pooled,
                d_feature,
                &mut w,
                &mut b,
                &mut d_pooled,
            );
            (w, b)
        };
        grads.get_mut("fc.w")?.data = d_fc_w;
        grads.get_mut("fc.b")?.data = d_fc_b;
    }
    // GAP backward: spread each channel gradient uniformly over its plane,
    // then walk the conv blocks in reverse.
    let last = trace.acts.last().expect("trace has conv activations");
    let spatial = last.h * last.w;
    let mut d_post = vec![0.0; last.c * spatial];
    for c in 0..last.c {
        let g = d_pooled[c] / spatial as f64;
        for v in d_post[c * spatial..(c + 1) * spatial].iter_mut() {
            *v = g;
        }
    }
    for layer in (0..trace.acts.len()).rev() {
        let act = &trace.acts[layer];
        // tanh backward on this layer's post-activation.
        let mut d_pre = d_post;
        for (g, &a) in d_pre.iter_mut().zip(&act.post) {
            *g *= 1.0 - a * a;
        }
        let (below, c_in, h_in, w_in): (&[f64], usize, usize, usize) = if layer == 0 {
            (&trace.input, 1, trace.in_h, trace.in_w)
        } else {
            let prev = &trace.acts[layer - 1];
            (&prev.post, prev.c, prev.h, prev.w)
        };
        let weight = params.get(&format!("conv{}.w", layer + 1))?;
        let mut d_inp = vec![0.0; c_in * h_in * w_in];
        let mut d_w = std::mem::take(&mut grads.get_mut(&format!("conv{}.w", layer + 1))?.data);
        let mut d_b = std::mem::take(&mut grads.get_mut(&format!("conv{}.b", layer + 1))?.data);
        conv3x3_s2_backward(
            below, c_in, h_in, w_in, &weight.data, act.c, &d_pre, act.h, act.w, &mut d_w,
            &mut d_b, &mut d_inp,
        );
        grads.get_mut(&format!("conv{}.w", layer + 1))?.data = d_w;
        grads.get_mut(&format!("conv{}.b", layer + 1))?.data = d_b;
        d_post = d_inp;
    }
    Ok(())
}

/// Backprop from an embedding gradient through normalization and the
/// projection head into parameter gradients.
pub fn backward_patch(
    params: &ParameterSet,
    config: &EncoderConfig,
    trace: &PatchTrace,
    d_embedding: &[f64],
    grads: &mut ParameterSet,
) -> Result<()> {
    let d = config.embedding_dim;
    if d_embedding.len() != d {
        return Err(Error::InvalidArgument(format!(
            "embedding gradient length {} vs embedding_dim {d}",
            d_embedding.len()
        )));
    }
    // y = u / |u|: dL/du = (dL/dy - (dL/dy . y) y) / |u|.
    let dot: f64 = d_embedding.iter().zip(&trace.embedding).map(|(g, e)| g * e).sum();
    let d_proj_out: Vec<f64> = d_embedding
        .iter()
        .zip(&trace.embedding)
        .map(|(g, e)| (g - dot * e) / trace.norm)
        .collect();
    let mut d_feature = vec![0.0; d];
    match config.projection {
        ProjectionKind::Linear => {
            let w = params.get("proj.w")?;
            let mut d_w = std::mem::take(&mut grads.get_mut("proj.w")?.data);
            let mut d_b = std::mem::take(&mut grads.get_mut("proj.b")?.data);
            linear_backward(
                &w.data,
                d,
                d,
                &trace.trunk.feature,
                &d_proj_out,
                &mut d_w,
                &mut d_b,
                &mut d_feature,
            );
            grads.get_mut("proj.w")?.data = d_w;
            grads.get_mut("proj.b")?.data = d_b;
        }
        ProjectionKind::TwoLayerMlp => {
            let hidden = trace.proj_hidden.as_ref().expect("mlp trace has hidden");
            let w2 = params.get("proj2.w")?;
            let mut d_hidden = vec![0.0; d];
            let mut d_w2 = std::mem::take(&mut grads.get_mut("proj2.w")?.data);
            let mut d_b2 = std::mem::take(&mut grads.get_mut("proj2.b")?.data);
            linear_backward(&w2.data, d, d, hidden, &d_proj_out, &mut d_w2, &mut d_b2, &mut d_hidden);
            grads.get_mut("proj2.w")?.data = d_w2;
            grads.get_mut("proj2.b")?.data = d_b2;
            for (g, &a) in d_hidden.iter_mut().zip(hidden) {
                *g *= 1.0 - a * a;
            }
            let w1 = params.get("proj1.w")?;
            let mut d_w1 = std::mem::take(&mut grads.get_mut("proj1.w")?.data);
            let mut d_b1 = std::mem::take(&mut grads.get_mut("proj1.b")?.data);
            linear_backward(
                &w1.data,
                d,
                d,
                &trace.trunk.feature,
                &d_hidden,
                &mut d_w1,
                &mut d_b1,
                &mut d_feature,
            );
            grads.get_mut("proj1.w")?.data = d_w1;
            grads.get_mut("proj1.b")?.data = d_b1;
        }
        ProjectionKind::None => {
            d_feature.copy_from_slice(&d_proj_out);
        }
    }
    backward_trunk(params, config, &trace.trunk, &d_feature, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, stream};
    use rand::Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig::with_dim(8)
    }

    fn patch(seed: u64, h: usize, w: usize) -> Patch {
        let mut rng = rng_for(seed, stream::PRETRAIN_BATCH, 7);
        Patch { h, w, values: (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect() }
    }

    #[test]
    fn embedding_is_unit_norm_and_deterministic() {
        let cfg = small_config();
        let params = init_params(&cfg, &mut rng_for(1, stream::PARAM_INIT, 0)).unwrap();
        let p = patch(2, 9, 7);
        let e1 = encode_patch(&params, &cfg, &p).unwrap();
        let e2 = encode_patch(&params, &cfg, &p).unwrap();
        assert_eq!(e1, e2);
        let norm: f64 = e1.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        assert_eq!(e1.len(), 8);
    }

    #[test]
    fn init_is_seed_deterministic_and_fan_in_scaled() {
        let cfg = EncoderConfig::with_dim(16);
        let a = init_params(&cfg, &mut rng_for(5, stream::PARAM_INIT, 0)).unwrap();
        let b = init_params(&cfg, &mut rng_for(5, stream::PARAM_INIT, 0)).unwrap();
        assert_eq!(a, b);
        let c = init_params(&cfg, &mut rng_for(6, stream::PARAM_INIT, 0)).unwrap();
        assert!(a.max_abs_diff(&c).unwrap() > 0.0);

        for (name, fan_in) in [("conv2.w", 16 * 9), ("conv3.w", 32 * 9), ("fc.w", 64)] {
            let arr = a.get(name).unwrap();
            let mean = arr.data.iter().sum::<f64>() / arr.len() as f64;
            let var =
                arr.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / arr.len() as f64;
            let target = 1.0 / (fan_in as f64).sqrt();
            let std = var.sqrt();
            assert!(
                (std - target).abs() / target < 0.2,
                "{name}: std {std} vs target {target}"
            );
        }
    }

    #[test]
    fn encode_slice_dim_is_d_regardless_of_extent() {
        let cfg = small_config();
        let params = init_params(&cfg, &mut rng_for(1, stream::PARAM_INIT, 0)).unwrap();
        for (h, w) in [(5, 5), (12, 20), (1, 1), (33, 9)] {
            let values = vec![0.25f32; h * w];
            let f = encode_slice(&params, &cfg, h, w, &values).unwrap();
            assert_eq!(f.len(), 8, "{h}x{w}");
            assert!(f.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_image_gives_finite_reproducible_feature() {
        let cfg = small_config();
        let params = init_params(&cfg, &mut rng_for(9, stream::PARAM_INIT, 0)).unwrap();
        let z = vec![0.0f32; 64];
        let a = encode_slice(&params, &cfg, 8, 8, &z).unwrap();
        let b = encode_slice(&params, &cfg, 8, 8, &z).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn out_of_range_input_is_rejected() {
        let cfg = small_config();
        let params = init_params(&cfg, &mut rng_for(1, stream::PARAM_INIT, 0)).unwrap();
        let bad = Patch { h: 2, w: 2, values: vec![0.0, 0.5, 1.5, 0.2] };
        assert!(encode_patch(&params, &cfg, &bad).is_err());
        assert!(encode_slice(&params, &cfg, 3, 3, &[0.0; 8]).is_err());
    }

    #[test]
    fn normalization_absorbs_scale() {
        let v = vec![0.3, -1.2, 0.05, 2.0];
        let scaled: Vec<f64> = v.iter().map(|x| x * 2.0).collect();
        let (e1, _) = l2_normalize(&v).unwrap();
        let (e2, _) = l2_normalize(&scaled).unwrap();
        for (a, b) in e1.iter().zip(&e2) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    /// FD check of the patch path over a strided subset of all parameters;
    /// the acceptance suite covers every parameter on the full SSL loss.
    #[test]
    fn patch_backward_matches_finite_differences() {
        for projection in [ProjectionKind::Linear, ProjectionKind::TwoLayerMlp, ProjectionKind::None] {
            let cfg = EncoderConfig { projection, ..small_config() };
            let mut params = init_params(&cfg, &mut rng_for(11, stream::PARAM_INIT, 0)).unwrap();
            let p = patch(3, 7, 9);
            let mut rng = rng_for(13, stream::PARAM_INIT, 1);
            let alpha: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |params: &ParameterSet| -> f64 {
                let e = encode_patch(params, &cfg, &p).unwrap();
                e.iter().zip(&alpha).map(|(x, a)| x * a).sum()
            };
            let trace = forward_patch(&params, &cfg, &p).unwrap();
            let mut grads = params.zeros_like();
            backward_patch(&params, &cfg, &trace, &alpha, &mut grads).unwrap();

            let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
            for name in names {
                let len = params.get(&name).unwrap().len();
                for idx in (0..len).step_by(11) {
                    let orig = params.get(&name).unwrap().data[idx];
                    let h = 1e-6;
                    params.get_mut(&name).unwrap().data[idx] = orig + h;
                    let up = loss(&params);
                    params.get_mut(&name).unwrap().data[idx] = orig - h;
                    let down = loss(&params);
                    params.get_mut(&name).unwrap().data[idx] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let analytic = grads.get(&name).unwrap().data[idx];
                    let denom = fd.abs().max(analytic.abs()).max(1e-8);
                    assert!(
                        (analytic - fd).abs() / denom < 1e-4,
                        "{projection:?} {name}[{idx}]: analytic {analytic} fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn slice_backward_matches_finite_differences() {
        let cfg = small_config();
        let mut params = init_params(&cfg, &mut rng_for(21, stream::PARAM_INIT, 0)).unwrap();
        let h = 6;
        let w = 10;
        let img: Vec<f32> = {
            let mut rng = rng_for(22, stream::PRETRAIN_BATCH, 0);
            (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()
        };
        let mut rng = rng_for(23, stream::PARAM_INIT, 1);
        let alpha: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |params: &ParameterSet| -> f64 {
            let f = encode_slice(params, &cfg, h, w, &img).unwrap();
            f.iter().zip(&alpha).map(|(x, a)| x * a).sum()
        };
        let trace = forward_trunk(&params, &cfg, h, w, &img).unwrap();
        let mut grads = params.zeros_like();
        backward_trunk(&params, &cfg, &trace, &alpha, &mut grads).unwrap();
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            // The projection head is bypassed on the slice path.
            if name.starts_with("proj") {
                assert!(grads.get(&name).unwrap().data.iter().all(|&g| g == 0.0));
                continue;
            }
            let len = params.get(&name).unwrap().len();
            for idx in (0..len).step_by(13) {
                let orig = params.get(&name).unwrap().data[idx];
                let step = 1e-6;
                params.get_mut(&name).unwrap().data[idx] = orig + step;
                let up = loss(&params);
                params.get_mut(&name).unwrap().data[idx] = orig - step;
                let down = loss(&params);
                params.get_mut(&name).unwrap().data[idx] = orig;
                let fd = (up - down) / (2.0 * step);
                let analytic = grads.get(&name).unwrap().data[idx];
                let denom = fd.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    (analytic - fd).abs() / denom < 1e-4,
                    "{name}[{idx}]: analytic {analytic} fd {fd}"
                );
            }
        }
    }
}
