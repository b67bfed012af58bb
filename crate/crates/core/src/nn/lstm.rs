//! Bidirectional LSTM over feature sequences, with manual backprop through
//! time. Gate order within the stacked 4h blocks: input, forget, cell, output.
//!
//! Parameter names per layer `l` and direction `dir` in {fwd, bwd}:
//! `lstm{l}.{dir}.w_x` [4h, in], `lstm{l}.{dir}.w_h` [4h, h],
//! `lstm{l}.{dir}.b` [4h]. Layer 0 consumes the input sequence; deeper
//! layers consume the previous layer's concatenated 2h outputs.

use crate::error::{Error, Result};
use crate::rng::sample_normal;

use super::params::{Array, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiLstmDims {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl BiLstmDims {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::InvalidArgument(format!("degenerate LSTM dims {self:?}")));
        }
        Ok(())
    }

    fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            2 * self.hidden
        }
    }
}

const DIRS: [&str; 2] = ["fwd", "bwd"];

pub fn param_name(layer: usize, dir: usize, which: &str) -> String {
    format!("lstm{layer}.{}.{which}", DIRS[dir])
}

/// Insert fan-in-scaled LSTM parameters into `params`.
pub fn init_bilstm_params(
    dims: &BiLstmDims,
    rng: &mut rand_chacha::ChaCha8Rng,
    params: &mut ParameterSet,
) -> Result<()> {
    dims.validate()?;
    let h = dims.hidden;
    for layer in 0..dims.layers {
        let in_dim = dims.layer_input_dim(layer);
        for dir in 0..2 {
            let std_x = 1.0 / (in_dim as f64).sqrt();
            let w_x: Vec<f64> = (0..4 * h * in_dim).map(|_| std_x * sample_normal(rng)).collect();
            params.insert(param_name(layer, dir, "w_x"), Array::new(vec![4 * h, in_dim], w_x)?)?;
            let std_h = 1.0 / (h as f64).sqrt();
            let w_h: Vec<f64> = (0..4 * h * h).map(|_| std_h * sample_normal(rng)).collect();
            params.insert(param_name(layer, dir, "w_h"), Array::new(vec![4 * h, h], w_h)?)?;
            params.insert(param_name(layer, dir, "b"), Array::zeros(vec![4 * h]))?;
        }
    }
    Ok(())
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct StepCache {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    tc: Vec<f64>,
}

struct DirTrace {
    steps: Vec<StepCache>,
}

pub struct BiLstmTrace {
    t_len: usize,
    /// Per layer: that layer's input sequence, [T x in_dim].
    layer_inputs: Vec<Vec<f64>>,
    dirs: Vec<[DirTrace; 2]>,
    /// Top layer output, [T x 2h].
    pub outputs: Vec<f64>,
}

fn matvec(w: &[f64], out_dim: usize, in_dim: usize, x: &[f64], out: &mut [f64]) {
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        out[o] += row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
    }
}

fn matvec_t(w: &[f64], out_dim: usize, in_dim: usize, d_out: &[f64], d_x: &mut [f64]) {
    for o in 0..out_dim {
        let g = d_out[o];
        if g == 0.0 {
            continue;
        }
        let row = &w[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            d_x[i] += g * row[i];
        }
    }
}

fn run_direction(
    w_x: &[f64],
    w_h: &[f64],
    b: &[f64],
    in_dim: usize,
    h_dim: usize,
    t_len: usize,
    input: &[f64],
    reverse: bool,
    outputs: &mut [f64],
    out_offset: usize,
) -> DirTrace {
    let mut h = vec![0.0; h_dim];
    let mut c = vec![0.0; h_dim];
    let mut steps = Vec::with_capacity(t_len);
    for k in 0..t_len {
        let t = if reverse { t_len - 1 - k } else { k };
        let x = &input[t * in_dim..(t + 1) * in_dim];
        let mut z = b.to_vec();
        matvec(w_x, 4 * h_dim, in_dim, x, &mut z);
        matvec(w_h, 4 * h_dim, h_dim, &h, &mut z);
        let mut gate_i = Vec::with_capacity(h_dim);
        let mut gate_f = Vec::with_capacity(h_dim);
        let mut gate_g = Vec::with_capacity(h_dim);
        let mut gate_o = Vec::with_capacity(h_dim);
        for j in 0..h_dim {
            gate_i.push(sigmoid(z[j]));
            gate_f.push(sigmoid(z[h_dim + j]));
            gate_g.push(z[2 * h_dim + j].tanh());
            gate_o.push(sigmoid(z[3 * h_dim + j]));
        }
        let c_prev = c.clone();
        let h_prev = h.clone();
        let mut tc = Vec::with_capacity(h_dim);
        for j in 0..h_dim {
            c[j] = gate_f[j] * c_prev[j] + gate_i[j] * gate_g[j];
            tc.push(c[j].tanh());
            h[j] = gate_o[j] * tc[j];
        }
        outputs[t * (2 * h_dim) + out_offset..t * (2 * h_dim) + out_offset + h_dim]
            .copy_from_slice(&h);
        steps.push(StepCache { h_prev, c_prev, i: gate_i, f: gate_f, g: gate_g, o: gate_o, tc });
    }
    DirTrace { steps }
}

/// Forward over a [T x input_dim] sequence; outputs [T x 2h] per layer top.
pub fn forward_bilstm(
    params: &ParameterSet,
    dims: &BiLstmDims,
    seq: &[f64],
    t_len: usize,
) -> Result<BiLstmTrace> {
    dims.validate()?;
    if t_len == 0 || seq.len() != t_len * dims.input_dim {
        return Err(Error::InvalidArgument(format!(
            "sequence buffer length {} does not match T={t_len} x {}",
            seq.len(),
            dims.input_dim
        )));
    }
    let h = dims.hidden;
    let mut layer_inputs = Vec::with_capacity(dims.layers);
    let mut dirs = Vec::with_capacity(dims.layers);
    let mut current: Vec<f64> = seq.to_vec();
    for layer in 0..dims.layers {
        let in_dim = dims.layer_input_dim(layer);
        let mut outputs = vec![0.0; t_len * 2 * h];
        let mut pair = Vec::with_capacity(2);
        for dir in 0..2 {
            let w_x = params.get(&param_name(layer, dir, "w_x"))?;
            let w_h = params.get(&param_name(layer, dir, "w_h"))?;
            let b = params.get(&param_name(layer, dir, "b"))?;
            let trace = run_direction(
                &w_x.data,
                &w_h.data,
                &b.data,
                in_dim,
                h,
                t_len,
                &current,
                dir == 1,
                &mut outputs,
                dir * h,
            );
            pair.push(trace);
        }
        let pair: [DirTrace; 2] = match pair.try_into() {
            Ok(p) => p,
            Err(_) => unreachable!("two directions"),
        };
        layer_inputs.push(current);
        dirs.push(pair);
        current = outputs;
    }
    if current.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("LSTM outputs"));
    }
    Ok(BiLstmTrace { t_len, layer_inputs, dirs, outputs: current })
}

#[allow(clippy::too_many_arguments)]
fn backward_direction(
    w_x: &[f64],
    w_h: &[f64],
    in_dim: usize,
    h_dim: usize,
    t_len: usize,
    input: &[f64],
    trace: &DirTrace,
    reverse: bool,
    d_outputs: &[f64],
    out_offset: usize,
    d_w_x: &mut [f64],
    d_w_h: &mut [f64],
    d_b: &mut [f64],
    d_input: &mut [f64],
) {
    let mut dh_carry = vec![0.0; h_dim];
    let mut dc_carry = vec![0.0; h_dim];
    let mut dz = vec![0.0; 4 * h_dim];
    for k in (0..t_len).rev() {
        let t = if reverse { t_len - 1 - k } else { k };
        let cache = &trace.steps[k];
        let d_out = &d_outputs[t * (2 * h_dim) + out_offset..t * (2 * h_dim) + out_offset + h_dim];
        for j in 0..h_dim {
            let dh = d_out[j] + dh_carry[j];
            let d_o = dh * cache.tc[j];
            let d_tc = dh * cache.o[j];
            let dc = dc_carry[j] + d_tc * (1.0 - cache.tc[j] * cache.tc[j]);
            let d_i = dc * cache.g[j];
            let d_g = dc * cache.i[j];
            let d_f = dc * cache.c_prev[j];
            dc_carry[j] = dc * cache.f[j];
            dz[j] = d_i * cache.i[j] * (1.0 - cache.i[j]);
            dz[h_dim + j] = d_f * cache.f[j] * (1.0 - cache.f[j]);
            dz[2 * h_dim + j] = d_g * (1.0 - cache.g[j] * cache.g[j]);
            dz[3 * h_dim + j] = d_o * cache.o[j] * (1.0 - cache.o[j]);
        }
        let x = &input[t * in_dim..(t + 1) * in_dim];
        for row in 0..4 * h_dim {
            let g = dz[row];
            if g == 0.0 {
                continue;
            }
            d_b[row] += g;
            let w_row = &mut d_w_x[row * in_dim..(row + 1) * in_dim];
            for i in 0..in_dim {
                w_row[i] += g * x[i];
            }
            let h_row = &mut d_w_h[row * h_dim..(row + 1) * h_dim];
            for j in 0..h_dim {
                h_row[j] += g * cache.h_prev[j];
            }
        }
        matvec_t(w_x, 4 * h_dim, in_dim, &dz, &mut d_input[t * in_dim..(t + 1) * in_dim]);
        dh_carry.iter_mut().for_each(|v| *v = 0.0);
        matvec_t(w_h, 4 * h_dim, h_dim, &dz, &mut dh_carry);
    }
}

/// BPTT from a [T x 2h] output gradient; accumulates parameter gradients and
/// returns the gradient w.r.t. the input sequence.
pub fn backward_bilstm(
    params: &ParameterSet,
    dims: &BiLstmDims,
    trace: &BiLstmTrace,
    d_outputs: &[f64],
    grads: &mut ParameterSet,
) -> Result<Vec<f64>> {
    let h = dims.hidden;
    if d_outputs.len() != trace.t_len * 2 * h {
        return Err(Error::InvalidArgument(format!(
            "output gradient length {} does not match T={} x 2h={}",
            d_outputs.len(),
            trace.t_len,
            2 * h
        )));
    }
    let mut d_current = d_outputs.to_vec();
    for layer in (0..dims.layers).rev() {
        let in_dim = dims.layer_input_dim(layer);
        let input = &trace.layer_inputs[layer];
        let mut d_input = vec![0.0; trace.t_len * in_dim];
        for dir in 0..2 {
            let w_x = params.get(&param_name(layer, dir, "w_x"))?;
            let w_h = params.get(&param_name(layer, dir, "w_h"))?;
            let mut d_w_x = std::mem::take(&mut grads.get_mut(&param_name(layer, dir, "w_x"))?.data);
            let mut d_w_h = std::mem::take(&mut grads.get_mut(&param_name(layer, dir, "w_h"))?.data);
            let mut d_b = std::mem::take(&mut grads.get_mut(&param_name(layer, dir, "b"))?.data);
            backward_direction(
                &w_x.data,
                &w_h.data,
                in_dim,
                h,
                trace.t_len,
                input,
                &trace.dirs[layer][dir],
                dir == 1,
                &d_current,
                dir * h,
                &mut d_w_x,
                &mut d_w_h,
                &mut d_b,
                &mut d_input,
            );
            grads.get_mut(&param_name(layer, dir, "w_x"))?.data = d_w_x;
            grads.get_mut(&param_name(layer, dir, "w_h"))?.data = d_w_h;
            grads.get_mut(&param_name(layer, dir, "b"))?.data = d_b;
        }
        d_current = d_input;
    }
    Ok(d_current)
}
