//! The three self-supervised objectives over embeddings and their sum, with
//! analytic gradients.
//!
//! Per overlap target `r_i` and cosine similarity `s_i`:
//!
//! - intra: mean_i of `-ln(1 - min(|r_i - s_i|, 1 - EPS))`
//! - inter: same form on `|teacher_s_i - student_s_i|`, with the teacher side
//!   treated as a constant (stop-gradient)
//! - reg:   mean over unordered pairs of `|cos(b_i, b_j)|`
//!
//! The clamp at `1 - EPS` bounds each log term at about 13.8155 and keeps
//! gradients finite; inside the clamp the gradient is 0. At the absolute-value
//! kink the subgradient convention is 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp inside the logs; bounds a single term at `-ln(EPS)`.
pub const CLAMP_EPS: f64 = 1e-6;

/// Which encoder produced an embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Student,
    Teacher,
}

/// Which crop an embedding came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CropOrigin {
    RandomCrop,
    BaseCrop(usize),
}

/// A unit-norm feature vector tagged with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub branch: Branch,
    pub origin: CropOrigin,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, branch: Branch, origin: CropOrigin) -> Self {
        EmbeddingVector { values, branch, origin }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `a . b / (|a| |b|)`, clamped to [-1, 1] against rounding.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine of a zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    if !cos.is_finite() {
        return Err(Error::non_finite("cosine similarity"));
    }
    Ok(cos.clamp(-1.0, 1.0))
}

/// Cosine plus gradients w.r.t. both inputs.
///
/// d cos / d a = b/(|a||b|) - cos * a/|a|^2, symmetrically for b.
pub fn cosine_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let cos = cosine_similarity(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    let inv = 1.0 / (na * nb);
    let na2 = na * na;
    let nb2 = nb * nb;
    let grad_a: Vec<f64> =
        a.iter().zip(b).map(|(&ai, &bi)| bi * inv - cos * ai / na2).collect();
    let grad_b: Vec<f64> =
        a.iter().zip(b).map(|(&ai, &bi)| ai * inv - cos * bi / nb2).collect();
    Ok((cos, grad_a, grad_b))
}

fn check_pairs(sims: &[f64], targets: &[f64], what: &str) -> Result<()> {
    if sims.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{what}: length mismatch {} vs {}",
            sims.len(),
            targets.len()
        )));
    }
    if sims.is_empty() {
        return Err(Error::InvalidArgument(format!("{what}: empty inputs")));
    }
    if sims.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::non_finite(what.to_string()));
    }
    Ok(())
}

#[inline]
fn log_barrier_term(diff_abs: f64) -> f64 {
    -(1.0 - diff_abs.min(1.0 - CLAMP_EPS)).ln()
}

/// Mean of `-ln(1 - min(|r_i - s_i|, 1 - EPS))` over the grid cells.
pub fn intra_loss(sims: &[f64], r: &[f64]) -> Result<f64> {
    check_pairs(sims, r, "intra loss")?;
    let total: f64 = sims.iter().zip(r).map(|(&s, &t)| log_barrier_term((t - s).abs())).sum();
    Ok(total / sims.len() as f64)
}

/// Intra loss plus gradient w.r.t. `sims`.
///
/// Per element, where d = s_i - r_i: gradient is sign(d) / ((1 - |d|) n)
/// for 0 < |d| < 1 - EPS, and 0 at the kink and inside the clamp.
pub fn intra_loss_grad(sims: &[f64], r: &[f64]) -> Result<(f64, Vec<f64>)> {
    let loss = intra_loss(sims, r)?;
    let n = sims.len() as f64;
    let grad = sims
        .iter()
        .zip(r)
        .map(|(&s, &t)| {
            let d = s - t;
            if d == 0.0 || d.abs() >= 1.0 - CLAMP_EPS {
                0.0
            } else {
                d.signum() / ((1.0 - d.abs()) * n)
            }
        })
        .collect();
    Ok((loss, grad))
}

/// Cross-patient consistency: mean of
/// `-ln(1 - min(|teacher_i - student_i|, 1 - EPS))`.
pub fn inter_loss(teacher_sims: &[f64], student_sims: &[f64]) -> Result<f64> {
    check_pairs(teacher_sims, student_sims, "inter loss")?;
    let total: f64 = teacher_sims
        .iter()
        .zip(student_sims)
        .map(|(&t, &s)| log_barrier_term((t - s).abs()))
        .sum();
    Ok(total / teacher_sims.len() as f64)
}

/// Inter loss plus gradient w.r.t. the student similarities only; the
/// teacher side is a stop-gradient constant and receives no gradient.
pub fn inter_loss_grad(teacher_sims: &[f64], student_sims: &[f64]) -> Result<(f64, Vec<f64>)> {
    let loss = inter_loss(teacher_sims, student_sims)?;
    let n = teacher_sims.len() as f64;
    let grad = teacher_sims
        .iter()
        .zip(student_sims)
        .map(|(&t, &s)| {
            let d = s - t;
            if d == 0.0 || d.abs() >= 1.0 - CLAMP_EPS {
                0.0
            } else {
                d.signum() / ((1.0 - d.abs()) * n)
            }
        })
        .collect();
    Ok((loss, grad))
}

/// Anti-collapse term: mean of `|cos(b_i, b_j)|` over unordered pairs i < j.
pub fn reg_loss(base_embeddings: &[Vec<f64>]) -> Result<f64> {
    let n = base_embeddings.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("reg loss needs >= 2 embeddings, got {n}")));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += cosine_similarity(&base_embeddings[i], &base_embeddings[j])?.abs();
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Reg loss plus gradient w.r.t. every embedding.
pub fn reg_loss_grad(base_embeddings: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = base_embeddings.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("reg loss needs >= 2 embeddings, got {n}")));
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let mut total = 0.0;
    let mut grads: Vec<Vec<f64>> =
        base_embeddings.iter().map(|e| vec![0.0; e.len()]).collect();
    for i in 0..n {
        for j in (i + 1)..n {
            let (cos, gi, gj) = cosine_grad(&base_embeddings[i], &base_embeddings[j])?;
            total += cos.abs();
            // Subgradient 0 at cos == 0.
            let sign = if cos > 0.0 {
                1.0
            } else if cos < 0.0 {
                -1.0
            } else {
                0.0
            };
            for (acc, g) in grads[i].iter_mut().zip(&gi) {
                *acc += sign * g / pairs;
            }
            for (acc, g) in grads[j].iter_mut().zip(&gj) {
                *acc += sign * g / pairs;
            }
        }
    }
    Ok((total / pairs, grads))
}

/// Weighted sum of the three objectives; the breakdown keeps the unweighted
/// components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub intra: f64,
    pub inter: f64,
    pub reg: f64,
    pub total: f64,
}

pub fn total_loss(intra: f64, inter: f64, reg: f64, weights: [f64; 3]) -> Result<LossBreakdown> {
    if ![intra, inter, reg].iter().all(|v| v.is_finite()) {
        return Err(Error::non_finite("total loss inputs"));
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidArgument(format!("loss weights {weights:?} must be >= 0")));
    }
    let total = weights[0] * intra + weights[1] * inter + weights[2] * reg;
    Ok(LossBreakdown { intra, inter, reg, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, stream};
    use rand::Rng;

    const LN2: f64 = std::f64::consts::LN_2;
    /// -ln(CLAMP_EPS), the ceiling of a single clamped term.
    const CLAMP_VALUE: f64 = 13.815510557964274;

    #[test]
    fn cosine_basic_values() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let got = cosine_similarity(&[1.0, 0.0], &[s, s]).unwrap();
        assert!((got - s).abs() < 1e-12, "{got}");
    }

    #[test]
    fn cosine_rejects_zero_norm_and_mismatch() {
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn intra_loss_oracle_values() {
        // Perfect prediction.
        assert_eq!(intra_loss(&[0.25, 0.5], &[0.25, 0.5]).unwrap(), 0.0);
        // Single pair r = 0.3, sim = 0.8 -> -ln(0.5) = ln 2.
        let got = intra_loss(&[0.8], &[0.3]).unwrap();
        assert!((got - LN2).abs() < 1e-12, "{got}");
        // Clamp engages at |diff| = 1.
        let clamped = intra_loss(&[0.0], &[1.0]).unwrap();
        assert!((clamped - CLAMP_VALUE).abs() < 1e-9, "{clamped}");
    }

    #[test]
    fn inter_loss_oracle_values() {
        assert_eq!(inter_loss(&[0.4, -0.2], &[0.4, -0.2]).unwrap(), 0.0);
        let got = inter_loss(&[0.2], &[0.7]).unwrap();
        assert!((got - LN2).abs() < 1e-12, "{got}");
        let clamped = inter_loss(&[1.0], &[-1.0]).unwrap();
        assert!((clamped - CLAMP_VALUE).abs() < 1e-9, "{clamped}");
    }

    #[test]
    fn losses_reject_nan_and_length_mismatch() {
        assert!(intra_loss(&[f64::NAN], &[0.0]).is_err());
        assert!(intra_loss(&[0.1, 0.2], &[0.1]).is_err());
        assert!(inter_loss(&[0.1], &[f64::NAN]).is_err());
    }

    #[test]
    fn reg_loss_oracle_values() {
        let orth = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        assert_eq!(reg_loss(&orth).unwrap(), 0.0);
        let same = vec![vec![0.6, 0.8], vec![0.6, 0.8], vec![0.6, 0.8]];
        let got = reg_loss(&same).unwrap();
        assert!((got - 1.0).abs() < 1e-12, "{got}");
        // Three unit vectors with pairwise cosines {0.5, -0.5, 0}
        // -> mean |cos| = (0.5 + 0.5 + 0) / 3 = 1/3.
        let u = vec![1.0, 0.0, 0.0];
        let v = vec![0.5, 3f64.sqrt() / 2.0, 0.0];
        let w = vec![-0.5, 3f64.sqrt() / 6.0, (2.0 / 3.0f64).sqrt()];
        assert!((cosine_similarity(&u, &v).unwrap() - 0.5).abs() < 1e-12);
        assert!((cosine_similarity(&u, &w).unwrap() + 0.5).abs() < 1e-12);
        assert!(cosine_similarity(&v, &w).unwrap().abs() < 1e-12);
        let got = reg_loss(&[u, v, w]).unwrap();
        assert!((got - 1.0 / 3.0).abs() < 1e-12, "{got}");
    }

    #[test]
    fn reg_loss_requires_two() {
        assert!(reg_loss(&[vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn total_loss_sums_with_weights() {
        let z = total_loss(0.0, 0.0, 0.0, [1.0; 3]).unwrap();
        assert_eq!(z.total, 0.0);
        let t = total_loss(0.5, 0.25, 0.1, [1.0; 3]).unwrap();
        assert!((t.total - 0.85).abs() < 1e-15);
        assert_eq!((t.intra, t.inter, t.reg), (0.5, 0.25, 0.1));
        let ablate = total_loss(0.5, 0.25, 0.1, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(ablate.total, 0.5);
        assert!(total_loss(f64::INFINITY, 0.0, 0.0, [1.0; 3]).is_err());
        assert!(total_loss(0.0, 0.0, 0.0, [-1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn losses_are_invariant_to_common_embedding_rescale() {
        let mut rng = rng_for(3, stream::PARAM_INIT, 0);
        let embs: Vec<Vec<f64>> =
            (0..4).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let c = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let r = [0.1, 0.4, 0.0, 0.7];

        let sims: Vec<f64> =
            embs.iter().map(|e| cosine_similarity(&c, e).unwrap()).collect();
        let base_intra = intra_loss(&sims, &r).unwrap();
        let base_reg = reg_loss(&embs).unwrap();

        let scale = 7.3;
        let scaled: Vec<Vec<f64>> =
            embs.iter().map(|e| e.iter().map(|v| v * scale).collect()).collect();
        let c_scaled: Vec<f64> = c.iter().map(|v| v * scale).collect();
        let sims_scaled: Vec<f64> =
            scaled.iter().map(|e| cosine_similarity(&c_scaled, e).unwrap()).collect();
        assert!((intra_loss(&sims_scaled, &r).unwrap() - base_intra).abs() < 1e-9);
        assert!((reg_loss(&scaled).unwrap() - base_reg).abs() < 1e-9);

        let t_sims = sims.clone();
        let base_inter = inter_loss(&t_sims, &sims_scaled).unwrap();
        let again = inter_loss(&t_sims, &sims_scaled).unwrap();
        assert!((base_inter - again).abs() < 1e-12);
    }

    /// Central finite difference of a scalar function of one slot.
    fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn intra_and_inter_gradients_match_finite_differences() {
        let mut rng = rng_for(17, stream::PARAM_INIT, 1);
        for _ in 0..50 {
            let n = 6;
            let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            // Keep |r - s| inside [0.05, 0.9]: away from kink and clamp.
            let sims: Vec<f64> = r
                .iter()
                .map(|&ri| {
                    let delta: f64 = rng.gen_range(0.05..0.9);
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    (ri + sign * delta).clamp(-1.0, 1.0)
                })
                .collect();
            let (_, grad) = intra_loss_grad(&sims, &r).unwrap();
            for k in 0..n {
                let fd = central_diff(
                    |v| {
                        let mut s = sims.clone();
                        s[k] = v;
                        intra_loss(&s, &r).unwrap()
                    },
                    sims[k],
                    1e-5,
                );
                let rel = (grad[k] - fd).abs() / fd.abs().max(1e-12);
                assert!(rel < 1e-4, "intra slot {k}: analytic {} fd {fd}", grad[k]);
            }

            let teacher: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.9..0.9)).collect();
            let student: Vec<f64> = teacher
                .iter()
                .map(|&t| {
                    let delta: f64 = rng.gen_range(0.05..0.9);
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    (t + sign * delta).clamp(-1.0, 1.0)
                })
                .collect();
            let (_, sgrad) = inter_loss_grad(&teacher, &student).unwrap();
            for k in 0..n {
                let fd = central_diff(
                    |v| {
                        let mut s = student.clone();
                        s[k] = v;
                        inter_loss(&teacher, &s).unwrap()
                    },
                    student[k],
                    1e-5,
                );
                let rel = (sgrad[k] - fd).abs() / fd.abs().max(1e-12);
                assert!(rel < 1e-4, "inter slot {k}: analytic {} fd {fd}", sgrad[k]);
            }
        }
    }

    #[test]
    fn reg_gradient_matches_finite_differences() {
        let mut rng = rng_for(29, stream::PARAM_INIT, 2);
        let embs: Vec<Vec<f64>> =
            (0..4).map(|_| (0..5).map(|_| rng.gen_range(0.2..1.0)).collect()).collect();
        let (_, grads) = reg_loss_grad(&embs).unwrap();
        for i in 0..embs.len() {
            for k in 0..embs[i].len() {
                let fd = central_diff(
                    |v| {
                        let mut e = embs.clone();
                        e[i][k] = v;
                        reg_loss(&e).unwrap()
                    },
                    embs[i][k],
                    1e-6,
                );
                let rel = (grads[i][k] - fd).abs() / fd.abs().max(1e-9);
                assert!(rel < 1e-4, "emb {i} slot {k}: analytic {} fd {fd}", grads[i][k]);
            }
        }
    }

    #[test]
    fn reg_loss_permutation_and_sign_flip_invariance() {
        let mut rng = rng_for(31, stream::PARAM_INIT, 3);
        let embs: Vec<Vec<f64>> =
            (0..5).map(|_| (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let base = reg_loss(&embs).unwrap();
        let mut permuted = embs.clone();
        permuted.rotate_left(2);
        permuted.swap(0, 3);
        assert!((reg_loss(&permuted).unwrap() - base).abs() < 1e-12);
        let mut flipped = embs.clone();
        for v in flipped[2].iter_mut() {
            *v = -*v;
        }
        assert!((reg_loss(&flipped).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn intra_loss_nonnegative_and_zero_iff_exact() {
        let mut rng = rng_for(37, stream::PARAM_INIT, 4);
        for _ in 0..200 {
            let n = 4;
            let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let sims: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = intra_loss(&sims, &r).unwrap();
            assert!(loss >= 0.0);
            if sims.iter().zip(&r).all(|(s, t)| s == t) {
                assert_eq!(loss, 0.0);
            }
        }
        assert_eq!(intra_loss(&[0.3], &[0.3]).unwrap(), 0.0);
        assert!(intra_loss(&[0.3 + 1e-9], &[0.3]).unwrap() > 0.0);
    }
}
