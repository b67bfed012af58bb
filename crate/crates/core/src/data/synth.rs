//! Synthetic volume and labeled-study generation.
//!
//! Volumes are a pure function of [`SyntheticSpec`]: an ellipsoidal soft-tissue
//! "body" over air, a position-dependent texture field, optional smooth blobs,
//! and optional organ-region anomalies encoding injury severity.
//!
//! The texture encodes in-slice position in two independent statistics so a
//! patch's location is recoverable from local measurements alone:
//! - the local *mean* rises monotonically with x ([`texture_mean_hu`]);
//! - the local *noise amplitude* (second-order statistic) rises monotonically
//!   with y ([`texture_noise_amp`]).
//!
//! All field definitions are public so tests can check generated volumes
//! against the closed forms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{hash_noise, rng_for, stream};

use super::labels::{InjuryLabel, Organ, OrganLabelTriple};
use super::VolumeGrid;

pub const AIR_HU: f64 = -1000.0;
pub const TISSUE_HU: f64 = 40.0;
/// Peak-to-peak span of the mean field along x.
pub const MEAN_SPAN_HU: f64 = 120.0;
/// Noise amplitude at y = 0 and y = Y-1.
pub const NOISE_AMP_LO_HU: f64 = 10.0;
pub const NOISE_AMP_HI_HU: f64 = 40.0;
/// Mid-frequency wave: amplitude and wavelengths in voxels. Short enough
/// that a patch sees more than a period, so local phase pins position at a
/// finer scale than the monotone fields.
pub const MID_AMP_HU: f64 = 35.0;
pub const MID_LAMBDA_X: f64 = 17.0;
pub const MID_LAMBDA_Y: f64 = 23.0;
/// Additive anomaly peak per severity.
pub const INJURY_LOW_HU: f64 = 110.0;
pub const INJURY_HIGH_HU: f64 = 220.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub shape: [usize; 3],
    pub num_blobs: usize,
    pub injury_pattern: Option<OrganLabelTriple>,
    pub rng_seed: u64,
    /// Per-organ class prior (healthy, low, high) used when sampling labels.
    #[serde(default = "default_class_prior")]
    pub class_prior: [f64; 3],
}

pub fn default_class_prior() -> [f64; 3] {
    [0.5, 0.3, 0.2]
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("shape {:?} has a zero axis", self.shape)));
        }
        if self.class_prior.iter().any(|&p| p < 0.0) || self.class_prior.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::InvalidArgument(format!(
                "class prior {:?} must be non-negative with positive sum",
                self.class_prior
            )));
        }
        Ok(())
    }
}

#[inline]
fn axis_norm(i: usize, dim: usize) -> f64 {
    if dim <= 1 {
        0.5
    } else {
        i as f64 / (dim - 1) as f64
    }
}

/// Mean HU offset of the texture field at column x: linear, monotone in x.
pub fn texture_mean_hu(shape: [usize; 3], x: usize) -> f64 {
    MEAN_SPAN_HU * (axis_norm(x, shape[2]) - 0.5)
}

/// Noise amplitude (HU) at row y: linear, monotone in y.
pub fn texture_noise_amp(shape: [usize; 3], y: usize) -> f64 {
    NOISE_AMP_LO_HU + (NOISE_AMP_HI_HU - NOISE_AMP_LO_HU) * axis_norm(y, shape[1])
}

/// Seed-dependent global phases of the mid-frequency wave.
pub fn mid_wave_phases(seed: u64) -> (f64, f64) {
    use crate::rng::splitmix64;
    let unit = |k: u64| (k >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let px = std::f64::consts::TAU * unit(splitmix64(seed ^ 0x9D39_247E_3377_6D41));
    let py = std::f64::consts::TAU * unit(splitmix64(seed ^ 0x2AF7_398005_AAA5C7 ^ 0xF1));
    (px, py)
}

/// Mid-frequency wave (HU) at (y, x): a phase-shifted product of sinusoids,
/// constant in z.
pub fn texture_mid_hu(seed: u64, y: usize, x: usize) -> f64 {
    let (px, py) = mid_wave_phases(seed);
    MID_AMP_HU
        * (std::f64::consts::TAU * x as f64 / MID_LAMBDA_X + px).sin()
        * (std::f64::consts::TAU * y as f64 / MID_LAMBDA_Y + py).cos()
}

/// Body ellipsoid semi-axes in voxels. The z semi-axis extends past the
/// volume so the cross-section stays wide on every slice, like an abdominal
/// slab cut from a torso.
pub fn body_semi_axes(shape: [usize; 3]) -> [f64; 3] {
    [1.2 * shape[0] as f64, 0.44 * shape[1] as f64, 0.46 * shape[2] as f64]
}

pub fn in_body(shape: [usize; 3], z: usize, y: usize, x: usize) -> bool {
    let center = [(shape[0] - 1) as f64 / 2.0, (shape[1] - 1) as f64 / 2.0, (shape[2] - 1) as f64 / 2.0];
    let semi = body_semi_axes(shape);
    let dz = (z as f64 - center[0]) / semi[0].max(0.5);
    let dy = (y as f64 - center[1]) / semi[1].max(0.5);
    let dx = (x as f64 - center[2]) / semi[2].max(0.5);
    dz * dz + dy * dy + dx * dx <= 1.0
}

/// Organ-region center (voxel coordinates, z/y/x) and base radius.
pub fn organ_region(shape: [usize; 3], organ: Organ) -> ([f64; 3], f64) {
    let [z, y, x] = [shape[0] as f64, shape[1] as f64, shape[2] as f64];
    let r_unit = shape[1].min(shape[2]) as f64;
    match organ {
        Organ::Kidney => ([0.60 * z, 0.62 * y, 0.30 * x], 0.11 * r_unit),
        Organ::Liver => ([0.45 * z, 0.45 * y, 0.68 * x], 0.16 * r_unit),
        Organ::Spleen => ([0.40 * z, 0.35 * y, 0.22 * x], 0.11 * r_unit),
    }
}

/// Anomaly peak amplitude (HU) per severity.
pub fn injury_amplitude(label: InjuryLabel) -> f64 {
    match label {
        InjuryLabel::Healthy => 0.0,
        InjuryLabel::Low => INJURY_LOW_HU,
        InjuryLabel::High => INJURY_HIGH_HU,
    }
}

/// Anomaly radius as a fraction of the organ's base radius.
pub fn injury_radius_scale(label: InjuryLabel) -> f64 {
    match label {
        InjuryLabel::Healthy => 0.0,
        InjuryLabel::Low => 0.7,
        InjuryLabel::High => 1.0,
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    center: [f64; 3],
    sigma: f64,
    amplitude: f64,
}

fn sample_blobs(spec: &SyntheticSpec) -> Vec<Blob> {
    let [zs, ys, xs] = spec.shape;
    let mut rng = rng_for(spec.rng_seed, stream::SYNTH_BLOBS, 0);
    (0..spec.num_blobs)
        .map(|_| {
            // Keep blobs in the central body region so they stay on tissue.
            let cz = rng.gen_range(0.2..0.8) * zs as f64;
            let cy = rng.gen_range(0.25..0.75) * ys as f64;
            let cx = rng.gen_range(0.2..0.8) * xs as f64;
            let sigma = rng.gen_range(3.0..8.0);
            let mag = rng.gen_range(20.0..60.0);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            Blob { center: [cz, cy, cx], sigma, amplitude: sign * mag }
        })
        .collect()
}

/// Deterministic synthetic volume for the given spec.
pub fn generate_synthetic_volume(spec: &SyntheticSpec) -> Result<VolumeGrid> {
    spec.validate()?;
    let [zs, ys, xs] = spec.shape;
    let blobs = sample_blobs(spec);
    let pattern = spec.injury_pattern.unwrap_or(OrganLabelTriple::ALL_HEALTHY);
    let anomalies: Vec<([f64; 3], f64, f64)> = Organ::ALL
        .iter()
        .filter_map(|&organ| {
            let label = pattern.get(organ);
            if label == InjuryLabel::Healthy {
                return None;
            }
            let (center, base_r) = organ_region(spec.shape, organ);
            Some((center, base_r * injury_radius_scale(label), injury_amplitude(label)))
        })
        .collect();

    let mut voxels = Vec::with_capacity(zs * ys * xs);
    for z in 0..zs {
        for y in 0..ys {
            let amp = texture_noise_amp(spec.shape, y);
            for x in 0..xs {
                if !in_body(spec.shape, z, y, x) {
                    voxels.push(AIR_HU as f32);
                    continue;
                }
                let mut hu = TISSUE_HU
                    + texture_mean_hu(spec.shape, x)
                    + texture_mid_hu(spec.rng_seed, y, x)
                    + amp * hash_noise(spec.rng_seed, z, y, x);
                for blob in &blobs {
                    let dz = z as f64 - blob.center[0];
                    let dy = y as f64 - blob.center[1];
                    let dx = x as f64 - blob.center[2];
                    let d2 = (dz * dz + dy * dy + dx * dx) / (blob.sigma * blob.sigma);
                    if d2 < 9.0 {
                        hu += blob.amplitude * (-d2 / 2.0).exp();
                    }
                }
                for &(center, radius, amplitude) in &anomalies {
                    let dz = z as f64 - center[0];
                    let dy = y as f64 - center[1];
                    let dx = x as f64 - center[2];
                    let d2 = (dz * dz + dy * dy + dx * dx) / (radius * radius);
                    if d2 < 4.5 {
                        hu += amplitude * (-2.0 * d2).exp();
                    }
                }
                voxels.push(hu as f32);
            }
        }
    }
    VolumeGrid::new(
        spec.shape,
        [2.0, 1.0, 1.0],
        format!("synth-{:016x}", spec.rng_seed),
        voxels,
    )
}

/// Labels from the spec's pattern, or sampled per organ from the class prior.
pub fn study_labels(spec: &SyntheticSpec) -> Result<OrganLabelTriple> {
    spec.validate()?;
    if let Some(pattern) = spec.injury_pattern {
        return Ok(pattern);
    }
    let mut rng = rng_for(spec.rng_seed, stream::SYNTH_LABELS, 0);
    let total: f64 = spec.class_prior.iter().sum();
    let mut labels = OrganLabelTriple::ALL_HEALTHY;
    for organ in Organ::ALL {
        let draw: f64 = rng.gen_range(0.0..total);
        let mut acc = 0.0;
        let mut picked = InjuryLabel::High;
        for (i, &p) in spec.class_prior.iter().enumerate() {
            acc += p;
            if draw < acc {
                picked = InjuryLabel::from_index(i)?;
                break;
            }
        }
        labels.set(organ, picked);
    }
    Ok(labels)
}

/// Volume plus ground-truth labels consistent with the planted anomalies.
pub fn generate_synthetic_labeled_study(
    spec: &SyntheticSpec,
) -> Result<(VolumeGrid, OrganLabelTriple)> {
    let labels = study_labels(spec)?;
    let concrete = SyntheticSpec { injury_pattern: Some(labels), ..spec.clone() };
    let volume = generate_synthetic_volume(&concrete)?;
    Ok((volume, labels))
}
