//! Volumetric data: domain types, HU windowing, trilinear resampling,
//! foreground cropping, and the preprocessing pipeline that turns a raw
//! volume into a fixed-shape normalized slice stack.

pub mod labels;
pub mod rvol;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw voxel grid in Hounsfield units, Z-major ([Z, Y, X], Z slowest).
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    shape: [usize; 3],
    spacing: [f32; 3],
    pub patient_id: String,
    voxels: Vec<f32>,
}

impl VolumeGrid {
    pub fn new(
        shape: [usize; 3],
        spacing: [f32; 3],
        patient_id: impl Into<String>,
        voxels: Vec<f32>,
    ) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("volume shape {shape:?} has a zero axis")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("spacing {spacing:?} must be positive")));
        }
        let expect = shape[0] * shape[1] * shape[2];
        if voxels.len() != expect {
            return Err(Error::InvalidArgument(format!(
                "voxel count {} does not match shape {:?} ({} expected)",
                voxels.len(),
                shape,
                expect
            )));
        }
        if let Some(idx) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite voxel at linear index {idx}")));
        }
        Ok(VolumeGrid { shape, spacing, patient_id: patient_id.into(), voxels })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[(z * self.shape[1] + y) * self.shape[2] + x]
    }
}

/// Normalized slice sequence in [0, 1], [T, H, W] row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    shape: [usize; 3],
    pub source_patient_id: String,
    slices: Vec<f32>,
}

impl SliceStack {
    pub fn new(shape: [usize; 3], source_patient_id: impl Into<String>, slices: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("stack shape {shape:?} has a zero axis")));
        }
        if slices.len() != shape[0] * shape[1] * shape[2] {
            return Err(Error::InvalidArgument(format!(
                "slice buffer length {} does not match shape {:?}",
                slices.len(),
                shape
            )));
        }
        if let Some(idx) = slices.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "normalized value {} at index {idx} outside [0, 1]",
                slices[idx]
            )));
        }
        Ok(SliceStack { shape, source_patient_id: source_patient_id.into(), slices })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.slices
    }

    /// One H×W slice, row-major.
    pub fn slice(&self, t: usize) -> &[f32] {
        let plane = self.shape[1] * self.shape[2];
        &self.slices[t * plane..(t + 1) * plane]
    }

    #[inline]
    pub fn at(&self, t: usize, y: usize, x: usize) -> f32 {
        self.slices[(t * self.shape[1] + y) * self.shape[2] + x]
    }
}

/// Windowed volume before resampling: same geometry as its source, values in [0, 1].
#[derive(Debug, Clone)]
pub struct NormalizedVolume {
    pub shape: [usize; 3],
    pub patient_id: String,
    pub values: Vec<f32>,
}

/// Windowing + resampling parameters.
///
/// Defaults are the standard abdominal soft-tissue window (center 50 HU,
/// width 400 HU); the foreground threshold/margin drive the non-body removal
/// step. All knobs are configurable because none is pinned by the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub window_center: f32,
    pub window_width: f32,
    pub target_shape: [usize; 3],
    pub foreground_crop: bool,
    #[serde(default = "default_foreground_threshold")]
    pub foreground_threshold_hu: f32,
    #[serde(default = "default_foreground_margin")]
    pub foreground_margin: usize,
}

fn default_foreground_threshold() -> f32 {
    -500.0
}

fn default_foreground_margin() -> usize {
    2
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_width > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "window_width must be positive, got {}",
                self.window_width
            )));
        }
        if self.target_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "target shape {:?} has a zero axis",
                self.target_shape
            )));
        }
        Ok(())
    }

    /// Pretraining default: (32, 192, 192), abdominal window, foreground crop on.
    pub fn pretrain_default() -> Self {
        PreprocessSpec {
            window_center: 50.0,
            window_width: 400.0,
            target_shape: [32, 192, 192],
            foreground_crop: true,
            foreground_threshold_hu: default_foreground_threshold(),
            foreground_margin: default_foreground_margin(),
        }
    }

    /// Downstream default: (96, 256, 256).
    pub fn downstream_default() -> Self {
        PreprocessSpec { target_shape: [96, 256, 256], ..Self::pretrain_default() }
    }
}

/// Map HU into [0, 1] display range: `clamp((hu - (center - width/2)) / width, 0, 1)`.
pub fn window_normalize(v: &VolumeGrid, spec: &PreprocessSpec) -> Result<NormalizedVolume> {
    spec.validate()?;
    let lo = f64::from(spec.window_center) - f64::from(spec.window_width) / 2.0;
    let w = f64::from(spec.window_width);
    let values =
        v.voxels().iter().map(|&hu| (((f64::from(hu) - lo) / w).clamp(0.0, 1.0)) as f32).collect();
    Ok(NormalizedVolume { shape: v.shape(), patient_id: v.patient_id.clone(), values })
}

/// Source coordinate for corner-aligned interpolation.
///
/// Output sample `i` of `out_dim` maps to `i * (in_dim-1) / (out_dim-1)`,
/// so both endpoints land exactly on the input endpoints; a single output
/// sample takes the center.
#[inline]
fn corner_aligned_coord(i: usize, in_dim: usize, out_dim: usize) -> f64 {
    if out_dim == 1 {
        (in_dim - 1) as f64 / 2.0
    } else {
        i as f64 * (in_dim - 1) as f64 / (out_dim - 1) as f64
    }
}

#[inline]
fn interp_axis(c: f64, in_dim: usize) -> (usize, usize, f64) {
    let i0 = c.floor() as usize;
    let i0 = i0.min(in_dim - 1);
    let i1 = (i0 + 1).min(in_dim - 1);
    (i0, i1, c - i0 as f64)
}

/// Trilinear, corner-aligned resampling of a normalized volume to `target`.
pub fn resample_to(v: &NormalizedVolume, target: [usize; 3]) -> Result<SliceStack> {
    if target.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!("target shape {target:?} has a zero axis")));
    }
    if v.values.is_empty() {
        return Err(Error::InvalidArgument("empty input volume".into()));
    }
    let [zi, yi, xi] = v.shape;
    let [zt, yt, xt] = target;
    let mut out = Vec::with_capacity(zt * yt * xt);
    for oz in 0..zt {
        let (z0, z1, fz) = interp_axis(corner_aligned_coord(oz, zi, zt), zi);
        for oy in 0..yt {
            let (y0, y1, fy) = interp_axis(corner_aligned_coord(oy, yi, yt), yi);
            for ox in 0..xt {
                let (x0, x1, fx) = interp_axis(corner_aligned_coord(ox, xi, xt), xi);
                let v000 = f64::from(v.values[(z0 * yi + y0) * xi + x0]);
                let v001 = f64::from(v.values[(z0 * yi + y0) * xi + x1]);
                let v010 = f64::from(v.values[(z0 * yi + y1) * xi + x0]);
                let v011 = f64::from(v.values[(z0 * yi + y1) * xi + x1]);
                let v100 = f64::from(v.values[(z1 * yi + y0) * xi + x0]);
                let v101 = f64::from(v.values[(z1 * yi + y0) * xi + x1]);
                let v110 = f64::from(v.values[(z1 * yi + y1) * xi + x0]);
                let v111 = f64::from(v.values[(z1 * yi + y1) * xi + x1]);
                let c00 = v000 + fx * (v001 - v000);
                let c01 = v010 + fx * (v011 - v010);
                let c10 = v100 + fx * (v101 - v100);
                let c11 = v110 + fx * (v111 - v110);
                let c0 = c00 + fy * (c01 - c00);
                let c1 = c10 + fy * (c11 - c10);
                let val = c0 + fz * (c1 - c0);
                out.push(val.clamp(0.0, 1.0) as f32);
            }
        }
    }
    SliceStack::new(target, v.patient_id.clone(), out)
}

/// Nearest-neighbor variant for label-like data.
pub fn resample_nearest(v: &NormalizedVolume, target: [usize; 3]) -> Result<SliceStack> {
    if target.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!("target shape {target:?} has a zero axis")));
    }
    let [zi, yi, xi] = v.shape;
    let [zt, yt, xt] = target;
    let mut out = Vec::with_capacity(zt * yt * xt);
    for oz in 0..zt {
        let z = (corner_aligned_coord(oz, zi, zt).round() as usize).min(zi - 1);
        for oy in 0..yt {
            let y = (corner_aligned_coord(oy, yi, yt).round() as usize).min(yi - 1);
            for ox in 0..xt {
                let x = (corner_aligned_coord(ox, xi, xt).round() as usize).min(xi - 1);
                out.push(v.values[(z * yi + y) * xi + x]);
            }
        }
    }
    SliceStack::new(target, v.patient_id.clone(), out)
}

/// Result of foreground cropping: the (possibly) cropped volume plus whether
/// any voxel exceeded the threshold.
#[derive(Debug, Clone)]
pub struct ForegroundCrop {
    pub volume: VolumeGrid,
    pub found_foreground: bool,
    /// Inclusive-exclusive bounds per axis, after margin expansion and clamping.
    pub bounds: Option<[[usize; 2]; 3]>,
}

/// Crop to the minimal bounding box of voxels with `hu > threshold`, expanded
/// by `margin` and clamped to the volume. With no foreground, the input is
/// returned unchanged and flagged.
pub fn crop_foreground(v: &VolumeGrid, threshold: f32, margin: usize) -> ForegroundCrop {
    let [zs, ys, xs] = v.shape();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut found = false;
    for z in 0..zs {
        for y in 0..ys {
            for x in 0..xs {
                if v.at(z, y, x) > threshold {
                    found = true;
                    lo[0] = lo[0].min(z);
                    lo[1] = lo[1].min(y);
                    lo[2] = lo[2].min(x);
                    hi[0] = hi[0].max(z);
                    hi[1] = hi[1].max(y);
                    hi[2] = hi[2].max(x);
                }
            }
        }
    }
    if !found {
        return ForegroundCrop { volume: v.clone(), found_foreground: false, bounds: None };
    }
    let dims = [zs, ys, xs];
    let mut bounds = [[0usize; 2]; 3];
    for a in 0..3 {
        bounds[a][0] = lo[a].saturating_sub(margin);
        bounds[a][1] = (hi[a] + 1 + margin).min(dims[a]);
    }
    let mut voxels =
        Vec::with_capacity((bounds[0][1] - bounds[0][0]) * (bounds[1][1] - bounds[1][0]) * (bounds[2][1] - bounds[2][0]));
    for z in bounds[0][0]..bounds[0][1] {
        for y in bounds[1][0]..bounds[1][1] {
            for x in bounds[2][0]..bounds[2][1] {
                voxels.push(v.at(z, y, x));
            }
        }
    }
    let shape = [
        bounds[0][1] - bounds[0][0],
        bounds[1][1] - bounds[1][0],
        bounds[2][1] - bounds[2][0],
    ];
    let volume = VolumeGrid::new(shape, v.spacing(), v.patient_id.clone(), voxels)
        .expect("cropped box keeps invariants");
    ForegroundCrop { volume, found_foreground: true, bounds: Some(bounds) }
}

/// Full pipeline: optional foreground crop, then windowing, then resampling
/// to the spec's target shape.
pub fn preprocess(v: &VolumeGrid, spec: &PreprocessSpec) -> Result<SliceStack> {
    spec.validate()?;
    let cropped;
    let source = if spec.foreground_crop {
        cropped = crop_foreground(v, spec.foreground_threshold_hu, spec.foreground_margin).volume;
        &cropped
    } else {
        v
    };
    let normalized = window_normalize(source, spec)?;
    resample_to(&normalized, spec.target_shape)
}
