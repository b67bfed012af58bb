//! Crop geometry for the overlap-prediction pretext task: the non-overlapping
//! base-crop grid, the uniformly positioned random crop, IoU overlap targets,
//! and pixel patch extraction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SliceStack;
use crate::error::{Error, Result};

/// Axis-aligned integer crop on one axial slice. `x0`/`y0` are the top-left
/// pixel, extents are at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub slice_index: usize,
}

impl CropBox {
    pub fn new(x0: usize, y0: usize, w: usize, h: usize, slice_index: usize) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::InvalidArgument(format!("degenerate crop extent {w}x{h}")));
        }
        Ok(CropBox { x0, y0, w, h, slice_index })
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    fn x1(&self) -> usize {
        self.x0 + self.w
    }

    fn y1(&self) -> usize {
        self.y0 + self.h
    }

    pub fn fits_in(&self, slice_w: usize, slice_h: usize) -> bool {
        self.x1() <= slice_w && self.y1() <= slice_h
    }
}

/// Geometry of the base-crop grid on a slice: `rows * cols` disjoint cells of
/// `crop_w * crop_h` pixels tiling the top-left region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropGridSpec {
    pub rows: usize,
    pub cols: usize,
    pub crop_w: usize,
    pub crop_h: usize,
    pub slice_w: usize,
    pub slice_h: usize,
}

impl CropGridSpec {
    pub fn new(
        rows: usize,
        cols: usize,
        crop_w: usize,
        crop_h: usize,
        slice_w: usize,
        slice_h: usize,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || crop_w == 0 || crop_h == 0 {
            return Err(Error::InvalidArgument("grid dimensions must be positive".into()));
        }
        if rows * crop_h > slice_h || cols * crop_w > slice_w {
            return Err(Error::InvalidArgument(format!(
                "grid {rows}x{cols} of {crop_w}x{crop_h} crops does not fit in {slice_w}x{slice_h} slice"
            )));
        }
        Ok(CropGridSpec { rows, cols, crop_w, crop_h, slice_w, slice_h })
    }

    /// Number of base crops.
    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Default geometry: 4x4 grid of 48x48 cells on a 192x192 slice.
    pub fn default_for_slice(slice_w: usize, slice_h: usize) -> Result<Self> {
        CropGridSpec::new(4, 4, slice_w / 4, slice_h / 4, slice_w, slice_h)
    }
}

/// Per-cell overlap targets in grid order, each in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapVector {
    pub r: Vec<f64>,
}

impl OverlapVector {
    pub fn new(r: Vec<f64>) -> Result<Self> {
        if let Some(&bad) = r.iter().find(|v| !(0.0..=1.0).contains(*v) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("overlap value {bad} outside [0, 1]")));
        }
        Ok(OverlapVector { r })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

/// How a random crop's overlap with a base cell is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMeasure {
    /// Intersection over union.
    #[default]
    Iou,
    /// Intersection over the random crop's own area.
    OverlapFraction,
}

/// Row-major grid of `rows * cols` disjoint base crops.
pub fn make_base_grid(spec: &CropGridSpec, slice_index: usize) -> Result<Vec<CropBox>> {
    let mut boxes = Vec::with_capacity(spec.cell_count());
    for row in 0..spec.rows {
        for col in 0..spec.cols {
            boxes.push(CropBox::new(
                col * spec.crop_w,
                row * spec.crop_h,
                spec.crop_w,
                spec.crop_h,
                slice_index,
            )?);
        }
    }
    Ok(boxes)
}

/// Uniformly positioned random crop of the grid's cell size.
pub fn sample_random_crop(
    spec: &CropGridSpec,
    slice_index: usize,
    rng: &mut impl Rng,
) -> Result<CropBox> {
    sample_random_crop_sized(spec, spec.crop_w, spec.crop_h, slice_index, rng)
}

/// Uniformly positioned random crop of an explicit size.
pub fn sample_random_crop_sized(
    spec: &CropGridSpec,
    w: usize,
    h: usize,
    slice_index: usize,
    rng: &mut impl Rng,
) -> Result<CropBox> {
    if w == 0 || h == 0 || w > spec.slice_w || h > spec.slice_h {
        return Err(Error::InvalidArgument(format!(
            "crop {w}x{h} does not fit in {}x{} slice",
            spec.slice_w, spec.slice_h
        )));
    }
    let x0 = rng.gen_range(0..=spec.slice_w - w);
    let y0 = rng.gen_range(0..=spec.slice_h - h);
    CropBox::new(x0, y0, w, h, slice_index)
}

fn intersection_area(a: &CropBox, b: &CropBox) -> usize {
    let x_lo = a.x0.max(b.x0);
    let x_hi = a.x1().min(b.x1());
    let y_lo = a.y0.max(b.y0);
    let y_hi = a.y1().min(b.y1());
    if x_hi <= x_lo || y_hi <= y_lo {
        0
    } else {
        (x_hi - x_lo) * (y_hi - y_lo)
    }
}

/// Intersection over union from integer coordinates; 0 for disjoint boxes.
pub fn iou(a: &CropBox, b: &CropBox) -> Result<f64> {
    if a.slice_index != b.slice_index {
        return Err(Error::InvalidArgument(format!(
            "iou of boxes on different slices ({} vs {})",
            a.slice_index, b.slice_index
        )));
    }
    let inter = intersection_area(a, b);
    if inter == 0 {
        return Ok(0.0);
    }
    let union = a.area() + b.area() - inter;
    Ok(inter as f64 / union as f64)
}

/// Overlap under the configured measure.
pub fn overlap(measure: OverlapMeasure, random_crop: &CropBox, cell: &CropBox) -> Result<f64> {
    match measure {
        OverlapMeasure::Iou => iou(random_crop, cell),
        OverlapMeasure::OverlapFraction => {
            if random_crop.slice_index != cell.slice_index {
                return Err(Error::InvalidArgument(
                    "overlap of boxes on different slices".into(),
                ));
            }
            Ok(intersection_area(random_crop, cell) as f64 / random_crop.area() as f64)
        }
    }
}

/// Overlap targets of a random crop against every grid cell, grid order.
pub fn overlap_vector(c: &CropBox, grid: &[CropBox]) -> Result<OverlapVector> {
    overlap_vector_with(OverlapMeasure::Iou, c, grid)
}

pub fn overlap_vector_with(
    measure: OverlapMeasure,
    c: &CropBox,
    grid: &[CropBox],
) -> Result<OverlapVector> {
    let r = grid.iter().map(|cell| overlap(measure, c, cell)).collect::<Result<Vec<f64>>>()?;
    OverlapVector::new(r)
}

/// Exact pixel copy of the box from its slice; no resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
}

impl Patch {
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.w + x]
    }
}

pub fn extract_patch(stack: &SliceStack, b: &CropBox) -> Result<Patch> {
    let [t, slice_h, slice_w] = stack.shape();
    if b.slice_index >= t {
        return Err(Error::InvalidArgument(format!(
            "slice index {} out of range (T = {t})",
            b.slice_index
        )));
    }
    if !b.fits_in(slice_w, slice_h) {
        return Err(Error::InvalidArgument(format!(
            "box ({},{}) {}x{} exceeds slice {}x{}",
            b.x0, b.y0, b.w, b.h, slice_w, slice_h
        )));
    }
    let slice = stack.slice(b.slice_index);
    let mut values = Vec::with_capacity(b.area());
    for dy in 0..b.h {
        let row = (b.y0 + dy) * slice_w + b.x0;
        values.extend_from_slice(&slice[row..row + b.w]);
    }
    Ok(Patch { h: b.h, w: b.w, values })
}
