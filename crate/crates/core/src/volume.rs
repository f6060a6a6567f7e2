//! 3D volumes, intensity preprocessing and sagittal slicing.
//!
//! Voxels are stored x-fastest: `index = x + nx * (y + ny * z)`. A sagittal
//! slice fixes `x`; its rows run along `y` and its columns along `z`, so the
//! slice for plane `x = i` has shape `(ny, nz)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::slice::Slice;

/// Voxel spacing in millimetres along x, y, z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub const UNIT: Spacing = Spacing([1.0, 1.0, 1.0]);

    pub fn new(sx: f64, sy: f64, sz: f64) -> Result<Self> {
        let s = Spacing([sx, sy, sz]);
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(invalid(format!("spacing must be positive, got {:?}", self.0)))
        }
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.0[0] * self.0[1] * self.0[2]
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self::UNIT
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: Spacing,
    data: Vec<f32>,
    pub contrast_tag: String,
    pub subject_id: String,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(invalid(format!("volume dims must be positive, got {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(invalid(format!(
                "volume {dims:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        spacing.validate()?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite voxel at linear index {i}")));
        }
        Ok(Self {
            dims,
            spacing,
            data,
            contrast_tag: String::new(),
            subject_id: String::new(),
        })
    }

    pub fn from_fn(
        dims: [usize; 3],
        spacing: Spacing,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn with_tags(mut self, contrast_tag: impl Into<String>, subject_id: impl Into<String>) -> Self {
        self.contrast_tag = contrast_tag.into();
        self.subject_id = subject_id.into();
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn same_geometry(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    /// Applies `f` voxelwise, keeping geometry and tags.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
            contrast_tag: self.contrast_tag.clone(),
            subject_id: self.subject_id.clone(),
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Which voxels take part in the percentile ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PercentileScope {
    #[default]
    AllVoxels,
    /// Rank only nonzero voxels; zeros are left as they are.
    NonzeroOnly,
}

/// Nearest-rank quantile of an ascending-sorted sample: the value at 1-based
/// rank `max(1, ceil(q * n))`.
pub fn nearest_rank(sorted: &[f32], q: f64) -> f32 {
    let n = sorted.len();
    // q * n carries rounding noise (0.999 * 1000 is not exactly 999)
    let rank = ((q * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Clamps intensities to the `[p, 1 − p]` nearest-rank quantile range.
pub fn clip_percentiles(v: &Volume, p: f64) -> Result<Volume> {
    clip_percentiles_with(v, p, PercentileScope::AllVoxels)
}

pub fn clip_percentiles_with(v: &Volume, p: f64, scope: PercentileScope) -> Result<Volume> {
    if !(0.0..0.5).contains(&p) {
        return Err(invalid(format!("percentile fraction {p} outside [0, 0.5)")));
    }
    let mut ranked: Vec<f32> = match scope {
        PercentileScope::AllVoxels => v.data.clone(),
        PercentileScope::NonzeroOnly => v.data.iter().copied().filter(|&x| x != 0.0).collect(),
    };
    if ranked.is_empty() {
        return Err(invalid("no voxels to rank for percentile clipping"));
    }
    if p == 0.0 {
        return Ok(v.clone());
    }
    ranked.sort_by(f32::total_cmp);
    let lo = nearest_rank(&ranked, p);
    let hi = nearest_rank(&ranked, 1.0 - p);
    Ok(match scope {
        PercentileScope::AllVoxels => v.map(|x| x.clamp(lo, hi)),
        PercentileScope::NonzeroOnly => v.map(|x| if x == 0.0 { 0.0 } else { x.clamp(lo, hi) }),
    })
}

/// Rescales the volume affinely so its minimum maps to 0 and maximum to 1.
pub fn normalize_unit(v: &Volume) -> Result<Volume> {
    let (lo, hi) = v.min_max();
    if hi <= lo {
        return Err(Error::DegenerateInput(format!(
            "cannot normalize a constant volume (value {lo})"
        )));
    }
    let lo = lo as f64;
    let range = hi as f64 - lo;
    Ok(v.map(|x| ((x as f64 - lo) / range) as f32))
}

/// Percentile clipping followed by unit normalization.
pub fn preprocess(v: &Volume, p: f64) -> Result<Volume> {
    normalize_unit(&clip_percentiles(v, p)?)
}

pub fn sagittal_slice(v: &Volume, x: usize) -> Slice {
    let [_, ny, nz] = v.dims;
    Slice::from_fn(ny, nz, |y, z| v.get(x, y, z) as f64)
}

/// One slice per x plane, in ascending x.
pub fn slice_sagittal(v: &Volume) -> Vec<Slice> {
    (0..v.dims[0]).map(|x| sagittal_slice(v, x)).collect()
}

/// Inverse of [`slice_sagittal`]. Values are stored at single precision.
pub fn stack_sagittal(
    slices: &[Slice],
    spacing: Spacing,
    contrast_tag: &str,
    subject_id: &str,
) -> Result<Volume> {
    let first = slices.first().ok_or_else(|| invalid("cannot stack zero slices"))?;
    let (ny, nz) = first.shape();
    if let Some(i) = slices.iter().position(|s| s.shape() != (ny, nz)) {
        return Err(invalid(format!(
            "slice {i} has shape {:?}, expected {:?}",
            slices[i].shape(),
            (ny, nz)
        )));
    }
    let nx = slices.len();
    let mut data = vec![0.0f32; nx * ny * nz];
    for (x, s) in slices.iter().enumerate() {
        for y in 0..ny {
            for z in 0..nz {
                data[x + nx * (y + ny * z)] = s.get(y, z) as f32;
            }
        }
    }
    Ok(Volume::new([nx, ny, nz], spacing, data)?.with_tags(contrast_tag, subject_id))
}

/// Where a cropped slice sat inside its original frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub row: usize,
    pub col: usize,
    pub full_height: usize,
    pub full_width: usize,
}

/// Symmetric crop. An odd margin leaves the extra row or column on the
/// leading (top/left) side being removed from, i.e. the window starts at
/// `floor(margin / 2)`.
pub fn center_crop(s: &Slice, out_h: usize, out_w: usize) -> Result<(Slice, CropWindow)> {
    let (h, w) = s.shape();
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(invalid(format!("cannot crop {h}x{w} to {out_h}x{out_w}")));
    }
    let row = (h - out_h) / 2;
    let col = (w - out_w) / 2;
    let cropped = Slice::from_fn(out_h, out_w, |r, c| s.get(row + r, col + c));
    Ok((
        cropped,
        CropWindow {
            row,
            col,
            full_height: h,
            full_width: w,
        },
    ))
}

/// Places a cropped slice back into a zero-filled frame of the original size.
pub fn uncrop(s: &Slice, window: &CropWindow) -> Result<Slice> {
    let (h, w) = s.shape();
    if window.row + h > window.full_height || window.col + w > window.full_width {
        return Err(invalid("crop window does not fit the original frame"));
    }
    let mut out = Slice::zeros(window.full_height, window.full_width);
    for r in 0..h {
        for c in 0..w {
            out.set(window.row + r, window.col + c, s.get(r, c));
        }
    }
    Ok(out)
}
