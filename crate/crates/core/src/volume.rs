//! Volumes, the volume file pair, and intensity/spacing preprocessing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// A dense 3D scalar grid, x-fastest, with physical voxel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(invalid!("volume dims must be positive, got {dims:?}"));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(invalid!("voxel spacing must be positive, got {spacing:?}"));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if voxels.len() != expected {
            return Err(invalid!(
                "voxel count {} does not match dims {dims:?} ({expected})",
                voxels.len()
            ));
        }
        if let Some(index) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            dims,
            spacing,
            voxels,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f32) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims[0] * dims[1] * dims[2]])
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut voxels = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, voxels)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    /// Mutable access for in-crate transforms; callers must keep values finite.
    pub(crate) fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    fn with_voxels(&self, voxels: Vec<f32>) -> Self {
        Self {
            dims: self.dims,
            spacing: self.spacing,
            voxels,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    order: String,
}

/// Returns the `(header, payload)` paths for a volume stem.
///
/// `path` may name the stem itself or either member of the pair.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let name = stem.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    (
        stem.with_file_name(format!("{name}.json")),
        stem.with_file_name(format!("{name}.raw")),
    )
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (header_path, raw_path) = volume_paths(path.as_ref());
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: VolumeHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(&header_path, e.to_string()))?;
    if header.dtype != "f32le" {
        return Err(Error::format(&header_path, format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.order != "x-fastest" {
        return Err(Error::format(&header_path, format!("unsupported order {:?}", header.order)));
    }
    if header.dims.iter().any(|&d| d == 0) {
        return Err(Error::format(&header_path, "dims must be positive"));
    }
    if header.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::format(&header_path, "spacing must be positive"));
    }
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let n = header.dims.iter().product::<usize>();
    if bytes.len() != 4 * n {
        return Err(Error::LengthMismatch {
            expected: 4 * n,
            found: bytes.len(),
        });
    }
    let voxels: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(header.dims, header.spacing_mm, voxels)
}

pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let (header_path, raw_path) = volume_paths(path.as_ref());
    let header = VolumeHeader {
        dims: volume.dims,
        spacing_mm: volume.spacing,
        dtype: "f32le".into(),
        order: "x-fastest".into(),
    };
    let text = crate::json::to_sorted_string(&header)
        .map_err(|e| Error::format(&header_path, e.to_string()))?;
    fs::write(&header_path, text).map_err(|e| Error::io(&header_path, e))?;
    let mut bytes = Vec::with_capacity(4 * volume.len());
    for v in &volume.voxels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

/// Percentile of pre-sorted data by linear interpolation between closest
/// ranks: rank = p/100 * (n - 1), zero-based.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Percentile of unsorted data under the same convention as [`percentile_sorted`].
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, p)
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

struct AxisSample {
    i0: usize,
    i1: usize,
    w1: f64,
}

fn axis_samples(n_in: usize, n_out: usize, ratio: f64) -> Vec<AxisSample> {
    let max = (n_in - 1) as f64;
    (0..n_out)
        .map(|j| {
            // voxel-center convention: physical (j + 0.5) * target maps to
            // continuous input index (j + 0.5) * target / spacing - 0.5
            let u = ((j as f64 + 0.5) * ratio - 0.5).clamp(0.0, max);
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            AxisSample {
                i0,
                i1,
                w1: u - i0 as f64,
            }
        })
        .collect()
}

/// Resamples to `target_spacing` by trilinear interpolation.
///
/// Output voxel centers that fall outside the input grid are clamped to the
/// nearest input voxel center.
pub fn resample_trilinear(volume: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    if target_spacing.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(invalid!("target spacing must be positive, got {target_spacing:?}"));
    }
    let mut out_dims = [0usize; 3];
    let mut tables = Vec::with_capacity(3);
    for a in 0..3 {
        let n = round_half_up(volume.dims[a] as f64 * volume.spacing[a] / target_spacing[a]).max(1);
        out_dims[a] = n;
        tables.push(axis_samples(volume.dims[a], n, target_spacing[a] / volume.spacing[a]));
    }
    let (tx, ty, tz) = (&tables[0], &tables[1], &tables[2]);
    let v = |x, y, z| f64::from(volume.get(x, y, z));
    let out = Volume::from_fn(out_dims, target_spacing, |x, y, z| {
        let (sx, sy, sz) = (&tx[x], &ty[y], &tz[z]);
        let lerp = |a: f64, b: f64, w: f64| a * (1.0 - w) + b * w;
        let c00 = lerp(v(sx.i0, sy.i0, sz.i0), v(sx.i1, sy.i0, sz.i0), sx.w1);
        let c10 = lerp(v(sx.i0, sy.i1, sz.i0), v(sx.i1, sy.i1, sz.i0), sx.w1);
        let c01 = lerp(v(sx.i0, sy.i0, sz.i1), v(sx.i1, sy.i0, sz.i1), sx.w1);
        let c11 = lerp(v(sx.i0, sy.i1, sz.i1), v(sx.i1, sy.i1, sz.i1), sx.w1);
        let c0 = lerp(c00, c10, sy.w1);
        let c1 = lerp(c01, c11, sy.w1);
        lerp(c0, c1, sz.w1) as f32
    })?;
    Ok(out)
}

/// Clamps every voxel to the `[lo, hi]` percentile range of the volume.
pub fn clip_percentiles(volume: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) {
        return Err(invalid!("percentiles must lie in [0, 100], got {lo} and {hi}"));
    }
    if lo >= hi {
        return Err(invalid!("lower percentile {lo} must be below upper percentile {hi}"));
    }
    let values: Vec<f64> = volume.voxels.iter().map(|&v| f64::from(v)).collect();
    let mut sorted = values;
    sorted.sort_by(f64::total_cmp);
    let p_lo = percentile_sorted(&sorted, lo) as f32;
    let p_hi = percentile_sorted(&sorted, hi) as f32;
    Ok(volume.with_voxels(volume.voxels.iter().map(|v| v.clamp(p_lo, p_hi)).collect()))
}

/// Rescales intensities to `[0, 1]`. A constant volume maps to all zeros.
pub fn normalize_minmax(volume: &Volume) -> Volume {
    let (lo, hi) = volume.min_max();
    if hi <= lo {
        return volume.with_voxels(vec![0.0; volume.len()]);
    }
    let (lo, range) = (f64::from(lo), f64::from(hi) - f64::from(lo));
    volume.with_voxels(
        volume
            .voxels
            .iter()
            .map(|&v| ((f64::from(v) - lo) / range).clamp(0.0, 1.0) as f32)
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessOrder {
    /// Percentile clipping, then min-max normalization. Output spans [0, 1].
    #[default]
    ClipThenNormalize,
    /// Min-max normalization, then percentile clipping. Output spans
    /// [p_lo, p_hi] of the normalized intensities.
    NormalizeThenClip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_spacing: [f64; 3],
    pub lo_percentile: f64,
    pub hi_percentile: f64,
    pub order: PreprocessOrder,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_spacing: [0.5, 0.5, 3.6],
            lo_percentile: 1.0,
            hi_percentile: 99.0,
            order: PreprocessOrder::ClipThenNormalize,
        }
    }
}

/// Resample, then clip and normalize in the configured order.
pub fn preprocess(volume: &Volume, config: &PreprocessConfig) -> Result<Volume> {
    let resampled = resample_trilinear(volume, config.target_spacing)?;
    match config.order {
        PreprocessOrder::ClipThenNormalize => {
            let clipped = clip_percentiles(&resampled, config.lo_percentile, config.hi_percentile)?;
            Ok(normalize_minmax(&clipped))
        }
        PreprocessOrder::NormalizeThenClip => {
            let normalized = normalize_minmax(&resampled);
            clip_percentiles(&normalized, config.lo_percentile, config.hi_percentile)
        }
    }
}
