//! Synthetic phantoms: smoothed-noise background, a dark organ ellipsoid and,
//! for positive cases, a bright lesion ellipsoid inside the organ.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, seeded, SeededRng};
use crate::trainer::{LabeledManifest, LabeledRecord, UnlabeledManifest, UnlabeledRecord};
use crate::volume::{save_volume, Volume};

/// Patient label from per-lesion Gleason scores: positive iff the highest
/// score is at least 7.
pub fn derive_label(gleason_scores: &[u32]) -> Result<u8> {
    let max = *gleason_scores.iter().max().ok_or_else(|| invalid!("no Gleason scores"))?;
    if let Some(s) = gleason_scores.iter().find(|s| !(2..=10).contains(*s)) {
        return Err(invalid!("Gleason score {s} outside [2, 10]"));
    }
    Ok(u8::from(max >= 7))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub background_level: f64,
    pub organ_level: f64,
    /// Peak absolute value of the smoothed noise.
    pub texture_amplitude: f64,
    /// Passes of the width-3 box blur applied to the noise.
    pub blur_passes: usize,
    pub organ_radii_min: [f64; 3],
    pub organ_radii_max: [f64; 3],
    /// Largest offset of the organ centre from the volume centre, per axis (mm).
    pub organ_jitter: [f64; 3],
    pub lesion_radii_min: [f64; 3],
    pub lesion_radii_max: [f64; 3],
    pub lesion_delta: f64,
    /// Share of positive cases.
    pub balance: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [32, 32, 16],
            spacing: [0.5, 0.5, 3.6],
            background_level: 0.6,
            organ_level: 0.35,
            texture_amplitude: 0.15,
            blur_passes: 2,
            organ_radii_min: [4.5, 4.5, 16.0],
            organ_radii_max: [6.5, 6.5, 22.0],
            organ_jitter: [1.5, 1.5, 3.6],
            lesion_radii_min: [2.0, 2.0, 3.6],
            lesion_radii_max: [3.0, 3.0, 7.2],
            lesion_delta: 0.6,
            balance: 0.5,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) || self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(invalid!("dims and spacing must be positive"));
        }
        for a in 0..3 {
            if !(0.0 < self.organ_radii_min[a] && self.organ_radii_min[a] <= self.organ_radii_max[a]) {
                return Err(invalid!("organ radii range on axis {a} is empty"));
            }
            if !(0.0 < self.lesion_radii_min[a] && self.lesion_radii_min[a] <= self.lesion_radii_max[a]) {
                return Err(invalid!("lesion radii range on axis {a} is empty"));
            }
            if self.lesion_radii_max[a] >= self.organ_radii_min[a] {
                return Err(invalid!("lesion radius on axis {a} may not fit inside the organ"));
            }
            if !(self.organ_jitter[a] >= 0.0) {
                return Err(invalid!("organ jitter must be non-negative"));
            }
        }
        if !(self.lesion_delta > 0.0 && self.lesion_delta <= 1.0) {
            return Err(invalid!("lesion delta must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.balance) {
            return Err(invalid!("balance must lie in [0, 1]"));
        }
        if !(self.texture_amplitude >= 0.0) {
            return Err(invalid!("texture amplitude must be non-negative"));
        }
        Ok(())
    }
}

/// Axis-aligned ellipsoid in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x as f64, y as f64, z as f64];
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }

    /// x-fastest membership mask over a volume of `dims`.
    pub fn mask(&self, dims: [usize; 3]) -> Vec<bool> {
        let mut out = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    out.push(self.contains(x, y, z));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub organ: Ellipsoid,
    pub lesion: Option<Ellipsoid>,
}

fn uniform3<R: Rng + ?Sized>(lo: [f64; 3], hi: [f64; 3], rng: &mut R) -> [f64; 3] {
    [0, 1, 2].map(|a| if lo[a] < hi[a] { rng.random_range(lo[a]..=hi[a]) } else { lo[a] })
}

fn box_blur_axis(data: &mut [f64], dims: [usize; 3], axis: usize) {
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let len = dims[axis];
    let src = data.to_vec();
    for (i, out) in data.iter_mut().enumerate() {
        let pos = (i / stride) % len;
        let prev = if pos > 0 { i - stride } else { i };
        let next = if pos + 1 < len { i + stride } else { i };
        *out = (src[prev] + src[i] + src[next]) / 3.0;
    }
}

/// Uniform noise smoothed by `passes` separable width-3 box blurs (edges
/// replicated), rescaled to peak magnitude `amplitude`.
fn smoothed_noise(dims: [usize; 3], passes: usize, amplitude: f64, rng: &mut SeededRng) -> Vec<f64> {
    let mut noise: Vec<f64> = (0..dims.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
    for _ in 0..passes {
        for axis in 0..3 {
            box_blur_axis(&mut noise, dims, axis);
        }
    }
    let peak = noise.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        noise.iter_mut().for_each(|v| *v *= amplitude / peak);
    }
    noise
}

/// Generates one phantom with its geometry. The background, texture and organ
/// draws come first, so a positive phantom and its negative twin of the same
/// seed differ only inside the lesion.
pub fn generate_phantom_with_geometry(config: &PhantomConfig, label: u8, rng: &mut SeededRng) -> Result<Phantom> {
    config.validate()?;
    if label > 1 {
        return Err(invalid!("label must be 0 or 1, got {label}"));
    }
    let dims = config.dims;
    let to_vox = |mm: [f64; 3]| [0, 1, 2].map(|a| mm[a] / config.spacing[a]);
    let texture = smoothed_noise(dims, config.blur_passes, config.texture_amplitude, rng);

    let organ_radii = to_vox(uniform3(config.organ_radii_min, config.organ_radii_max, rng));
    let jitter = to_vox(uniform3(config.organ_jitter.map(|j| -j), config.organ_jitter, rng));
    let organ = Ellipsoid {
        center: [0, 1, 2].map(|a| (dims[a] as f64 - 1.0) / 2.0 + jitter[a]),
        radii: organ_radii,
    };

    let lesion = (label == 1).then(|| {
        let radii = to_vox(uniform3(config.lesion_radii_min, config.lesion_radii_max, rng));
        // an offset with |offset / organ radii| <= 1 - max(r / R) keeps the
        // whole lesion inside the organ (triangle inequality in the scaled norm)
        let slack = 1.0 - (0..3).map(|a| radii[a] / organ.radii[a]).fold(0.0, f64::max);
        let unit = loop {
            let u = [0, 1, 2].map(|_| rng.random_range(-1.0..=1.0));
            if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                break u;
            }
        };
        Ellipsoid {
            center: [0, 1, 2].map(|a| organ.center[a] + unit[a] * slack * organ.radii[a]),
            radii,
        }
    });

    let mut i = 0;
    let volume = Volume::from_fn(dims, config.spacing, |x, y, z| {
        let mut v = if organ.contains(x, y, z) { config.organ_level } else { config.background_level };
        v += texture[i];
        if lesion.is_some_and(|l| l.contains(x, y, z)) {
            v += config.lesion_delta;
        }
        i += 1;
        v.clamp(0.0, 1.0) as f32
    })?;
    Ok(Phantom { volume, organ, lesion })
}

pub fn generate_phantom(config: &PhantomConfig, label: u8, rng: &mut SeededRng) -> Result<Volume> {
    generate_phantom_with_geometry(config, label, rng).map(|p| p.volume)
}

/// Manifests written by [`generate_dataset`].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub unlabeled: UnlabeledManifest,
    pub labeled: LabeledManifest,
    pub unlabeled_path: PathBuf,
    pub labeled_path: PathBuf,
}

pub const UNLABELED_MANIFEST: &str = "unlabeled.csv";
pub const LABELED_MANIFEST: &str = "labeled.csv";

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Writes `n_unlabeled + n_labeled` phantoms under `out_dir/volumes` plus the
/// two CSV manifests. Exactly round-half-up(`balance` x `n_labeled`) labeled
/// cases are positive. Unlabeled phantoms carry lesions at the same rate but
/// their labels are not recorded. Each phantom is seeded from `(seed, id)`.
pub fn generate_dataset(
    config: &PhantomConfig,
    n_unlabeled: usize,
    n_labeled: usize,
    balance: f64,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Dataset> {
    config.validate()?;
    if !(0.0..=1.0).contains(&balance) {
        return Err(invalid!("balance must lie in [0, 1], got {balance}"));
    }
    let out_dir = out_dir.as_ref();
    let vol_dir = out_dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;

    let mut label_rng = seeded(derive_seed(seed, "labels"));
    let n_pos = round_half_up(balance * n_labeled as f64).min(n_labeled);
    let mut labels: Vec<u8> = (0..n_labeled).map(|i| u8::from(i < n_pos)).collect();
    labels.shuffle(&mut label_rng);
    let hidden: Vec<u8> = (0..n_unlabeled).map(|_| u8::from(label_rng.random_bool(balance))).collect();

    let write = |id: &str, label: u8| -> Result<PathBuf> {
        let mut rng = seeded(derive_seed(seed, &format!("phantom/{id}")));
        let v = generate_phantom(config, label, &mut rng)?;
        let rel = PathBuf::from("volumes").join(format!("{id}.json"));
        save_volume(&v, out_dir.join(&rel))?;
        Ok(rel)
    };

    let mut unlabeled = UnlabeledManifest {
        records: Vec::with_capacity(n_unlabeled),
        base_dir: out_dir.to_path_buf(),
    };
    for (i, &l) in hidden.iter().enumerate() {
        let id = format!("u{i:04}");
        let volume = write(&id, l)?;
        unlabeled.records.push(UnlabeledRecord { id, volume });
    }
    let mut labeled = LabeledManifest {
        records: Vec::with_capacity(n_labeled),
        base_dir: out_dir.to_path_buf(),
    };
    for (i, &label) in labels.iter().enumerate() {
        let id = format!("l{i:04}");
        let volume = write(&id, label)?;
        labeled.records.push(LabeledRecord { id, volume, label });
    }
    let unlabeled_path = out_dir.join(UNLABELED_MANIFEST);
    let labeled_path = out_dir.join(LABELED_MANIFEST);
    unlabeled.write(&unlabeled_path)?;
    labeled.write(&labeled_path)?;
    Ok(Dataset {
        unlabeled,
        labeled,
        unlabeled_path,
        labeled_path,
    })
}

#[cfg(test)]
mod tests;
