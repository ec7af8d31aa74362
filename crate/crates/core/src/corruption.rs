//! Cube partitioning and the static/dynamic corruption policies used for
//! masked-image-modelling pre-training.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::volume::Volume;

/// Axis-aligned block of voxels: `origin + [0, size)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CubeExtent {
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

impl CubeExtent {
    pub fn voxel_count(&self) -> usize {
        self.size.iter().product()
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] < self.origin[a] + self.size[a])
    }
}

/// Non-overlapping tiling of a volume. Trailing cubes on each axis hold the
/// residual when a dimension is not a multiple of the cube size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CubeGrid {
    volume_dims: [usize; 3],
    cube_dims: [usize; 3],
    counts: [usize; 3],
    cubes: Vec<CubeExtent>,
}

impl CubeGrid {
    pub fn volume_dims(&self) -> [usize; 3] {
        self.volume_dims
    }

    pub fn cube_dims(&self) -> [usize; 3] {
        self.cube_dims
    }

    /// Cubes per axis.
    pub fn counts(&self) -> [usize; 3] {
        self.counts
    }

    pub fn cubes(&self) -> &[CubeExtent] {
        &self.cubes
    }

    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }
}

pub fn partition_cubes(volume_dims: [usize; 3], cube_dims: [usize; 3]) -> Result<CubeGrid> {
    for a in 0..3 {
        if volume_dims[a] == 0 || cube_dims[a] == 0 {
            return Err(invalid!("volume and cube dims must be positive"));
        }
        if cube_dims[a] > volume_dims[a] {
            return Err(invalid!(
                "cube dim {} exceeds volume dim {} on axis {a}",
                cube_dims[a],
                volume_dims[a]
            ));
        }
    }
    let counts: [usize; 3] = std::array::from_fn(|a| volume_dims[a].div_ceil(cube_dims[a]));
    let span = |a: usize, i: usize| {
        let o = i * cube_dims[a];
        (o, cube_dims[a].min(volume_dims[a] - o))
    };
    let mut cubes = Vec::with_capacity(counts.iter().product());
    for k in 0..counts[2] {
        for j in 0..counts[1] {
            for i in 0..counts[0] {
                let (ox, sx) = span(0, i);
                let (oy, sy) = span(1, j);
                let (oz, sz) = span(2, k);
                cubes.push(CubeExtent {
                    origin: [ox, oy, oz],
                    size: [sx, sy, sz],
                });
            }
        }
    }
    Ok(CubeGrid {
        volume_dims,
        cube_dims,
        counts,
        cubes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionOp {
    Occlusion,
    /// In-plane (x-y) rotation by 30 degrees about the cube center.
    Rotation30,
    /// Reverses the cube along x.
    FlipHorizontal,
    /// Reverses the cube along y.
    FlipVertical,
}

impl CorruptionOp {
    pub const ROTATION_DEGREES: f64 = 30.0;
    pub const OTHERS: [CorruptionOp; 3] = [
        CorruptionOp::Rotation30,
        CorruptionOp::FlipHorizontal,
        CorruptionOp::FlipVertical,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Static,
    Dynamic,
}

/// How cubes are sized, how many are corrupted, and with what.
///
/// Cube dims and the subsample fraction are inclusive ranges; a static
/// policy uses degenerate ranges. In dynamic mode the in-plane side is drawn
/// once and shared by x and y, so the x and y ranges must agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPolicy {
    pub mode: MaskMode,
    pub cube_min: [usize; 3],
    pub cube_max: [usize; 3],
    pub subsample_min: f64,
    pub subsample_max: f64,
    /// Probability that a selected cube is occluded rather than rotated/flipped.
    pub occlusion_ratio: f64,
}

impl MaskPolicy {
    pub fn static_preset() -> Self {
        Self {
            mode: MaskMode::Static,
            cube_min: [32, 32, 16],
            cube_max: [32, 32, 16],
            subsample_min: 0.60,
            subsample_max: 0.60,
            occlusion_ratio: 1.0,
        }
    }

    pub fn dynamic_preset() -> Self {
        Self {
            mode: MaskMode::Dynamic,
            cube_min: [9, 9, 2],
            cube_max: [32, 32, 16],
            subsample_min: 0.60,
            subsample_max: 0.90,
            occlusion_ratio: 0.5,
        }
    }

    pub fn preset(mode: MaskMode) -> Self {
        match mode {
            MaskMode::Static => Self::static_preset(),
            MaskMode::Dynamic => Self::dynamic_preset(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.cube_min[a] == 0 || self.cube_min[a] > self.cube_max[a] {
                return Err(invalid!(
                    "cube range on axis {a} must satisfy 0 < min <= max, got {:?}..{:?}",
                    self.cube_min,
                    self.cube_max
                ));
            }
        }
        if !(0.0 < self.subsample_min
            && self.subsample_min <= self.subsample_max
            && self.subsample_max <= 1.0)
        {
            return Err(invalid!(
                "subsample range must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.subsample_min,
                self.subsample_max
            ));
        }
        if !(0.0..=1.0).contains(&self.occlusion_ratio) {
            return Err(invalid!("occlusion ratio {} outside [0, 1]", self.occlusion_ratio));
        }
        match self.mode {
            MaskMode::Static => {
                if self.cube_min != self.cube_max || self.subsample_min != self.subsample_max {
                    return Err(invalid!("a static policy needs fixed cube dims and fraction"));
                }
            }
            MaskMode::Dynamic => {
                if self.cube_min[0] != self.cube_min[1] || self.cube_max[0] != self.cube_max[1] {
                    return Err(invalid!("dynamic in-plane cube range must be square"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub cube_index: usize,
    pub op: CorruptionOp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub assignments: Vec<Assignment>,
    pub sampled_fraction: f64,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn validate(&self, grid: &CubeGrid) -> Result<()> {
        let mut seen = vec![false; grid.len()];
        for a in &self.assignments {
            if a.cube_index >= grid.len() {
                return Err(invalid!("cube index {} out of range ({} cubes)", a.cube_index, grid.len()));
            }
            if std::mem::replace(&mut seen[a.cube_index], true) {
                return Err(invalid!("cube index {} assigned twice", a.cube_index));
            }
        }
        Ok(())
    }
}

/// Number of cubes to corrupt: round-half-up of `fraction * cubes`, at least
/// one for a non-empty grid.
pub fn corrupted_count(fraction: f64, cubes: usize) -> usize {
    if cubes == 0 {
        return 0;
    }
    let n = (fraction * cubes as f64 + 0.5).floor() as usize;
    n.clamp(1, cubes)
}

fn draw_plan<R: Rng + ?Sized>(cubes: usize, fraction: f64, occlusion_ratio: f64, rng: &mut R) -> MaskPlan {
    let count = corrupted_count(fraction, cubes);
    let mut chosen = index::sample(rng, cubes, count).into_vec();
    chosen.sort_unstable();
    let assignments = chosen
        .into_iter()
        .map(|cube_index| {
            let op = if occlusion_ratio >= 1.0 || rng.random::<f64>() < occlusion_ratio {
                CorruptionOp::Occlusion
            } else {
                CorruptionOp::OTHERS[rng.random_range(0..CorruptionOp::OTHERS.len())]
            };
            Assignment { cube_index, op }
        })
        .collect();
    MaskPlan {
        assignments,
        sampled_fraction: fraction,
    }
}

/// Selects a fixed fraction of the cubes of `grid` uniformly without replacement.
pub fn plan_static<R: Rng + ?Sized>(grid: &CubeGrid, policy: &MaskPolicy, rng: &mut R) -> Result<MaskPlan> {
    if policy.mode != MaskMode::Static {
        return Err(invalid!("plan_static needs a static policy"));
    }
    policy.validate()?;
    Ok(draw_plan(grid.len(), policy.subsample_min, policy.occlusion_ratio, rng))
}

/// Draws per-volume cube dims and corruption fraction, tiles the volume, and
/// assigns an operation to each selected cube.
///
/// Drawn cube dims larger than the volume are clipped to the volume dims.
pub fn plan_dynamic<R: Rng + ?Sized>(
    volume_dims: [usize; 3],
    policy: &MaskPolicy,
    rng: &mut R,
) -> Result<(CubeGrid, MaskPlan)> {
    if policy.mode != MaskMode::Dynamic {
        return Err(invalid!("plan_dynamic needs a dynamic policy"));
    }
    policy.validate()?;
    if (0..3).any(|a| volume_dims[a] < policy.cube_min[a]) {
        return Err(invalid!(
            "volume dims {volume_dims:?} smaller than the minimum cube {:?}",
            policy.cube_min
        ));
    }
    let side = rng.random_range(policy.cube_min[0]..=policy.cube_max[0]);
    let depth = rng.random_range(policy.cube_min[2]..=policy.cube_max[2]);
    let fraction = if policy.subsample_min == policy.subsample_max {
        policy.subsample_min
    } else {
        rng.random_range(policy.subsample_min..=policy.subsample_max)
    };
    let cube = [
        side.min(volume_dims[0]),
        side.min(volume_dims[1]),
        depth.min(volume_dims[2]),
    ];
    let grid = partition_cubes(volume_dims, cube)?;
    let plan = draw_plan(grid.len(), fraction, policy.occlusion_ratio, rng);
    Ok((grid, plan))
}

/// Draws a plan under either mode. Static mode tiles with the fixed cube dims.
pub fn plan_for<R: Rng + ?Sized>(
    volume_dims: [usize; 3],
    policy: &MaskPolicy,
    rng: &mut R,
) -> Result<(CubeGrid, MaskPlan)> {
    match policy.mode {
        MaskMode::Static => {
            let grid = partition_cubes(volume_dims, policy.cube_min)?;
            let plan = plan_static(&grid, policy, rng)?;
            Ok((grid, plan))
        }
        MaskMode::Dynamic => plan_dynamic(volume_dims, policy, rng),
    }
}

/// Returns a corrupted copy of `volume`. Voxels outside selected cubes are
/// copied bit-exactly.
pub fn apply_plan(volume: &Volume, grid: &CubeGrid, plan: &MaskPlan) -> Result<Volume> {
    if grid.volume_dims() != volume.dims() {
        return Err(shape_err!(
            "grid dims {:?} do not match volume dims {:?}",
            grid.volume_dims(),
            volume.dims()
        ));
    }
    plan.validate(grid)?;
    let mut out = volume.clone();
    let dims = volume.dims();
    let data = out.voxels_mut();
    for a in &plan.assignments {
        apply_op(data, dims, &grid.cubes()[a.cube_index], a.op);
    }
    Ok(out)
}

/// Marks every voxel that lies in a selected cube (x-fastest order).
pub fn plan_mask(grid: &CubeGrid, plan: &MaskPlan) -> Vec<bool> {
    let d = grid.volume_dims();
    let mut mask = vec![false; d[0] * d[1] * d[2]];
    for a in &plan.assignments {
        let c = &grid.cubes()[a.cube_index];
        for z in c.origin[2]..c.origin[2] + c.size[2] {
            for y in c.origin[1]..c.origin[1] + c.size[1] {
                let row = c.origin[0] + d[0] * (y + d[1] * z);
                mask[row..row + c.size[0]].fill(true);
            }
        }
    }
    mask
}

/// Applies a single op in place to one cube of an x-fastest buffer.
pub fn apply_op(data: &mut [f32], dims: [usize; 3], cube: &CubeExtent, op: CorruptionOp) {
    let [ox, oy, oz] = cube.origin;
    let [sx, sy, sz] = cube.size;
    let idx = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);
    match op {
        CorruptionOp::Occlusion => {
            for z in oz..oz + sz {
                for y in oy..oy + sy {
                    let row = idx(ox, y, z);
                    data[row..row + sx].fill(0.0);
                }
            }
        }
        CorruptionOp::FlipHorizontal => {
            for z in oz..oz + sz {
                for y in oy..oy + sy {
                    let row = idx(ox, y, z);
                    data[row..row + sx].reverse();
                }
            }
        }
        CorruptionOp::FlipVertical => {
            for z in oz..oz + sz {
                for j in 0..sy / 2 {
                    for x in ox..ox + sx {
                        data.swap(idx(x, oy + j, z), idx(x, oy + sy - 1 - j, z));
                    }
                }
            }
        }
        CorruptionOp::Rotation30 => {
            let mut slice = vec![0.0f32; sx * sy];
            for z in oz..oz + sz {
                for y in 0..sy {
                    let row = idx(ox, oy + y, z);
                    slice[y * sx..(y + 1) * sx].copy_from_slice(&data[row..row + sx]);
                }
                let rotated = rotate_slice(&slice, sx, sy, CorruptionOp::ROTATION_DEGREES);
                for y in 0..sy {
                    let row = idx(ox, oy + y, z);
                    data[row..row + sx].copy_from_slice(&rotated[y * sx..(y + 1) * sx]);
                }
            }
        }
    }
}

/// Rotates an `sx` by `sy` slice (x-fastest) counter-clockwise by `degrees`
/// about its center. Bilinear sampling; samples outside the slice read 0.
pub fn rotate_slice(slice: &[f32], sx: usize, sy: usize, degrees: f64) -> Vec<f32> {
    const EDGE_TOL: f64 = 1e-9;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = (sx as f64 - 1.0) / 2.0;
    let cy = (sy as f64 - 1.0) / 2.0;
    let (max_x, max_y) = ((sx - 1) as f64, (sy - 1) as f64);
    let mut out = vec![0.0f32; sx * sy];
    for y in 0..sy {
        for x in 0..sx {
            // inverse map: output pixel -> source position
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = cos * dx + sin * dy + cx;
            let v = -sin * dx + cos * dy + cy;
            if u < -EDGE_TOL || v < -EDGE_TOL || u > max_x + EDGE_TOL || v > max_y + EDGE_TOL {
                continue;
            }
            let u = u.clamp(0.0, max_x);
            let v = v.clamp(0.0, max_y);
            let (x0, y0) = (u.floor() as usize, v.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(sx - 1), (y0 + 1).min(sy - 1));
            let (fx, fy) = (u - x0 as f64, v - y0 as f64);
            let at = |xx: usize, yy: usize| f64::from(slice[yy * sx + xx]);
            let top = at(x0, y0) + (at(x1, y0) - at(x0, y0)) * fx;
            let bottom = at(x0, y1) + (at(x1, y1) - at(x0, y1)) * fx;
            out[y * sx + x] = (top + (bottom - top) * fy) as f32;
        }
    }
    out
}
