//! Multi-frame radar cube preprocessing.
//!
//! Per frame: keep the top `q_frame`% bins, convert bin centers to
//! Cartesian points, move past frames into the current sensor frame, drop
//! points outside the current frustum and voxelize. All frames are then
//! summed per voxel (non-coherent accumulation) and the top `q_final`% of
//! the `X*Y*Z` grid is kept.
//!
//! Accumulation sorts `(voxel, input position)` keys and sums each voxel's
//! contributions in input order, so the result is bit-identical to a
//! sequential dense scatter-add for every thread count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FovConfig, Point3, PoseSE3};
use crate::grid::{self, align_supports, GridSpec, Reduce, SparseVoxelTensor, VoxelIndex};
use crate::par;
use crate::radar::{spherical_bins_to_points, CubeGeometry, SphericalCube};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Number of frames accumulated (current frame plus `frames - 1` past ones).
    pub frames: usize,
    /// Percentage of bins kept per spherical cube.
    pub q_frame: f64,
    /// Percentage of the Cartesian grid kept after accumulation.
    pub q_final: f64,
    pub grid: GridSpec,
    pub fov: FovConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            frames: 5,
            q_frame: 1.0,
            q_final: 1.0,
            grid: GridSpec::default(),
            fov: FovConfig::default(),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::config("frames must be >= 1"));
        }
        check_percent(self.q_frame)?;
        check_percent(self.q_final)?;
        self.grid.validate()?;
        self.fov.validate()
    }
}

fn check_percent(q: f64) -> Result<()> {
    if q > 0.0 && q <= 100.0 {
        Ok(())
    } else {
        Err(Error::config(format!("percentile {q} outside (0, 100]")))
    }
}

/// `ceil(total * q / 100)`, tolerant to representation error in `q`.
pub fn top_count(total: usize, q: f64) -> usize {
    let x = total as f64 * q / 100.0;
    let k = (x - x.abs() * 1e-12).ceil();
    (k.max(0.0) as usize).min(total)
}

/// Bins kept by [`intensity_filter`], in lexicographic bin order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilteredBins {
    pub bins: Vec<[usize; 3]>,
    pub intensities: Vec<f64>,
}

/// Descending by value, ascending by position: sorts the wanted elements first.
fn rank_key(value_bits: u64, position: usize) -> (u64, usize) {
    (!value_bits, position)
}

fn select_top(keys: &mut Vec<(u64, usize)>, k: usize) {
    if k == 0 {
        keys.clear();
        return;
    }
    if k < keys.len() {
        keys.select_nth_unstable(k - 1);
        keys.truncate(k);
    }
}

/// Keeps exactly `ceil(bins * q / 100)` highest-power bins; ties go to the
/// lexicographically smaller bin.
pub fn intensity_filter(cube: &SphericalCube, q: f64) -> Result<FilteredBins> {
    check_percent(q)?;
    let k = top_count(cube.power.len(), q);
    let mut keys: Vec<(u64, usize)> = cube
        .power
        .iter()
        .enumerate()
        .map(|(i, &p)| rank_key((p + 0.0).to_bits() as u64, i))
        .collect();
    select_top(&mut keys, k);
    let mut kept: Vec<usize> = keys.into_iter().map(|(_, i)| i).collect();
    kept.sort_unstable();
    Ok(FilteredBins {
        bins: kept.iter().map(|&i| cube.geometry.unravel(i)).collect(),
        intensities: kept.iter().map(|&i| cube.power[i] as f64).collect(),
    })
}

/// Top-`q`% filter over a sparse tensor measured against the full grid size.
/// Tensors already smaller than the budget are returned unchanged.
pub fn sparse_intensity_filter(t: &SparseVoxelTensor, q: f64) -> Result<SparseVoxelTensor> {
    check_percent(q)?;
    if t.channels() != 1 {
        return Err(Error::shape("intensity filter expects one channel"));
    }
    let k = top_count(t.spec().len(), q);
    if t.len() <= k {
        return Ok(t.clone());
    }
    let mut keys: Vec<(u64, usize)> = t
        .features()
        .iter()
        .enumerate()
        .map(|(i, &v)| rank_key((v + 0.0).to_bits(), i))
        .collect();
    select_top(&mut keys, k);
    let mut rows: Vec<usize> = keys.into_iter().map(|(_, i)| i).collect();
    rows.sort_unstable();
    let indices = rows.iter().map(|&r| t.indices()[r]).collect();
    let feats = rows.iter().map(|&r| t.features()[r]).collect();
    SparseVoxelTensor::new(*t.spec(), indices, feats, 1)
}

/// Applies `to⁻¹ ∘ from` to every point.
pub fn transform_points(points: &[Point3], from: &PoseSE3, to: &PoseSE3) -> Vec<Point3> {
    points.iter().map(|p| PoseSE3::relative(from, to, p)).collect()
}

/// Sums `intensities` per voxel. Every voxel's sum runs in input order, so
/// the output does not depend on `threads`.
pub fn parallel_index_accumulate(
    indices: &[VoxelIndex],
    intensities: &[f64],
    spec: &GridSpec,
    threads: usize,
) -> Result<SparseVoxelTensor> {
    if indices.len() != intensities.len() {
        return Err(Error::shape(format!(
            "{} indices but {} intensities",
            indices.len(),
            intensities.len()
        )));
    }
    if let Some(bad) = indices.iter().find(|&&i| !spec.in_bounds(i)) {
        return Err(Error::input(format!("voxel {bad:?} outside grid")));
    }
    par::install(threads, || {
        let linear = par::map_slice(indices, |&i| spec.linear(i));
        let keys = grid::sorted_keys(&linear);
        let groups = grid::group_ranges(&keys);
        let sums = par::map_slice(&groups, |&(_, s, e)| {
            keys[s..e]
                .iter()
                .fold(0.0, |acc, &(_, pos)| acc + intensities[pos as usize])
        });
        let idx = groups.iter().map(|&(lin, _, _)| spec.unravel(lin as usize)).collect();
        SparseVoxelTensor::new(*spec, idx, sums, 1)
    })
}

/// Aligned, FOV-filtered voxel hits of one frame.
fn frame_hits(
    bins: &[[usize; 3]],
    geometry: &CubeGeometry,
    pose: &PoseSE3,
    current: &PoseSE3,
    is_current: bool,
    cfg: &PreprocessConfig,
) -> Result<Vec<Option<VoxelIndex>>> {
    let mut pts = spherical_bins_to_points(bins, geometry)?;
    if !is_current {
        pts = transform_points(&pts, pose, current);
    }
    Ok(pts
        .iter()
        .map(|p| {
            if cfg.fov.contains(p) {
                cfg.grid.index_of(p)
            } else {
                None
            }
        })
        .collect())
}

fn check_frames(n_cubes: usize, n_poses: usize) -> Result<()> {
    if n_cubes != n_poses {
        return Err(Error::shape(format!("{n_cubes} frames but {n_poses} poses")));
    }
    if n_cubes == 0 {
        return Err(Error::input("no frames"));
    }
    Ok(())
}

/// Accumulated radar Cartesian cube before max-normalization. The last
/// cube/pose is the current frame.
pub fn accumulate_frames_raw(
    cubes: &[SphericalCube],
    poses: &[PoseSE3],
    cfg: &PreprocessConfig,
    threads: usize,
) -> Result<SparseVoxelTensor> {
    check_frames(cubes.len(), poses.len())?;
    cfg.validate()?;
    let current = poses[poses.len() - 1];
    par::install(threads, || {
        let mut indices = Vec::new();
        let mut intensities = Vec::new();
        for (i, (cube, pose)) in cubes.iter().zip(poses).enumerate() {
            let kept = intensity_filter(cube, cfg.q_frame)?;
            let hits = frame_hits(
                &kept.bins,
                &cube.geometry,
                pose,
                &current,
                i + 1 == cubes.len(),
                cfg,
            )?;
            for (hit, &v) in hits.into_iter().zip(&kept.intensities) {
                if let Some(idx) = hit {
                    indices.push(idx);
                    intensities.push(v);
                }
            }
        }
        let acc = parallel_index_accumulate(&indices, &intensities, &cfg.grid, 0)?;
        sparse_intensity_filter(&acc, cfg.q_final)
    })
}

/// Accumulated cube with powers divided by the largest surviving power.
pub fn accumulate_frames(
    cubes: &[SphericalCube],
    poses: &[PoseSE3],
    cfg: &PreprocessConfig,
    threads: usize,
) -> Result<SparseVoxelTensor> {
    Ok(normalize_max(&accumulate_frames_raw(cubes, poses, cfg, threads)?))
}

/// Divides a single-channel tensor by its maximum (no-op when the max is not positive).
pub fn normalize_max(t: &SparseVoxelTensor) -> SparseVoxelTensor {
    let max = t.features().iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return t.clone();
    }
    let feats = t.features().iter().map(|v| v / max).collect();
    t.with_features(feats, t.channels()).expect("same shape")
}

/// Radar point cloud occupancy from per-frame detections (bin indices).
pub fn build_rpc(
    detections: &[Vec<[usize; 3]>],
    geometry: &CubeGeometry,
    poses: &[PoseSE3],
    cfg: &PreprocessConfig,
) -> Result<SparseVoxelTensor> {
    check_frames(detections.len(), poses.len())?;
    let current = poses[poses.len() - 1];
    let mut pts = Vec::new();
    for (i, (bins, pose)) in detections.iter().zip(poses).enumerate() {
        let mut p = spherical_bins_to_points(bins, geometry)?;
        if i + 1 != detections.len() {
            p = transform_points(&p, pose, &current);
        }
        pts.extend(p.into_iter().filter(|q| cfg.fov.contains(q)));
    }
    let ones = vec![1.0; pts.len()];
    grid::voxelize(&pts, &ones, 1, &cfg.grid, Reduce::Max)
}

/// The `(M, 2)` Stage-I input: normalized RCC power and RPC occupancy on the RCC support.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOneInput {
    pub tensor: SparseVoxelTensor,
}

impl StageOneInput {
    pub fn new(tensor: SparseVoxelTensor) -> Result<Self> {
        if tensor.channels() != 2 {
            return Err(Error::shape("stage-one input needs two channels"));
        }
        Ok(StageOneInput { tensor })
    }

    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }

    pub fn power(&self, row: usize) -> f64 {
        self.tensor.row(row)[0]
    }

    pub fn occupied(&self, row: usize) -> bool {
        self.tensor.row(row)[1] > 0.5
    }
}

pub fn assemble_stage1_input(rcc: &SparseVoxelTensor, rpc: &SparseVoxelTensor) -> Result<StageOneInput> {
    if rcc.spec() != rpc.spec() {
        return Err(Error::shape("RCC and RPC grids differ"));
    }
    if rcc.channels() != 1 || rpc.channels() != 1 {
        return Err(Error::shape("RCC and RPC must have one channel"));
    }
    let power = normalize_max(rcc);
    let (_, occ) = align_supports(&power, rpc, &[0.0])?;
    let mut feats = Vec::with_capacity(power.len() * 2);
    for (p, o) in power.features().iter().zip(occ.features()) {
        feats.push(*p);
        feats.push(if *o > 0.0 { 1.0 } else { 0.0 });
    }
    StageOneInput::new(power.with_features(feats, 2)?)
}
