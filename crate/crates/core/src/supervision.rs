//! Stage-I targets and Stage-II data samples.
//!
//! Class codes are ordered by rarity (free < ground < tree < pole < wire),
//! so greyscale dilation over codes is a plain max filter and thin classes
//! grow instead of being overwritten.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ClassLabel, SemanticPointCloud, NUM_CLASSES};
use crate::grid::{voxelize, DenseGrid, GridSpec, Reduce, SparseVoxelTensor, VoxelIndex};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    /// Odd edge length of the cubic kernel, in voxels.
    pub size: usize,
    /// Gaussian standard deviation, in voxels.
    pub sigma: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { size: 3, sigma: 1.0 }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size.is_multiple_of(2) {
            return Err(Error::config(format!("kernel size {} is even", self.size)));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::config("kernel sigma must be positive"));
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.size / 2
    }

    /// 1D Gaussian weights for offsets `0..=half`, scaled so offset 0 has weight 1.
    ///
    /// The normalized 3D kernel divided by its center weight is exactly the
    /// outer product of these.
    pub fn weights(&self) -> Vec<f64> {
        (0..=self.half())
            .map(|d| (-((d * d) as f64) / (2.0 * self.sigma * self.sigma)).exp())
            .collect()
    }
}

/// Runs `f` over the window of each voxel along `axis`, `f` receiving
/// `(|offset|, value)` pairs for in-bounds neighbours.
fn axis_pass<T, F>(input: &[T], dims: [usize; 3], axis: usize, half: usize, f: F) -> Vec<T>
where
    T: Copy + Default + Send + Sync,
    F: Fn(&mut dyn Iterator<Item = (usize, T)>) -> T + Sync + Send,
{
    let strides = [dims[1] * dims[2], dims[2], 1];
    let plane = dims[1] * dims[2];
    let mut out = vec![T::default(); input.len()];
    par::for_each_chunk_mut(&mut out, plane, |x, slab| {
        for (j, o) in slab.iter_mut().enumerate() {
            let pos = [x, j / dims[2], j % dims[2]];
            let c = pos[axis] as isize;
            let base = x * plane + j;
            let lo = (c - half as isize).max(0);
            let hi = (c + half as isize).min(dims[axis] as isize - 1);
            let mut it = (lo..=hi).map(|k| {
                let at = (base as isize + (k - c) * strides[axis] as isize) as usize;
                ((k - c).unsigned_abs(), input[at])
            });
            *o = f(&mut it);
        }
    });
    out
}

/// Occupancy confidence: occupied voxels are 1, others get the Gaussian
/// falloff of nearby occupied voxels, clipped to `[0, 1]`.
pub fn build_structural_target(
    lidar: &SemanticPointCloud,
    spec: &GridSpec,
    kernel: &KernelConfig,
) -> Result<DenseGrid<f64>> {
    kernel.validate()?;
    spec.validate()?;
    let dims = spec.dims;
    let mut occ = DenseGrid::filled(*spec, 0.0);
    for p in &lidar.points {
        if let Some(idx) = spec.index_of(p) {
            occ.set(idx, 1.0);
        }
    }
    let w = kernel.weights();
    let mut field = occ.data.clone();
    for axis in 0..3 {
        field = axis_pass(&field, dims, axis, kernel.half(), |it| {
            it.fold(0.0, |acc, (d, v)| acc + w[d] * v)
        });
    }
    for (f, o) in field.iter_mut().zip(&occ.data) {
        *f = if *o > 0.0 { 1.0 } else { f.clamp(0.0, 1.0) };
    }
    Ok(DenseGrid { spec: *spec, data: field })
}

/// Per-voxel majority class code of a labelled cloud (`C = 1`).
pub fn voxel_labels(lidar: &SemanticPointCloud, spec: &GridSpec) -> Result<SparseVoxelTensor> {
    let codes: Vec<f64> = lidar.labels.iter().map(|l| l.code() as f64).collect();
    voxelize(&lidar.points, &codes, 1, spec, Reduce::Majority)
}

/// Class codes dilated with a `k^3` structuring element; the rarest class wins.
pub fn build_semantic_target(
    lidar: &SemanticPointCloud,
    spec: &GridSpec,
    kernel: &KernelConfig,
) -> Result<DenseGrid<u8>> {
    kernel.validate()?;
    spec.validate()?;
    let dims = spec.dims;
    let labels = voxel_labels(lidar, spec)?;
    let mut grid = DenseGrid::filled(*spec, ClassLabel::Free.code());
    for (i, &idx) in labels.indices().iter().enumerate() {
        grid.set(idx, labels.features()[i] as u8);
    }
    let mut data = grid.data;
    for axis in 0..3 {
        data = axis_pass(&data, dims, axis, kernel.half(), |it| {
            it.map(|(_, v)| v).max().unwrap_or(0)
        });
    }
    Ok(DenseGrid { spec: *spec, data })
}

pub fn one_hot(label: ClassLabel) -> [f64; NUM_CLASSES] {
    let mut row = [0.0; NUM_CLASSES];
    row[label.index()] = 1.0;
    row
}

/// Row-wise argmax of an `M x S` score tensor into class codes; ties go to the smaller code.
pub fn decode_classes(scores: &SparseVoxelTensor) -> Result<SparseVoxelTensor> {
    if scores.channels() != NUM_CLASSES {
        return Err(Error::shape(format!(
            "expected {NUM_CLASSES} channels, got {}",
            scores.channels()
        )));
    }
    let codes = (0..scores.len())
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as f64
        })
        .collect();
    scores.with_features(codes, 1)
}

fn one_hot_tensor(support: &[VoxelIndex], spec: &GridSpec, codes: impl Iterator<Item = u8>) -> Result<SparseVoxelTensor> {
    let mut feats = Vec::with_capacity(support.len() * NUM_CLASSES);
    for code in codes {
        let label = ClassLabel::from_code(code)
            .ok_or_else(|| Error::input(format!("unknown class code {code}")))?;
        feats.extend(one_hot(label));
    }
    SparseVoxelTensor::new(*spec, support.to_vec(), feats, NUM_CLASSES)
}

/// Stage-I supervision on the input support: `structural` is `M x 1`, `semantic` is `M x S` one-hot.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOneTarget {
    pub structural: SparseVoxelTensor,
    pub semantic: SparseVoxelTensor,
}

pub fn assemble_stage1_target(
    structural: &DenseGrid<f64>,
    semantic: &DenseGrid<u8>,
    support: &SparseVoxelTensor,
) -> Result<StageOneTarget> {
    if structural.spec != *support.spec() || semantic.spec != *support.spec() {
        return Err(Error::shape("target grids and support use different grid specs"));
    }
    let idx = support.indices();
    let st = idx.iter().map(|&i| structural.get(i)).collect();
    Ok(StageOneTarget {
        structural: SparseVoxelTensor::new(*support.spec(), idx.to_vec(), st, 1)?,
        semantic: one_hot_tensor(idx, support.spec(), idx.iter().map(|&i| semantic.get(i)))?,
    })
}

/// Stage-II training sample on the condition support.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTwoSample {
    /// `L x S` one-hot classes.
    pub x: SparseVoxelTensor,
    /// Non-free ground-truth voxels outside the support.
    pub dropped: usize,
    /// Fraction of non-free ground-truth voxels inside the support (1 when there are none).
    pub coverage: f64,
}

impl StageTwoSample {
    pub fn labels(&self) -> Result<SparseVoxelTensor> {
        decode_classes(&self.x)
    }
}

/// `gt` holds per-voxel class codes (`C = 1`); `support` is the condition support.
pub fn expand_stage2_sample(gt: &SparseVoxelTensor, support: &SparseVoxelTensor) -> Result<StageTwoSample> {
    if gt.spec() != support.spec() {
        return Err(Error::shape("ground truth and support use different grid specs"));
    }
    if gt.channels() != 1 {
        return Err(Error::shape("ground-truth labels must have one channel"));
    }
    let mut codes = Vec::with_capacity(support.len());
    let mut j = 0;
    let mut hit = 0;
    for idx in support.indices() {
        while j < gt.len() && gt.indices()[j] < *idx {
            j += 1;
        }
        let code = if j < gt.len() && gt.indices()[j] == *idx {
            gt.features()[j] as u8
        } else {
            ClassLabel::Free.code()
        };
        if code != ClassLabel::Free.code() {
            hit += 1;
        }
        codes.push(code);
    }
    let total = gt.features().iter().filter(|&&c| c != ClassLabel::Free.code() as f64).count();
    Ok(StageTwoSample {
        x: one_hot_tensor(support.indices(), support.spec(), codes.into_iter())?,
        dropped: total - hit,
        coverage: if total == 0 { 1.0 } else { hit as f64 / total as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn small() -> GridSpec {
        GridSpec {
            dims: [20, 20, 20],
            min: [0.0, 0.0, 0.0],
            max: [20.0, 20.0, 20.0],
        }
    }

    fn cloud(pts: &[([u32; 3], ClassLabel)]) -> SemanticPointCloud {
        let spec = small();
        SemanticPointCloud::new(
            pts.iter().map(|(i, _)| spec.center(*i)).collect(),
            pts.iter().map(|(_, l)| *l).collect(),
        )
        .unwrap()
    }

    fn kernel3d(k: &KernelConfig) -> HashMap<[i32; 3], f64> {
        let h = k.half() as i32;
        let mut m = HashMap::new();
        let mut total = 0.0;
        for dx in -h..=h {
            for dy in -h..=h {
                for dz in -h..=h {
                    let r2 = (dx * dx + dy * dy + dz * dz) as f64;
                    let v = (-r2 / (2.0 * k.sigma * k.sigma)).exp();
                    total += v;
                    m.insert([dx, dy, dz], v);
                }
            }
        }
        let center = m[&[0, 0, 0]] / total;
        m.values_mut().for_each(|v| *v = *v / total / center);
        m
    }

    #[test]
    fn even_kernel_rejected() {
        let k = KernelConfig { size: 4, sigma: 1.0 };
        let c = cloud(&[]);
        assert!(build_structural_target(&c, &small(), &k).is_err());
        assert!(build_semantic_target(&c, &small(), &k).is_err());
    }

    #[test]
    fn empty_cloud_targets() {
        let k = KernelConfig::default();
        let st = build_structural_target(&cloud(&[]), &small(), &k).unwrap();
        assert!(st.data.iter().all(|&v| v == 0.0));
        let se = build_semantic_target(&cloud(&[]), &small(), &k).unwrap();
        assert!(se.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn single_voxel_matches_direct_kernel() {
        let k = KernelConfig::default();
        let c = [10u32, 10, 10];
        let st = build_structural_target(&cloud(&[(c, ClassLabel::Tree)]), &small(), &k).unwrap();
        let oracle = kernel3d(&k);
        for x in 0..20u32 {
            for y in 0..20u32 {
                for z in 0..20u32 {
                    let d = [x as i32 - 10, y as i32 - 10, z as i32 - 10];
                    let want = oracle.get(&d).copied().unwrap_or(0.0);
                    assert!((st.get([x, y, z]) - want).abs() < 1e-12, "{d:?}");
                }
            }
        }
        assert_eq!(st.get(c), 1.0);
        assert!((st.get([11, 10, 10]) - (-0.5f64).exp()).abs() < 1e-12);
        assert!(st.data.iter().filter(|&&v| v == 1.0).count() == 1);
    }

    #[test]
    fn two_voxels_superpose() {
        let k = KernelConfig { size: 5, sigma: 1.5 };
        let a = [4u32, 5, 6];
        let b = [14u32, 5, 6];
        let both = build_structural_target(&cloud(&[(a, ClassLabel::Pole), (b, ClassLabel::Pole)]), &small(), &k).unwrap();
        let sa = build_structural_target(&cloud(&[(a, ClassLabel::Pole)]), &small(), &k).unwrap();
        let sb = build_structural_target(&cloud(&[(b, ClassLabel::Pole)]), &small(), &k).unwrap();
        for i in 0..both.data.len() {
            assert!((both.data[i] - (sa.data[i] + sb.data[i]).min(1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn wire_dilates_to_block() {
        let k = KernelConfig::default();
        let se = build_semantic_target(&cloud(&[([5, 5, 5], ClassLabel::Wire)]), &small(), &k).unwrap();
        for x in 0..20u32 {
            for y in 0..20u32 {
                for z in 0..20u32 {
                    let inside = [x, y, z].iter().all(|&v| (4..=6).contains(&v));
                    let want = if inside { 4 } else { 0 };
                    assert_eq!(se.get([x, y, z]), want);
                }
            }
        }
    }

    #[test]
    fn dilation_precedence() {
        let k = KernelConfig::default();
        let se = build_semantic_target(
            &cloud(&[([5, 5, 5], ClassLabel::Ground), ([6, 5, 5], ClassLabel::Pole)]),
            &small(),
            &k,
        )
        .unwrap();
        assert_eq!(se.get([5, 5, 5]), ClassLabel::Pole.code());
        assert_eq!(se.get([6, 5, 5]), ClassLabel::Pole.code());
        assert_eq!(se.get([4, 5, 5]), ClassLabel::Ground.code());
    }

    #[test]
    fn stage1_target_sampling() {
        let k = KernelConfig::default();
        let spec = small();
        let occ = [([3u32, 3, 3], ClassLabel::Ground), ([3, 4, 3], ClassLabel::Tree)];
        let c = cloud(&occ);
        let st = build_structural_target(&c, &spec, &k).unwrap();
        let se = build_semantic_target(&c, &spec, &k).unwrap();

        let far = SparseVoxelTensor::new(spec, vec![[15, 15, 15], [18, 0, 1]], vec![0.0, 0.0], 1).unwrap();
        let t = assemble_stage1_target(&st, &se, &far).unwrap();
        assert_eq!(t.structural.features(), &[0.0, 0.0]);
        assert_eq!(t.semantic.row(0), &one_hot(ClassLabel::Free));

        let exact = SparseVoxelTensor::new(spec, vec![[3, 3, 3], [3, 4, 3]], vec![0.0, 0.0], 1).unwrap();
        let t = assemble_stage1_target(&st, &se, &exact).unwrap();
        assert_eq!(t.structural.features(), &[1.0, 1.0]);

        let mixed_idx = vec![[2u32, 3, 3], [3, 3, 3], [3, 5, 4], [9, 9, 9]];
        let mixed = SparseVoxelTensor::new(spec, mixed_idx.clone(), vec![0.0; 4], 1).unwrap();
        let t = assemble_stage1_target(&st, &se, &mixed).unwrap();
        for (r, &idx) in mixed_idx.iter().enumerate() {
            assert_eq!(t.structural.features()[r], st.get(idx));
            let row = t.semantic.row(r);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert_eq!(row[se.get(idx) as usize], 1.0);
        }

        let other = SparseVoxelTensor::empty(GridSpec::default(), 1);
        assert!(assemble_stage1_target(&st, &se, &other).is_err());
    }

    fn labels(spec: GridSpec, v: &[([u32; 3], ClassLabel)]) -> SparseVoxelTensor {
        let mut v = v.to_vec();
        v.sort_by_key(|e| e.0);
        SparseVoxelTensor::new(spec, v.iter().map(|e| e.0).collect(), v.iter().map(|e| e.1.code() as f64).collect(), 1).unwrap()
    }

    #[test]
    fn stage2_expansion() {
        let spec = small();
        let gt = labels(spec, &[([1, 1, 1], ClassLabel::Ground), ([2, 2, 2], ClassLabel::Wire), ([3, 3, 3], ClassLabel::Tree)]);
        let sup = |v: Vec<[u32; 3]>| SparseVoxelTensor::new(spec, v.clone(), vec![0.0; v.len()], 1).unwrap();

        let s = expand_stage2_sample(&gt, &sup(vec![[0, 0, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3]])).unwrap();
        assert_eq!((s.coverage, s.dropped), (1.0, 0));

        let s = expand_stage2_sample(&gt, &sup(vec![[5, 5, 5], [6, 6, 6]])).unwrap();
        assert_eq!((s.coverage, s.dropped), (0.0, 3));
        assert!(s.labels().unwrap().features().iter().all(|&c| c == 0.0));

        let support = vec![[1u32, 1, 1], [2, 2, 3], [3, 3, 3], [7, 0, 0]];
        let s = expand_stage2_sample(&gt, &sup(support.clone())).unwrap();
        let oracle: HashMap<[u32; 3], f64> = gt.indices().iter().copied().zip(gt.features().iter().copied()).collect();
        let lab = s.labels().unwrap();
        for (r, idx) in support.iter().enumerate() {
            assert_eq!(lab.features()[r], oracle.get(idx).copied().unwrap_or(0.0));
            assert_eq!(s.x.row(r).iter().sum::<f64>(), 1.0);
        }
        assert_eq!(s.dropped, 1);
        assert!((s.coverage - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dilation_keeps_non_free() {
        let spec = small();
        let pts: Vec<([u32; 3], ClassLabel)> = (0..40u32)
            .map(|i| ([(i * 7) % 20, (i * 3) % 20, (i * 11) % 20], ClassLabel::ALL[1 + (i as usize % 4)]))
            .collect();
        let c = cloud(&pts);
        let se = build_semantic_target(&c, &spec, &KernelConfig::default()).unwrap();
        for p in &c.points {
            let idx = spec.index_of(p).unwrap();
            assert_ne!(se.get(idx), 0);
        }
    }
}
