//! Sparse Cartesian voxel tensors.
//!
//! A [`SparseVoxelTensor`] stores `M` voxel indices in strictly increasing
//! lexicographic order together with an `M x C` row-major feature matrix.
//! Every constructor emits this canonical form, so two tensors are equal
//! iff their specs, indices and features compare equal.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ClassLabel, Point3, SemanticPointCloud};
use crate::par;

const SVXT_MAGIC: &[u8; 4] = b"SVXT";
const SVXT_VERSION: u32 = 1;

pub type VoxelIndex = [u32; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            dims: [150, 150, 100],
            min: [4.0, -20.0, -20.0],
            max: [40.0, 20.0, 10.0],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) || self.dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::config("grid dims must be in 1..=u32::MAX"));
        }
        if (0..3).any(|i| !(self.max[i] > self.min[i])) {
            return Err(Error::config("grid extents must satisfy min < max"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| (self.max[i] - self.min[i]) / self.dims[i] as f64)
    }

    /// Voxel containing `p`; points on the upper boundary are outside.
    pub fn index_of(&self, p: &Point3) -> Option<VoxelIndex> {
        let s = self.voxel_size();
        let mut idx = [0u32; 3];
        for i in 0..3 {
            let f = ((p[i] - self.min[i]) / s[i]).floor();
            if !(f >= 0.0 && f < self.dims[i] as f64) {
                return None;
            }
            idx[i] = f as u32;
        }
        Some(idx)
    }

    pub fn center(&self, idx: VoxelIndex) -> Point3 {
        let s = self.voxel_size();
        Vector3::new(
            self.min[0] + (idx[0] as f64 + 0.5) * s[0],
            self.min[1] + (idx[1] as f64 + 0.5) * s[1],
            self.min[2] + (idx[2] as f64 + 0.5) * s[2],
        )
    }

    pub fn linear(&self, idx: VoxelIndex) -> usize {
        (idx[0] as usize * self.dims[1] + idx[1] as usize) * self.dims[2] + idx[2] as usize
    }

    pub fn unravel(&self, lin: usize) -> VoxelIndex {
        let z = lin % self.dims[2];
        let y = (lin / self.dims[2]) % self.dims[1];
        let x = lin / (self.dims[1] * self.dims[2]);
        [x as u32, y as u32, z as u32]
    }

    pub fn in_bounds(&self, idx: VoxelIndex) -> bool {
        (0..3).all(|i| (idx[i] as usize) < self.dims[i])
    }

    /// Half of the voxel diagonal.
    pub fn half_diagonal(&self) -> f64 {
        let s = self.voxel_size();
        0.5 * (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelTensor {
    spec: GridSpec,
    indices: Vec<VoxelIndex>,
    features: Vec<f64>,
    channels: usize,
}

impl SparseVoxelTensor {
    /// Builds a tensor, checking the canonical-order and bounds invariants.
    pub fn new(
        spec: GridSpec,
        indices: Vec<VoxelIndex>,
        features: Vec<f64>,
        channels: usize,
    ) -> Result<Self> {
        if features.len() != indices.len() * channels {
            return Err(Error::shape(format!(
                "{} features for {} rows x {} channels",
                features.len(),
                indices.len(),
                channels
            )));
        }
        if let Some(bad) = indices.iter().find(|&&i| !spec.in_bounds(i)) {
            return Err(Error::input(format!("voxel {bad:?} outside grid {:?}", spec.dims)));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input("voxel indices not strictly increasing"));
        }
        Ok(SparseVoxelTensor {
            spec,
            indices,
            features,
            channels,
        })
    }

    pub fn empty(spec: GridSpec, channels: usize) -> Self {
        SparseVoxelTensor {
            spec,
            indices: Vec::new(),
            features: Vec::new(),
            channels,
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn indices(&self) -> &[VoxelIndex] {
        &self.indices
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    /// Column `c` as a vector.
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.features[i * self.channels + c]).collect()
    }

    pub fn find(&self, idx: VoxelIndex) -> Option<usize> {
        self.indices.binary_search(&idx).ok()
    }

    pub fn into_parts(self) -> (GridSpec, Vec<VoxelIndex>, Vec<f64>, usize) {
        (self.spec, self.indices, self.features, self.channels)
    }

    /// Same support, new features.
    pub fn with_features(&self, features: Vec<f64>, channels: usize) -> Result<Self> {
        SparseVoxelTensor::new(self.spec, self.indices.clone(), features, channels)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SVXT_MAGIC)?;
        w.write_u32::<LittleEndian>(SVXT_VERSION)?;
        for &d in &self.spec.dims {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in self.spec.min.iter().chain(&self.spec.max) {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_u64::<LittleEndian>(self.indices.len() as u64)?;
        w.write_u32::<LittleEndian>(self.channels as u32)?;
        let mut buf = Vec::with_capacity(self.indices.len() * 12 + self.features.len() * 4);
        for idx in &self.indices {
            for &v in idx {
                buf.write_u32::<LittleEndian>(v)?;
            }
        }
        for &f in &self.features {
            buf.write_f32::<LittleEndian>(f as f32)?;
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SVXT_MAGIC {
            return Err(Error::format("not an SVXT file"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != SVXT_VERSION {
            return Err(Error::format(format!("unsupported SVXT version {version}")));
        }
        let mut spec = GridSpec::default();
        for d in &mut spec.dims {
            *d = r.read_u32::<LittleEndian>()? as usize;
        }
        for v in spec.min.iter_mut().chain(spec.max.iter_mut()) {
            *v = r.read_f64::<LittleEndian>()?;
        }
        spec.validate().map_err(|e| Error::format(e.to_string()))?;
        let m = r.read_u64::<LittleEndian>()? as usize;
        let c = r.read_u32::<LittleEndian>()? as usize;
        let mut raw = vec![0u32; 3 * m];
        r.read_u32_into::<LittleEndian>(&mut raw)?;
        let indices = raw.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let mut feats = vec![0f32; m * c];
        r.read_f32_into::<LittleEndian>(&mut feats)?;
        SparseVoxelTensor::new(spec, indices, feats.into_iter().map(f64::from).collect(), c)
            .map_err(|e| Error::format(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduce {
    Sum,
    Max,
    /// Most frequent integer code, ties to the smallest code. Requires `C = 1`.
    Majority,
}

/// Sorts `(linear voxel, input position)` keys. Input positions break ties,
/// so each voxel's rows come out in input order for any thread count.
pub(crate) fn sorted_keys(linear: &[usize]) -> Vec<(u64, u64)> {
    let mut keys: Vec<(u64, u64)> = linear
        .iter()
        .enumerate()
        .map(|(pos, &lin)| (lin as u64, pos as u64))
        .collect();
    par::sort_unstable(&mut keys);
    keys
}

/// Groups sorted keys by voxel: yields `(linear, start, end)` ranges into `keys`.
pub(crate) fn group_ranges(keys: &[(u64, u64)]) -> Vec<(u64, usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=keys.len() {
        if i == keys.len() || keys[i].0 != keys[start].0 {
            out.push((keys[start].0, start, i));
            start = i;
        }
    }
    out
}

fn majority(codes: impl Iterator<Item = f64>) -> Result<f64> {
    let mut counts: Vec<(i64, usize)> = Vec::new();
    for v in codes {
        if v.fract() != 0.0 || !v.is_finite() {
            return Err(Error::input(format!("majority reduction needs integer codes, got {v}")));
        }
        let c = v as i64;
        match counts.iter_mut().find(|(k, _)| *k == c) {
            Some((_, n)) => *n += 1,
            None => counts.push((c, 1)),
        }
    }
    let best = counts
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|&(c, _)| c)
        .unwrap_or(0);
    Ok(best as f64)
}

/// Voxelizes `points` with `values` (`N x channels`, row-major). Points
/// outside the grid are dropped; co-located rows are reduced with `reduce`
/// in input order.
pub fn voxelize(
    points: &[Point3],
    values: &[f64],
    channels: usize,
    spec: &GridSpec,
    reduce: Reduce,
) -> Result<SparseVoxelTensor> {
    if values.len() != points.len() * channels {
        return Err(Error::shape(format!(
            "{} values for {} points x {} channels",
            values.len(),
            points.len(),
            channels
        )));
    }
    if reduce == Reduce::Majority && channels != 1 {
        return Err(Error::input("majority reduction requires a single channel"));
    }
    if points.iter().any(|p| p.iter().any(|v| v.is_nan())) {
        return Err(Error::input("NaN coordinate"));
    }
    let mut kept_lin = Vec::with_capacity(points.len());
    let mut kept_row = Vec::with_capacity(points.len());
    for (row, p) in points.iter().enumerate() {
        if let Some(idx) = spec.index_of(p) {
            kept_lin.push(spec.linear(idx));
            kept_row.push(row);
        }
    }
    let keys = sorted_keys(&kept_lin);
    let groups = group_ranges(&keys);
    let mut indices = Vec::with_capacity(groups.len());
    let mut features = Vec::with_capacity(groups.len() * channels);
    for &(lin, s, e) in &groups {
        indices.push(spec.unravel(lin as usize));
        let rows = keys[s..e].iter().map(|&(_, pos)| kept_row[pos as usize]);
        match reduce {
            Reduce::Sum | Reduce::Max => {
                let mut acc: Option<Vec<f64>> = None;
                for r in rows {
                    let v = &values[r * channels..(r + 1) * channels];
                    match acc.as_mut() {
                        None => acc = Some(v.to_vec()),
                        Some(a) => {
                            for (x, &y) in a.iter_mut().zip(v) {
                                *x = if reduce == Reduce::Sum { *x + y } else { x.max(y) };
                            }
                        }
                    }
                }
                features.extend(acc.unwrap_or_default());
            }
            Reduce::Majority => features.push(majority(rows.map(|r| values[r]))?),
        }
    }
    SparseVoxelTensor::new(*spec, indices, features, channels)
}

/// Re-expresses `b` on the support of `a`. Rows of `b` outside `a` are
/// dropped; rows of `a` missing from `b` get `fill_b`.
pub fn align_supports(
    a: &SparseVoxelTensor,
    b: &SparseVoxelTensor,
    fill_b: &[f64],
) -> Result<(SparseVoxelTensor, SparseVoxelTensor)> {
    if a.spec != b.spec {
        return Err(Error::shape("grid specs differ"));
    }
    let cb = b.channels;
    if fill_b.len() != cb {
        return Err(Error::shape(format!("fill has {} values, b has {cb} channels", fill_b.len())));
    }
    let mut out = Vec::with_capacity(a.len() * cb);
    let mut j = 0;
    for idx in &a.indices {
        while j < b.len() && b.indices[j] < *idx {
            j += 1;
        }
        if j < b.len() && b.indices[j] == *idx {
            out.extend_from_slice(b.row(j));
        } else {
            out.extend_from_slice(fill_b);
        }
    }
    let aligned = SparseVoxelTensor {
        spec: a.spec,
        indices: a.indices.clone(),
        features: out,
        channels: cb,
    };
    Ok((a.clone(), aligned))
}

pub fn filter_rows<F>(t: &SparseVoxelTensor, keep: F) -> SparseVoxelTensor
where
    F: Fn(VoxelIndex, &[f64]) -> bool,
{
    let mut indices = Vec::new();
    let mut features = Vec::new();
    for (i, &idx) in t.indices.iter().enumerate() {
        let row = t.row(i);
        if keep(idx, row) {
            indices.push(idx);
            features.extend_from_slice(row);
        }
    }
    SparseVoxelTensor {
        spec: t.spec,
        indices,
        features,
        channels: t.channels,
    }
}

/// Class-coded single-channel tensor to voxel-center points; free rows are skipped.
pub fn to_point_cloud(t: &SparseVoxelTensor) -> Result<SemanticPointCloud> {
    if t.channels != 1 {
        return Err(Error::shape("class tensor must have one channel"));
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (i, &idx) in t.indices.iter().enumerate() {
        let code = t.features[i];
        if code.fract() != 0.0 || !(0.0..=255.0).contains(&code) {
            return Err(Error::input(format!("non-integer class code {code}")));
        }
        let label = ClassLabel::from_code(code as u8)
            .ok_or_else(|| Error::input(format!("unknown class code {code}")))?;
        if label != ClassLabel::Free {
            points.push(t.spec.center(idx));
            labels.push(label);
        }
    }
    Ok(SemanticPointCloud { points, labels })
}

/// Dense scalar field over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid<T> {
    pub spec: GridSpec,
    pub data: Vec<T>,
}

impl<T: Copy> DenseGrid<T> {
    pub fn filled(spec: GridSpec, value: T) -> Self {
        DenseGrid {
            spec,
            data: vec![value; spec.len()],
        }
    }

    pub fn get(&self, idx: VoxelIndex) -> T {
        self.data[self.spec.linear(idx)]
    }

    pub fn set(&mut self, idx: VoxelIndex, v: T) {
        let i = self.spec.linear(idx);
        self.data[i] = v;
    }
}
