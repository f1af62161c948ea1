//! Stage I: coarse structural and semantic masks from the radar input.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Matrix;
use crate::error::{Error, Result};
use crate::geometry::NUM_CLASSES;
use crate::grid::SparseVoxelTensor;
use crate::optim::{Adam, AdamConfig};
use crate::par;
use crate::preprocess::StageOneInput;
use crate::supervision::StageOneTarget;

use super::TrainRecord;

const PROB_CLAMP: f64 = 1e-7;

/// Per-voxel Stage-I prediction: structural confidence in `(0, 1)` and
/// row-stochastic class probabilities (`M x S`).
#[derive(Debug, Clone, PartialEq)]
pub struct StageOneOutput {
    pub structural: Vec<f64>,
    pub semantic: Matrix,
}

pub trait StageOnePredictor {
    fn predict(&self, input: &StageOneInput) -> Result<StageOneOutput>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageOneLoss {
    pub bce: f64,
    pub wce: f64,
    pub total: f64,
}

/// Mean BCE over rows plus mean class-weighted cross-entropy over rows.
pub fn stage1_loss(out: &StageOneOutput, target: &StageOneTarget, weights: &[f64]) -> Result<StageOneLoss> {
    if target.semantic.len() != target.structural.len() {
        return Err(Error::shape("stage-one target heads differ in length"));
    }
    loss_terms(out, target.structural.features(), target.semantic.features(), weights)
}

/// `y_se` is the `M x S` one-hot target, row-major.
fn loss_terms(out: &StageOneOutput, y_st: &[f64], y_se: &[f64], weights: &[f64]) -> Result<StageOneLoss> {
    let m = y_st.len();
    if out.structural.len() != m || out.semantic.dim() != (m, NUM_CLASSES) || y_se.len() != m * NUM_CLASSES {
        return Err(Error::shape("stage-one prediction and target are not aligned"));
    }
    if weights.len() != NUM_CLASSES {
        return Err(Error::shape(format!("{} class weights for {NUM_CLASSES} classes", weights.len())));
    }
    if m == 0 {
        return Ok(StageOneLoss { bce: 0.0, wce: 0.0, total: 0.0 });
    }
    let mut bce = 0.0;
    let mut wce = 0.0;
    for r in 0..m {
        let p = out.structural[r].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let y = y_st[r];
        bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        for c in 0..NUM_CLASSES {
            let yc = y_se[r * NUM_CLASSES + c];
            if yc != 0.0 {
                wce -= weights[c] * yc * out.semantic[[r, c]].clamp(PROB_CLAMP, 1.0).ln();
            }
        }
    }
    let (bce, wce) = (bce / m as f64, wce / m as f64);
    Ok(StageOneLoss { bce, wce, total: bce + wce })
}

/// Which optional feature groups a [`LinearPredictor`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    /// Normalized voxel position.
    pub coords: bool,
    /// Position of the voxel within its vertical column of support voxels.
    #[serde(default)]
    pub column: bool,
}

/// Rows of each `(x, y)` column, bottom to top.
fn columns(t: &SparseVoxelTensor) -> HashMap<(u32, u32), Vec<usize>> {
    let mut cols: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
    // canonical order is x, y, z so rows arrive sorted by z
    for (r, idx) in t.indices().iter().enumerate() {
        cols.entry((idx[0], idx[1])).or_default().push(r);
    }
    cols
}

/// Hand-built local features of every input voxel:
/// own power, RPC bit, summed power and RPC count over the 26 neighbours
/// present in the support, optionally the normalized voxel position and
/// optionally column context (power relative to the strongest voxel within
/// `COLUMN_REACH` above or below, support counts below and above in that
/// window, and height above the lowest support voxel of the column).
pub fn voxel_features(input: &StageOneInput, set: FeatureSet) -> Matrix {
    let t = &input.tensor;
    let dims = t.spec().dims;
    let n_feat = feature_count(set);
    let cols = if set.column { columns(t) } else { HashMap::new() };
    let rows = par::map_range(t.len(), |i| {
        let idx = t.indices()[i];
        let mut f = vec![0.0; n_feat];
        f[0] = input.power(i);
        f[1] = if input.occupied(i) { 1.0 } else { 0.0 };
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                for dz in -1i64..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let n = [idx[0] as i64 + dx, idx[1] as i64 + dy, idx[2] as i64 + dz];
                    if n.iter().zip(dims).any(|(&v, d)| v < 0 || v >= d as i64) {
                        continue;
                    }
                    if let Some(j) = t.find([n[0] as u32, n[1] as u32, n[2] as u32]) {
                        f[2] += input.power(j);
                        f[3] += if input.occupied(j) { 1.0 } else { 0.0 };
                    }
                }
            }
        }
        let mut k = 4;
        if set.coords {
            for a in 0..3 {
                f[k + a] = (idx[a] as f64 + 0.5) / dims[a] as f64;
            }
            k += 3;
        }
        if set.column {
            let col = &cols[&(idx[0], idx[1])];
            let z = idx[2] as i64;
            let mut peak: f64 = 0.0;
            for &j in col {
                let dz = t.indices()[j][2] as i64 - z;
                if dz.abs() <= COLUMN_REACH {
                    peak = peak.max(input.power(j));
                    if dz < 0 {
                        f[k + 1] += 1.0;
                    } else if dz > 0 {
                        f[k + 2] += 1.0;
                    }
                }
            }
            f[k] = if peak > 0.0 { input.power(i) / peak } else { 0.0 };
            f[k + 3] = (z - t.indices()[col[0]][2] as i64) as f64 / dims[2] as f64;
        }
        f
    });
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((t.len(), n_feat), flat).expect("feature rows have equal length")
}

const COLUMN_REACH: i64 = 3;

pub fn feature_count(set: FeatureSet) -> usize {
    4 + if set.coords { 3 } else { 0 } + if set.column { 4 } else { 0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageOneTrainConfig {
    pub epochs: usize,
    /// Rows per minibatch.
    pub batch: usize,
    /// Include normalized voxel coordinates among the features.
    pub coords: bool,
    /// Include column-context features.
    pub column: bool,
    pub adam: AdamConfig,
}

impl StageOneTrainConfig {
    pub fn features(&self) -> FeatureSet {
        FeatureSet {
            coords: self.coords,
            column: self.column,
        }
    }
}

impl Default for StageOneTrainConfig {
    fn default() -> Self {
        StageOneTrainConfig {
            epochs: 200,
            batch: 4096,
            coords: true,
            column: true,
            adam: AdamConfig { lr: 0.05, ..AdamConfig::default() },
        }
    }
}

/// Logistic structural head and softmax semantic head over standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub features: FeatureSet,
    /// Flat parameters: feature means, feature scales, structural weights
    /// (`F + 1`, bias last), semantic weights (`(F + 1) x S`, row-major).
    pub params: Vec<f64>,
}

impl LinearPredictor {
    pub fn new(features: FeatureSet) -> Self {
        let f = feature_count(features);
        let mut params = vec![0.0; 2 * f + (f + 1) * (1 + NUM_CLASSES)];
        params[f..2 * f].iter_mut().for_each(|s| *s = 1.0);
        LinearPredictor { features, params }
    }

    pub fn n_features(&self) -> usize {
        feature_count(self.features)
    }

    pub fn param_count(features: FeatureSet) -> usize {
        let f = feature_count(features);
        2 * f + (f + 1) * (1 + NUM_CLASSES)
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let f = self.n_features();
        let (mean, rest) = self.params.split_at(f);
        let (scale, rest) = rest.split_at(f);
        let (w_st, w_se) = rest.split_at(f + 1);
        (mean, scale, w_st, w_se)
    }

    fn weights_offset(&self) -> usize {
        2 * self.n_features()
    }

    /// Standardized features with a trailing bias column.
    fn design(&self, features: &Matrix) -> Matrix {
        let (mean, scale, _, _) = self.split();
        let f = self.n_features();
        let mut z = Array2::ones((features.nrows(), f + 1));
        for (r, row) in features.rows().into_iter().enumerate() {
            for c in 0..f {
                z[[r, c]] = (row[c] - mean[c]) / scale[c];
            }
        }
        z
    }

    fn forward(&self, z: &Matrix) -> StageOneOutput {
        let f = self.n_features();
        let (_, _, w_st, w_se) = self.split();
        let w_st = Array1::from(w_st.to_vec());
        let w_se = Array2::from_shape_vec((f + 1, NUM_CLASSES), w_se.to_vec()).expect("layout");
        let structural = z.dot(&w_st).mapv(sigmoid).to_vec();
        let mut semantic = z.dot(&w_se);
        for mut row in semantic.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let s = row.sum();
            row /= s;
        }
        StageOneOutput { structural, semantic }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl StageOnePredictor for LinearPredictor {
    fn predict(&self, input: &StageOneInput) -> Result<StageOneOutput> {
        if self.params.len() != Self::param_count(self.features) {
            return Err(Error::shape("stage-one parameter vector has the wrong length"));
        }
        Ok(self.forward(&self.design(&voxel_features(input, self.features))))
    }
}

/// Trains a [`LinearPredictor`] on BCE + weighted CE with Adam.
/// Rows of all examples are pooled; minibatch order is drawn from `seed`.
/// Returns the model and the per-epoch full-data loss (entry 0 is the initial loss).
pub fn train_stage1(
    data: &[(StageOneInput, StageOneTarget)],
    weights: &[f64],
    config: &StageOneTrainConfig,
    seed: u64,
) -> Result<(LinearPredictor, Vec<TrainRecord>)> {
    if weights.len() != NUM_CLASSES || weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::input("need one positive weight per class"));
    }
    let mut model = LinearPredictor::new(config.features());
    let f = model.n_features();
    let mut feats = Vec::new();
    let mut y_st = Vec::new();
    let mut y_se = Vec::new();
    for (input, target) in data {
        if input.tensor.indices() != target.structural.indices() {
            return Err(Error::shape("input and target supports differ"));
        }
        feats.push(voxel_features(input, config.features()));
        y_st.extend_from_slice(target.structural.features());
        y_se.extend_from_slice(target.semantic.features());
    }
    let views: Vec<_> = feats.iter().map(|m| m.view()).collect();
    let x = if views.is_empty() {
        Array2::zeros((0, f))
    } else {
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?
    };
    let m = x.nrows();
    if m == 0 {
        return Err(Error::input("no training rows"));
    }
    let y_se = Array2::from_shape_vec((m, NUM_CLASSES), y_se).map_err(|e| Error::shape(e.to_string()))?;

    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let std = x.std_axis(Axis(0), 0.0);
    for c in 0..f {
        model.params[c] = mean[c];
        model.params[f + c] = if std[c] > 1e-12 { std[c] } else { 1.0 };
    }
    let z = model.design(&x);
    let off = model.weights_offset();
    let n_w = model.params.len() - off;
    let mut opt = Adam::new(config.adam, n_w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..m).collect();
    let batch = config.batch.max(1);

    let full_loss = |model: &LinearPredictor| -> Result<StageOneLoss> {
        let out = model.forward(&z);
        loss_terms(&out, &y_st, y_se.as_slice().expect("standard layout"), weights)
    };
    let mut log = vec![record(0, full_loss(&model)?)];
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let zb = z.select(Axis(0), chunk);
            let out = model.forward(&zb);
            let n = chunk.len() as f64;
            let mut g_st = vec![0.0; f + 1];
            let mut g_se = Array2::<f64>::zeros((f + 1, NUM_CLASSES));
            for (k, &r) in chunk.iter().enumerate() {
                let d_st = (out.structural[k] - y_st[r]) / n;
                let yw: f64 = (0..NUM_CLASSES).map(|c| weights[c] * y_se[[r, c]]).sum();
                for j in 0..=f {
                    g_st[j] += d_st * zb[[k, j]];
                }
                for c in 0..NUM_CLASSES {
                    let d = (yw * out.semantic[[k, c]] - weights[c] * y_se[[r, c]]) / n;
                    if d != 0.0 {
                        for j in 0..=f {
                            g_se[[j, c]] += d * zb[[k, j]];
                        }
                    }
                }
            }
            let mut grad = g_st;
            grad.extend(g_se.iter());
            debug_assert_eq!(grad.len(), n_w);
            opt.step(&mut model.params[off..], &grad);
            step += 1;
        }
        let loss = full_loss(&model)?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence(format!("stage-one loss is {} at epoch {epoch}", loss.total)));
        }
        log.push(record(step, loss));
    }
    Ok((model, log))
}

fn record(step: usize, loss: StageOneLoss) -> TrainRecord {
    let mut parts = BTreeMap::new();
    parts.insert("bce".to_string(), loss.bce);
    parts.insert("wce".to_string(), loss.wce);
    TrainRecord { step, loss: loss.total, parts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridSpec, SparseVoxelTensor};
    use crate::supervision::one_hot;
    use crate::ClassLabel;
    use rand::Rng;

    fn spec() -> GridSpec {
        GridSpec {
            dims: [30, 30, 30],
            min: [0.0; 3],
            max: [30.0; 3],
        }
    }

    fn target(st: Vec<f64>, classes: &[ClassLabel]) -> StageOneTarget {
        let m = st.len();
        let idx: Vec<[u32; 3]> = (0..m as u32).map(|i| [i % 30, i / 30, 0]).collect::<Vec<_>>();
        let mut idx_sorted = idx.clone();
        idx_sorted.sort();
        StageOneTarget {
            structural: SparseVoxelTensor::new(spec(), idx_sorted.clone(), st, 1).unwrap(),
            semantic: SparseVoxelTensor::new(spec(), idx_sorted, classes.iter().flat_map(|&c| one_hot(c)).collect(), NUM_CLASSES).unwrap(),
        }
    }

    #[test]
    fn loss_cases() {
        let classes = [ClassLabel::Tree, ClassLabel::Wire, ClassLabel::Free];
        let t = target(vec![1.0, 0.0, 1.0], &classes);
        let mut se = Matrix::zeros((3, NUM_CLASSES));
        for (r, c) in classes.iter().enumerate() {
            se[[r, c.index()]] = 1.0;
        }
        let perfect = StageOneOutput { structural: vec![1.0, 0.0, 1.0], semantic: se };
        assert!(stage1_loss(&perfect, &t, &[1.0; 5]).unwrap().total <= 1e-6);

        let half = target(vec![0.5; 3], &classes);
        let uniform = StageOneOutput {
            structural: vec![0.5; 3],
            semantic: Matrix::from_elem((3, NUM_CLASSES), 0.2),
        };
        let l = stage1_loss(&uniform, &half, &[1.0; 5]).unwrap();
        assert!((l.bce - 2f64.ln()).abs() < 1e-12);
        assert!((l.wce - 5f64.ln()).abs() < 1e-12);

        let short = StageOneOutput { structural: vec![0.5; 2], semantic: Matrix::from_elem((2, 5), 0.2) };
        assert!(stage1_loss(&short, &half, &[1.0; 5]).is_err());
    }

    fn input_from(power: &[f64], occ: &[bool]) -> StageOneInput {
        let m = power.len();
        let mut idx: Vec<[u32; 3]> = (0..m as u32).map(|i| [i % 30, i / 30, 0]).collect();
        idx.sort();
        let feats = power.iter().zip(occ).flat_map(|(&p, &o)| [p, if o { 1.0 } else { 0.0 }]).collect();
        StageOneInput::new(SparseVoxelTensor::new(spec(), idx, feats, 2).unwrap()).unwrap()
    }

    #[test]
    fn separable_toy_is_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 600;
        let power: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        let occ = vec![false; m];
        let st: Vec<f64> = power.iter().map(|&p| if p > 0.5 { 1.0 } else { 0.0 }).collect();
        let classes: Vec<ClassLabel> = power.iter().map(|&p| if p > 0.5 { ClassLabel::Tree } else { ClassLabel::Free }).collect();
        let input = input_from(&power, &occ);
        let t = target(st.clone(), &classes);
        let cfg = StageOneTrainConfig { coords: false, column: false, batch: 128, ..Default::default() };
        let (model, log) = train_stage1(&[(input.clone(), t)], &[1.0; 5], &cfg, 1).unwrap();
        let out = model.predict(&input).unwrap();
        let correct = out
            .structural
            .iter()
            .zip(&st)
            .filter(|(p, y)| (**p > 0.5) == (**y > 0.5))
            .count();
        assert!(correct as f64 / m as f64 >= 0.95);
        assert!(log.last().unwrap().loss < 0.8 * log[0].loss);

        let (again, _) = train_stage1(&[(input.clone(), target(st, &classes))], &[1.0; 5], &cfg, 1).unwrap();
        assert_eq!(again, model);
    }

    #[test]
    fn zero_features_give_priors() {
        let m = 400;
        let input = input_from(&vec![0.0; m], &vec![false; m]);
        let classes: Vec<ClassLabel> = (0..m)
            .map(|i| if i % 4 == 0 { ClassLabel::Ground } else { ClassLabel::Free })
            .collect();
        let st: Vec<f64> = classes.iter().map(|&c| if c == ClassLabel::Free { 0.0 } else { 1.0 }).collect();
        let cfg = StageOneTrainConfig { coords: false, column: false, epochs: 300, batch: 400, ..Default::default() };
        let (model, _) = train_stage1(&[(input.clone(), target(st, &classes))], &[1.0; 5], &cfg, 0).unwrap();
        let out = model.predict(&input).unwrap();
        assert!(out.structural.iter().all(|p| (p - 0.25).abs() < 0.01));
        assert!(out.semantic.rows().into_iter().all(|r| (r[1] - 0.25).abs() < 0.01 && (r[0] - 0.75).abs() < 0.01));
    }

    #[test]
    fn neighbourhood_features() {
        let idx = vec![[1u32, 1, 1], [1, 1, 2], [2, 2, 2], [5, 5, 5]];
        let feats = vec![0.5, 1.0, 0.25, 0.0, 1.0, 1.0, 0.75, 1.0];
        let input = StageOneInput::new(SparseVoxelTensor::new(spec(), idx, feats, 2).unwrap()).unwrap();
        let f = voxel_features(&input, FeatureSet { coords: true, column: true });
        assert_eq!(f.ncols(), 11);
        assert_eq!(f.row(0).to_vec()[..4], [0.5, 1.0, 1.25, 1.0]);
        assert_eq!(f.row(2).to_vec()[..4], [1.0, 1.0, 0.75, 1.0]);
        assert_eq!(f.row(3).to_vec()[..4], [0.75, 1.0, 0.0, 0.0]);
        assert!((f[[3, 4]] - 5.5 / 30.0).abs() < 1e-15);
        // rows 0 and 1 share a column
        let dz = 1.0 / spec().dims[2] as f64;
        assert_eq!(f.row(0).to_vec()[7..], [1.0, 0.0, 1.0, 0.0]);
        assert_eq!(f.row(1).to_vec()[7..], [0.5, 1.0, 0.0, dz]);
        assert_eq!(f.row(3).to_vec()[7..], [1.0, 0.0, 0.0, 0.0]);
        let plain = voxel_features(&input, FeatureSet { coords: false, column: false });
        assert_eq!(plain.ncols(), 4);
    }
}
