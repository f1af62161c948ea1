//! The two learning stages wired together.
//!
//! Stage I maps the `M x 2` radar input to a structural confidence and
//! class probabilities per voxel. Rows whose most likely class is free are
//! dropped; the `L` survivors form the condition matrix `(ŷ_st, class code)`.
//! Stage II samples `L x S` class scores conditioned on it; the argmax of
//! each row, without free rows, is the predicted semantic cloud (`N <= L <= M`).

pub mod model;
pub mod rowmlp;
pub mod stage1;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::diffusion::{
    consistency_sample, heun_sample, invert_precond, Denoiser, Example, Matrix, NoiseSchedule, SamplerKind,
};
use crate::error::{Error, Result};
use crate::geometry::{ClassLabel, PoseSE3, SemanticPointCloud, NUM_CLASSES};
use crate::grid::{to_point_cloud, SparseVoxelTensor};
use crate::preprocess::{accumulate_frames, assemble_stage1_input, build_rpc, StageOneInput};
use crate::radar::{ca_cfar, synthesize_spherical_cube, SphericalCube};
use crate::scene::{generate_scene, generate_trajectory, render_lidar, Scene};
use crate::supervision::{
    assemble_stage1_target, build_semantic_target, build_structural_target, expand_stage2_sample,
    voxel_labels, StageOneTarget, StageTwoSample,
};

pub use model::Model;
pub use rowmlp::{RowMlp, RowMlpConfig, StageTwoTrainConfig};
pub use stage1::{stage1_loss, LinearPredictor, StageOneOutput, StageOnePredictor, StageOneTrainConfig};

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(default)]
    pub parts: BTreeMap<String, f64>,
}

pub fn write_log<W: Write>(mut w: W, records: &[TrainRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Independent sub-seed for a numbered stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Rows of a tensor as a dense `M x C` matrix.
pub fn to_matrix(t: &SparseVoxelTensor) -> Matrix {
    Matrix::from_shape_vec((t.len(), t.channels()), t.features().to_vec()).expect("row-major features")
}

/// Condition rows: structural confidence and a non-free class code.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMatrix {
    pub tensor: SparseVoxelTensor,
}

impl ConditionMatrix {
    pub fn new(tensor: SparseVoxelTensor) -> Result<Self> {
        if tensor.channels() != 2 {
            return Err(Error::shape("condition needs two channels"));
        }
        if (0..tensor.len()).any(|i| tensor.row(i)[1] == ClassLabel::Free.code() as f64) {
            return Err(Error::input("condition rows cannot carry the free class"));
        }
        Ok(ConditionMatrix { tensor })
    }

    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }

    pub fn matrix(&self) -> Matrix {
        to_matrix(&self.tensor)
    }
}

fn argmax_row(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// Keeps rows whose most likely class (ties to the smaller code) is not free.
pub fn build_condition(out: &StageOneOutput, support: &SparseVoxelTensor) -> Result<ConditionMatrix> {
    let m = support.len();
    if out.structural.len() != m || out.semantic.dim() != (m, NUM_CLASSES) {
        return Err(Error::shape("stage-one output not aligned to its support"));
    }
    let mut idx = Vec::new();
    let mut feats = Vec::new();
    for r in 0..m {
        let code = argmax_row(out.semantic.row(r));
        if code != ClassLabel::Free.index() {
            idx.push(support.indices()[r]);
            feats.push(out.structural[r]);
            feats.push(code as f64);
        }
    }
    ConditionMatrix::new(SparseVoxelTensor::new(*support.spec(), idx, feats, 2)?)
}

/// Condition built from ground-truth voxel labels on `support`, with
/// structural confidence 1: what a perfect Stage I would produce.
pub fn condition_from_labels(gt: &SparseVoxelTensor, support: &SparseVoxelTensor) -> Result<ConditionMatrix> {
    let sample = expand_stage2_sample(gt, support)?;
    let labels = sample.labels()?;
    let mut idx = Vec::new();
    let mut feats = Vec::new();
    for (i, &v) in labels.indices().iter().zip(labels.features()) {
        if v != ClassLabel::Free.code() as f64 {
            idx.push(*i);
            feats.push(1.0);
            feats.push(v);
        }
    }
    ConditionMatrix::new(SparseVoxelTensor::new(*support.spec(), idx, feats, 2)?)
}

/// Stage-II training pair on the condition support.
pub fn stage2_example(gt: &SparseVoxelTensor, condition: &ConditionMatrix) -> Result<(Example, StageTwoSample)> {
    let sample = expand_stage2_sample(gt, &condition.tensor)?;
    Ok(((to_matrix(&sample.x), Some(condition.matrix())), sample))
}

/// Denoiser that always returns the given clean sample (test-time upper bound).
#[derive(Debug, Clone)]
pub struct CheatOracle {
    pub x: Matrix,
    pub schedule: NoiseSchedule,
    pub parameterization: crate::diffusion::Parameterization,
}

impl CheatOracle {
    pub fn new(sample: &StageTwoSample, schedule: NoiseSchedule) -> Self {
        CheatOracle {
            x: to_matrix(&sample.x),
            schedule,
            parameterization: crate::diffusion::Parameterization::Edm,
        }
    }
}

impl Denoiser for CheatOracle {
    fn evaluate(&self, x_in: &Matrix, sigma: f64, _condition: Option<&Matrix>) -> Result<Matrix> {
        if x_in.dim() != self.x.dim() {
            return Err(Error::shape("oracle sample and state differ in shape"));
        }
        let p = self.parameterization.precond(sigma, &self.schedule)?;
        Ok(invert_precond(&self.x, &(x_in / p.c_in), &p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub cloud: SemanticPointCloud,
    /// Class code per condition row (free rows included).
    pub labels: SparseVoxelTensor,
    pub evaluations: usize,
}

/// Samples class scores on the condition support and converts the non-free argmax rows to points.
pub fn stage2_generate<R: Rng + ?Sized>(
    denoiser: &dyn Denoiser,
    condition: &ConditionMatrix,
    schedule: &NoiseSchedule,
    mode: SamplerKind,
    rng: &mut R,
) -> Result<Generated> {
    if condition.is_empty() {
        return Ok(Generated {
            cloud: SemanticPointCloud::default(),
            labels: SparseVoxelTensor::empty(*condition.tensor.spec(), 1),
            evaluations: 0,
        });
    }
    let cond = condition.matrix();
    let shape = (condition.len(), NUM_CLASSES);
    let sample = match mode {
        SamplerKind::Heun => heun_sample(denoiser, Some(&cond), shape, schedule, rng)?,
        SamplerKind::Consistency => consistency_sample(denoiser, Some(&cond), shape, schedule, rng)?,
    };
    let codes: Vec<f64> = sample.x.rows().into_iter().map(|r| argmax_row(r) as f64).collect();
    let labels = condition.tensor.with_features(codes, 1)?;
    Ok(Generated {
        cloud: to_point_cloud(&labels)?,
        labels,
        evaluations: sample.evaluations,
    })
}

/// Synthetic frames of one scene; `lidar[k]` is the ground truth in the sensor frame of `poses[k]`.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub scene: Scene,
    pub poses: Vec<PoseSE3>,
    pub cubes: Vec<SphericalCube>,
    pub lidar: Vec<SemanticPointCloud>,
}

pub fn simulate_sequence(cfg: &Config, seed: u64) -> Result<Sequence> {
    cfg.validate()?;
    let scene = generate_scene(&cfg.scene, derive_seed(seed, 1))?;
    let poses = generate_trajectory(&cfg.trajectory, derive_seed(seed, 2))?;
    let mut cubes = Vec::with_capacity(poses.len());
    let mut lidar = Vec::with_capacity(poses.len());
    for (k, pose) in poses.iter().enumerate() {
        let mut cube = synthesize_spherical_cube(&scene, pose, &cfg.radar, derive_seed(seed, 100 + k as u64))?;
        cube.frame = k as u32;
        cubes.push(cube);
        lidar.push(render_lidar(&scene, pose, &cfg.lidar, derive_seed(seed, 200 + k as u64)));
    }
    Ok(Sequence { scene, poses, cubes, lidar })
}

/// Radar-side tensors of the current (last) frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    /// Normalized radar Cartesian cube.
    pub rcc: SparseVoxelTensor,
    /// Radar point cloud occupancy.
    pub rpc: SparseVoxelTensor,
    pub input: StageOneInput,
    pub accumulate_ms: f64,
    pub frames_used: usize,
}

/// Runs accumulation and CFAR over the last `preprocess.frames` frames
/// (or all of them when fewer are available).
pub fn prepare_input(cubes: &[SphericalCube], poses: &[PoseSE3], cfg: &Config, threads: usize) -> Result<Prepared> {
    if cubes.len() != poses.len() {
        return Err(Error::shape(format!("{} cubes but {} poses", cubes.len(), poses.len())));
    }
    if cubes.is_empty() {
        return Err(Error::input("no frames to preprocess"));
    }
    let k = cfg.preprocess.frames.min(cubes.len());
    let (cubes, poses) = (&cubes[cubes.len() - k..], &poses[poses.len() - k..]);
    let t0 = Instant::now();
    let rcc = accumulate_frames(cubes, poses, &cfg.preprocess, threads)?;
    let accumulate_ms = t0.elapsed().as_secs_f64() * 1e3;
    let detections = crate::par::install(threads, || {
        cubes
            .iter()
            .map(|c| ca_cfar(c, &cfg.cfar).map(|d| d.into_iter().map(|x| x.index).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()
    })?;
    let rpc = build_rpc(&detections, &cubes[0].geometry, poses, &cfg.preprocess)?;
    let input = assemble_stage1_input(&rcc, &rpc)?;
    Ok(Prepared {
        rcc,
        rpc,
        input,
        accumulate_ms,
        frames_used: k,
    })
}

/// Stage-I targets for `input` from the current-frame ground truth.
pub fn stage1_target(input: &StageOneInput, lidar: &SemanticPointCloud, cfg: &Config) -> Result<StageOneTarget> {
    let grid = &cfg.preprocess.grid;
    let st = build_structural_target(lidar, grid, &cfg.kernel)?;
    let se = build_semantic_target(lidar, grid, &cfg.kernel)?;
    assemble_stage1_target(&st, &se, &input.tensor)
}

/// Ground truth as voxel-center points with per-voxel majority labels.
pub fn voxelized_ground_truth(lidar: &SemanticPointCloud, cfg: &Config) -> Result<(SparseVoxelTensor, SemanticPointCloud)> {
    let labels = voxel_labels(lidar, &cfg.preprocess.grid)?;
    let cloud = to_point_cloud(&labels)?;
    Ok((labels, cloud))
}

/// Ground truth restricted to `support`, as a cloud.
pub fn ground_truth_on_support(gt: &SparseVoxelTensor, support: &SparseVoxelTensor) -> Result<SemanticPointCloud> {
    to_point_cloud(&expand_stage2_sample(gt, support)?.labels()?)
}

/// Voxel centers of the radar point cloud, all carrying `label`.
pub fn rpc_cloud(rpc: &SparseVoxelTensor, label: ClassLabel) -> SemanticPointCloud {
    let points: Vec<_> = rpc.indices().iter().map(|&i| rpc.spec().center(i)).collect();
    let labels = vec![label; points.len()];
    SemanticPointCloud { points, labels }
}

/// Per-class row counts of one-hot tensors.
pub fn class_counts<'a>(tensors: impl IntoIterator<Item = &'a SparseVoxelTensor>) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for t in tensors {
        for r in 0..t.len() {
            let row = t.row(r);
            if let Some(c) = (0..row.len().min(NUM_CLASSES)).find(|&c| row[c] == 1.0) {
                counts[c] += 1;
            }
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub condition: ConditionMatrix,
    pub generated: Generated,
    pub stage1_ms: f64,
    pub stage2_ms: f64,
}

/// Stage I, condition, Stage II.
pub fn infer<R: Rng + ?Sized>(
    stage1: &dyn StageOnePredictor,
    denoiser: &dyn Denoiser,
    input: &StageOneInput,
    schedule: &NoiseSchedule,
    mode: SamplerKind,
    rng: &mut R,
) -> Result<Inference> {
    let t0 = Instant::now();
    let out = stage1.predict(input)?;
    let condition = build_condition(&out, &input.tensor)?;
    let stage1_ms = t0.elapsed().as_secs_f64() * 1e3;
    let t1 = Instant::now();
    let generated = stage2_generate(denoiser, &condition, schedule, mode, rng)?;
    Ok(Inference {
        condition,
        generated,
        stage1_ms,
        stage2_ms: t1.elapsed().as_secs_f64() * 1e3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{denoise, heun_from, standard_normal, Parameterization};
    use crate::grid::GridSpec;
    use crate::supervision::one_hot;

    fn spec() -> GridSpec {
        GridSpec {
            dims: [10, 10, 10],
            min: [0.0; 3],
            max: [10.0; 3],
        }
    }

    fn support(idx: &[[u32; 3]]) -> SparseVoxelTensor {
        SparseVoxelTensor::new(spec(), idx.to_vec(), vec![0.0; idx.len()], 1).unwrap()
    }

    fn labels(v: &[([u32; 3], ClassLabel)]) -> SparseVoxelTensor {
        SparseVoxelTensor::new(spec(), v.iter().map(|e| e.0).collect(), v.iter().map(|e| e.1.code() as f64).collect(), 1).unwrap()
    }

    fn output(rows: &[(f64, [f64; NUM_CLASSES])]) -> StageOneOutput {
        StageOneOutput {
            structural: rows.iter().map(|r| r.0).collect(),
            semantic: Matrix::from_shape_vec((rows.len(), NUM_CLASSES), rows.iter().flat_map(|r| r.1).collect()).unwrap(),
        }
    }

    #[test]
    fn condition_cases() {
        let sup = support(&[[0, 0, 0], [1, 1, 1], [2, 2, 2]]);
        let all_free = output(&[(0.2, one_hot(ClassLabel::Free)); 3]);
        assert!(build_condition(&all_free, &sup).unwrap().is_empty());

        let one = output(&[
            (0.2, one_hot(ClassLabel::Free)),
            (0.9, [0.0, 0.05, 0.05, 0.1, 0.8]),
            (0.3, [0.1, 0.4, 0.4, 0.05, 0.05]),
        ]);
        let c = build_condition(&one, &sup).unwrap();
        assert_eq!(c.tensor.indices(), &[[1, 1, 1], [2, 2, 2]]);
        assert_eq!(c.tensor.row(0), &[0.9, ClassLabel::Wire.code() as f64]);
        assert_eq!(c.tensor.row(1), &[0.3, ClassLabel::Ground.code() as f64]);
        assert!(build_condition(&one, &support(&[[0, 0, 0]])).is_err());
    }

    #[test]
    fn condition_rejects_free_rows() {
        let t = SparseVoxelTensor::new(spec(), vec![[0, 0, 0]], vec![0.5, 0.0], 2).unwrap();
        assert!(ConditionMatrix::new(t).is_err());
    }

    #[test]
    fn cheat_oracle_returns_sample() {
        let gt = labels(&[([1, 1, 1], ClassLabel::Pole), ([2, 2, 2], ClassLabel::Tree)]);
        let cond = condition_from_labels(&gt, &support(&[[1, 1, 1], [2, 2, 2], [3, 3, 3]])).unwrap();
        assert_eq!(cond.len(), 2);
        let (_, sample) = stage2_example(&gt, &cond).unwrap();
        let sched = NoiseSchedule::default();
        let oracle = CheatOracle::new(&sample, sched);
        let x = to_matrix(&sample.x);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noisy = standard_normal(x.dim(), &mut rng) * 3.0;
        let d = denoise(&oracle, Parameterization::Edm, &sched, &noisy, 1.0, None).unwrap();
        assert!((d - &x).iter().all(|e| e.abs() < 1e-12));
        let out = heun_from(&oracle, standard_normal(x.dim(), &mut rng) * 80.0, None, &sched, &mut rng).unwrap();
        assert!((out.x - &x).iter().all(|e| e.abs() < 1e-4));
        let z = oracle.evaluate(&x, 1e-300, None);
        assert!(z.is_ok());
    }

    #[test]
    fn generation_cases() {
        let sched = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let empty = ConditionMatrix::new(SparseVoxelTensor::empty(spec(), 2)).unwrap();
        let sample = StageTwoSample {
            x: SparseVoxelTensor::empty(spec(), NUM_CLASSES),
            dropped: 0,
            coverage: 1.0,
        };
        let g = stage2_generate(&CheatOracle::new(&sample, sched), &empty, &sched, SamplerKind::Heun, &mut rng).unwrap();
        assert!(g.cloud.is_empty());

        let gt = labels(&[([1, 1, 1], ClassLabel::Pole), ([2, 2, 2], ClassLabel::Wire), ([5, 5, 5], ClassLabel::Ground)]);
        let sup = support(&[[1, 1, 1], [2, 2, 2], [3, 3, 3], [5, 5, 5]]);
        let cond = condition_from_labels(&gt, &sup).unwrap();
        let (_, sample) = stage2_example(&gt, &cond).unwrap();
        let oracle = CheatOracle::new(&sample, sched);
        let a = stage2_generate(&oracle, &cond, &sched, SamplerKind::Heun, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = stage2_generate(&oracle, &cond, &sched, SamplerKind::Heun, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cloud, ground_truth_on_support(&gt, &sup).unwrap());
        assert_eq!(a.evaluations, 2 * sched.n_steps - 1);

        // a free-only ground truth on the support: every row decodes to free
        let free_sample = expand_stage2_sample(&labels(&[]), &cond.tensor).unwrap();
        let free_oracle = CheatOracle::new(&free_sample, sched);
        let g = stage2_generate(&free_oracle, &cond, &sched, SamplerKind::Heun, &mut rng).unwrap();
        assert!(g.cloud.is_empty());
    }

    #[test]
    fn seeds_are_distinct() {
        assert_ne!(derive_seed(1, 1), derive_seed(1, 2));
        assert_ne!(derive_seed(1, 1), derive_seed(2, 1));
        assert_eq!(derive_seed(5, 9), derive_seed(5, 9));
    }

    #[test]
    fn log_lines() {
        let mut buf = Vec::new();
        let rec = TrainRecord { step: 3, loss: 0.5, parts: BTreeMap::new() };
        write_log(&mut buf, &[rec.clone(), rec]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back: TrainRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back.step, 3);
    }
}
