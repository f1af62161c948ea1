//! `radsem`: simulate, preprocess, train, infer, evaluate and bench.
//!
//! Every command writes a JSON manifest (even on failure) next to its output.
//! Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric divergence.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use radsem_core::config::Config;
use radsem_core::diffusion::{class_weights, consistency_distill, Parameterization, SamplerKind};
use radsem_core::geometry::{read_poses, write_poses};
use radsem_core::grid::SparseVoxelTensor;
use radsem_core::metrics::{self, EvalReport};
use radsem_core::pipeline::model::Model;
use radsem_core::pipeline::rowmlp::{train_stage2, RowMlp};
use radsem_core::pipeline::stage1::train_stage1;
use radsem_core::pipeline::{
    build_condition, class_counts, condition_from_labels, infer, prepare_input, simulate_sequence, stage1_target,
    stage2_example, stage2_generate, voxelized_ground_truth, write_log, CheatOracle, StageOnePredictor,
};
use radsem_core::preprocess::{accumulate_frames, assemble_stage1_input, StageOneInput};
use radsem_core::radar::SphericalCube;
use radsem_core::{Error, PoseSE3, Result, SemanticPointCloud, NUM_CLASSES};

#[derive(Parser)]
#[command(name = "radsem", version, about = "Radar-only semantic point cloud pipeline")]
struct Cli {
    /// TOML configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Manifest path (defaults to a file next to the output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene, trajectory, radar cubes and LiDAR frames.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Accumulate cubes into RCC/RPC tensors and voxelize the LiDAR ground truth.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a model.
    Train {
        #[command(subcommand)]
        stage: TrainStage,
    },
    /// Run Stage I and Stage II on a preprocessed sequence.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "cheat_oracle")]
        stage1: Option<PathBuf>,
        #[arg(long, required_unless_present = "cheat_oracle")]
        stage2: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Sampler::Heun)]
        sampler: Sampler,
        /// Replace both stages with the ground-truth labels on the Stage-I support.
        #[arg(long)]
        cheat_oracle: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predicted cloud against a ground-truth cloud.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Matching thresholds in meters (overrides the config).
        #[arg(long, value_delimiter = ',')]
        taus: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time multi-frame accumulation on one thread and on `--threads`.
    Bench {
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum TrainStage {
    /// Stage-I voxel predictor.
    #[command(name = "1")]
    One {
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-II denoiser, conditioned on Stage-I predictions.
    #[command(name = "2")]
    Two {
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a Stage-II denoiser into a one-step consistency model.
    Distill {
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampler {
    Heun,
    Consistency,
}

impl From<Sampler> for SamplerKind {
    fn from(s: Sampler) -> Self {
        match s {
            Sampler::Heun => SamplerKind::Heun,
            Sampler::Consistency => SamplerKind::Consistency,
        }
    }
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    status: &'static str,
    error: Option<String>,
    exit_code: i32,
    seed: u64,
    threads: usize,
    config_hash: Option<String>,
    started_unix: u64,
    elapsed_ms: f64,
    outputs: Vec<String>,
    details: Value,
}

/// What a command produced.
struct Report {
    outputs: Vec<PathBuf>,
    details: Value,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence(_) => 4,
        _ => 3,
    }
}

fn main() {
    let cli = Cli::parse();
    let (name, default_manifest) = describe(&cli.command);
    let manifest_path = cli.manifest.clone().unwrap_or(default_manifest);
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);

    let config = Config::load(cli.config.as_deref());
    let hash = config.as_ref().ok().map(Config::hash);
    let result = config.and_then(|cfg| {
        radsem_core::par::install(cli.threads, || run(&cli.command, &cfg, cli.seed, cli.threads))
    });

    let (status, error, code, outputs, details) = match result {
        Ok(r) => ("ok", None, 0, r.outputs, r.details),
        Err(e) => {
            eprintln!("radsem {name}: {e}");
            ("error", Some(e.to_string()), exit_code(&e), Vec::new(), Value::Null)
        }
    };
    let manifest = Manifest {
        command: name.to_string(),
        status,
        error,
        exit_code: code,
        seed: cli.seed,
        threads: cli.threads,
        config_hash: hash,
        started_unix,
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        details,
    };
    if let Err(e) = write_json_atomic(&manifest_path, &manifest) {
        eprintln!("radsem {name}: cannot write manifest {}: {e}", manifest_path.display());
        std::process::exit(if code == 0 { 3 } else { code });
    }
    std::process::exit(code);
}

fn describe(cmd: &Command) -> (&'static str, PathBuf) {
    match cmd {
        Command::Simulate { out } => ("simulate", out.join("simulate.manifest.json")),
        Command::Preprocess { data } => ("preprocess", data.join("preprocess.manifest.json")),
        Command::Train { stage } => match stage {
            TrainStage::One { out, .. } => ("train-1", sidecar(out, "manifest.json")),
            TrainStage::Two { out, .. } => ("train-2", sidecar(out, "manifest.json")),
            TrainStage::Distill { out, .. } => ("train-distill", sidecar(out, "manifest.json")),
        },
        Command::Infer { out, .. } => ("infer", sidecar(out, "manifest.json")),
        Command::Evaluate { out, .. } => ("evaluate", sidecar(out, "manifest.json")),
        Command::Bench { out, .. } => ("bench", sidecar(out, "manifest.json")),
    }
}

/// `model.bin` -> `model.bin.<ext>`
fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes to a temporary sibling, then renames over the target.
fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = sidecar(path, "tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        f(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))
}

fn run(cmd: &Command, cfg: &Config, seed: u64, threads: usize) -> Result<Report> {
    match cmd {
        Command::Simulate { out } => simulate(out, cfg, seed),
        Command::Preprocess { data } => preprocess(data, cfg, threads),
        Command::Train { stage } => match stage {
            TrainStage::One { data, out } => train_one(data, out, cfg, seed),
            TrainStage::Two { data, stage1, out } => train_two(data, stage1, out, cfg, seed),
            TrainStage::Distill { data, stage1, teacher, out } => distill(data, stage1, teacher, out, cfg, seed),
        },
        Command::Infer {
            data,
            stage1,
            stage2,
            sampler,
            cheat_oracle,
            out,
        } => run_infer(data, stage1.as_deref(), stage2.as_deref(), *sampler, *cheat_oracle, out, cfg, seed),
        Command::Evaluate { pred, gt, taus, out } => evaluate(pred, gt, taus, out, cfg),
        Command::Bench { reps, out } => bench(*reps, out, cfg, seed, threads),
    }
}

// ---------------------------------------------------------------- sequence directories

fn cube_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("cube_{k:03}.bin"))
}

fn lidar_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("lidar_{k:03}.txt"))
}

fn simulate(out: &Path, cfg: &Config, seed: u64) -> Result<Report> {
    let seq = simulate_sequence(cfg, seed)?;
    fs::create_dir_all(out)?;
    let mut outputs = vec![out.join("poses.txt")];
    write_atomic(&outputs[0], |w| write_poses(w, &seq.poses))?;
    for (k, (cube, lidar)) in seq.cubes.iter().zip(&seq.lidar).enumerate() {
        let (c, l) = (cube_path(out, k), lidar_path(out, k));
        write_atomic(&c, |w| cube.write(w))?;
        write_atomic(&l, |w| lidar.write_text(w))?;
        outputs.extend([c, l]);
    }
    Ok(Report {
        outputs,
        details: json!({
            "frames": seq.poses.len(),
            "scatterers": seq.scene.scatterers.len(),
            "lidar_points": seq.lidar.iter().map(|l| l.len()).collect::<Vec<_>>(),
        }),
    })
}

fn load_sequence(dir: &Path) -> Result<(Vec<PoseSE3>, Vec<SphericalCube>, SemanticPointCloud)> {
    let poses = read_poses(open(&dir.join("poses.txt"))?)?;
    if poses.is_empty() {
        return Err(Error::InvalidInput(format!("{} has no poses", dir.display())));
    }
    let cubes = (0..poses.len())
        .map(|k| SphericalCube::read(open(&cube_path(dir, k))?))
        .collect::<Result<Vec<_>>>()?;
    let lidar = SemanticPointCloud::read_text(open(&lidar_path(dir, poses.len() - 1))?)?;
    Ok((poses, cubes, lidar))
}

fn preprocess(dir: &Path, cfg: &Config, threads: usize) -> Result<Report> {
    let (poses, cubes, lidar) = load_sequence(dir)?;
    let prepared = prepare_input(&cubes, &poses, cfg, threads)?;
    let (gt_labels, gt_cloud) = voxelized_ground_truth(&lidar, cfg)?;
    let outputs = vec![dir.join("rcc.bin"), dir.join("rpc.bin"), dir.join("gt_labels.bin"), dir.join("gt.txt")];
    write_atomic(&outputs[0], |w| prepared.rcc.write(w))?;
    write_atomic(&outputs[1], |w| prepared.rpc.write(w))?;
    write_atomic(&outputs[2], |w| gt_labels.write(w))?;
    write_atomic(&outputs[3], |w| gt_cloud.write_text(w))?;
    Ok(Report {
        outputs,
        details: json!({
            "frames_used": prepared.frames_used,
            "accumulate_ms": prepared.accumulate_ms,
            "rcc_voxels": prepared.rcc.len(),
            "rpc_voxels": prepared.rpc.len(),
            "gt_voxels": gt_labels.len(),
        }),
    })
}

/// A preprocessed sequence as the learning stages see it.
struct Scene {
    input: StageOneInput,
    gt_labels: SparseVoxelTensor,
    lidar: SemanticPointCloud,
}

fn load_scene(dir: &Path) -> Result<Scene> {
    let rcc = SparseVoxelTensor::read(open(&dir.join("rcc.bin"))?)?;
    let rpc = SparseVoxelTensor::read(open(&dir.join("rpc.bin"))?)?;
    let gt_labels = SparseVoxelTensor::read(open(&dir.join("gt_labels.bin"))?)?;
    let poses = read_poses(open(&dir.join("poses.txt"))?)?;
    let lidar = SemanticPointCloud::read_text(open(&lidar_path(dir, poses.len().saturating_sub(1)))?)?;
    Ok(Scene {
        input: assemble_stage1_input(&rcc, &rpc)?,
        gt_labels,
        lidar,
    })
}

// ---------------------------------------------------------------- models

fn load_stage1(path: &Path) -> Result<Box<dyn StageOnePredictor>> {
    match Model::read(open(path)?)? {
        Model::Stage1(p) => Ok(Box::new(p)),
        Model::Denoiser(_) => Err(Error::InvalidInput(format!("{} is not a Stage-I model", path.display()))),
    }
}

fn load_denoiser(path: &Path) -> Result<RowMlp> {
    match Model::read(open(path)?)? {
        Model::Denoiser(n) => Ok(n),
        Model::Stage1(_) => Err(Error::InvalidInput(format!("{} is not a Stage-II model", path.display()))),
    }
}

fn save_model(path: &Path, model: &Model) -> Result<()> {
    write_atomic(path, |w| model.write(w))
}

fn save_log(path: &Path, log: &[radsem_core::pipeline::TrainRecord]) -> Result<PathBuf> {
    let p = sidecar(path, "log.jsonl");
    write_atomic(&p, |w| write_log(w, log))?;
    Ok(p)
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{what} is {v}")))
    }
}

fn train_one(dirs: &[PathBuf], out: &Path, cfg: &Config, seed: u64) -> Result<Report> {
    let scenes = dirs.iter().map(|d| load_scene(d)).collect::<Result<Vec<_>>>()?;
    let data = scenes
        .iter()
        .map(|s| Ok((s.input.clone(), stage1_target(&s.input, &s.lidar, cfg)?)))
        .collect::<Result<Vec<_>>>()?;
    let weights = class_weights(&class_counts(data.iter().map(|d| &d.1.semantic)));
    let (model, log) = train_stage1(&data, &weights, &cfg.stage1, seed)?;
    let (first, last) = (log.first().map(|r| r.loss), log.last().map(|r| r.loss));
    check_finite("final Stage-I loss", last.unwrap_or(0.0))?;
    save_model(out, &Model::Stage1(model))?;
    let log_path = save_log(out, &log)?;
    Ok(Report {
        outputs: vec![out.to_path_buf(), log_path],
        details: json!({ "scenes": scenes.len(), "class_weights": weights, "initial_loss": first, "final_loss": last }),
    })
}

/// Stage-II examples built from Stage-I conditions; scenes with an empty condition are skipped.
fn stage2_data(dirs: &[PathBuf], stage1: &Path) -> Result<(Vec<radsem_core::diffusion::Example>, Vec<f64>)> {
    let predictor = load_stage1(stage1)?;
    let mut examples = Vec::new();
    let mut samples = Vec::new();
    for d in dirs {
        let s = load_scene(d)?;
        let cond = build_condition(&predictor.predict(&s.input)?, &s.input.tensor)?;
        if cond.is_empty() {
            continue;
        }
        let (ex, sample) = stage2_example(&s.gt_labels, &cond)?;
        examples.push(ex);
        samples.push(sample.x);
    }
    if examples.is_empty() {
        return Err(Error::InvalidInput("Stage I leaves no occupied voxels in any scene".into()));
    }
    Ok((examples, class_weights(&class_counts(samples.iter()))))
}

fn train_two(dirs: &[PathBuf], stage1: &Path, out: &Path, cfg: &Config, seed: u64) -> Result<Report> {
    let (data, weights) = stage2_data(dirs, stage1)?;
    let mut net = RowMlp::new(cfg.stage2.model, NUM_CLASSES, seed);
    let log = train_stage2(&mut net, &data, &cfg.schedule, &weights, &cfg.stage2, seed)?;
    let last = log.last().map(|r| r.loss);
    check_finite("final Stage-II loss", last.unwrap_or(0.0))?;
    save_model(out, &Model::Denoiser(net))?;
    let log_path = save_log(out, &log)?;
    Ok(Report {
        outputs: vec![out.to_path_buf(), log_path],
        details: json!({ "examples": data.len(), "class_weights": weights, "final_loss": last }),
    })
}

fn distill(dirs: &[PathBuf], stage1: &Path, teacher: &Path, out: &Path, cfg: &Config, seed: u64) -> Result<Report> {
    let (data, _) = stage2_data(dirs, stage1)?;
    let teacher = load_denoiser(teacher)?;
    let mut student = teacher.clone();
    student.parameterization = Parameterization::Consistency;
    let config = radsem_core::diffusion::DistillConfig { seed, ..cfg.distill };
    let losses = consistency_distill(
        &mut student,
        &teacher,
        |rng: &mut ChaCha8Rng| Ok(data.choose(rng).expect("non-empty").clone()),
        &cfg.schedule,
        &config,
    )?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    let tail_mean = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    check_finite("distillation loss", tail_mean)?;
    save_model(out, &Model::Denoiser(student))?;
    Ok(Report {
        outputs: vec![out.to_path_buf()],
        details: json!({ "iterations": losses.len(), "final_loss_mean_last_100": tail_mean }),
    })
}

// ---------------------------------------------------------------- inference and metrics

#[allow(clippy::too_many_arguments)]
fn run_infer(
    dir: &Path,
    stage1: Option<&Path>,
    stage2: Option<&Path>,
    sampler: Sampler,
    cheat: bool,
    out: &Path,
    cfg: &Config,
    seed: u64,
) -> Result<Report> {
    let scene = load_scene(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = SamplerKind::from(sampler);
    let t = Instant::now();
    let (generated, timings) = if cheat {
        let cond = condition_from_labels(&scene.gt_labels, &scene.input.tensor)?;
        let (_, sample) = stage2_example(&scene.gt_labels, &cond)?;
        let oracle = CheatOracle::new(&sample, cfg.schedule);
        (stage2_generate(&oracle, &cond, &cfg.schedule, kind, &mut rng)?, Value::Null)
    } else {
        let (s1, s2) = (stage1.expect("clap enforces"), stage2.expect("clap enforces"));
        let predictor = load_stage1(s1)?;
        let net = load_denoiser(s2)?;
        let r = infer(predictor.as_ref(), &net, &scene.input, &cfg.schedule, kind, &mut rng)?;
        (r.generated, json!({ "stage1_ms": r.stage1_ms, "stage2_ms": r.stage2_ms }))
    };
    write_atomic(out, |w| generated.cloud.write_text(w))?;
    Ok(Report {
        outputs: vec![out.to_path_buf()],
        details: json!({
            "points": generated.cloud.len(),
            "sampler": match sampler { Sampler::Heun => "heun", Sampler::Consistency => "consistency" },
            "cheat_oracle": cheat,
            "n_steps": cfg.schedule.n_steps,
            "network_evaluations": generated.evaluations,
            "total_ms": t.elapsed().as_secs_f64() * 1e3,
            "timings": timings,
        }),
    })
}

fn evaluate(pred: &Path, gt: &Path, taus: &[f64], out: &Path, cfg: &Config) -> Result<Report> {
    let taus = if taus.is_empty() { cfg.eval.taus.clone() } else { taus.to_vec() };
    if taus.iter().any(|&t| t.is_nan() || t <= 0.0) {
        return Err(Error::Config("thresholds must be positive".into()));
    }
    let p = SemanticPointCloud::read_text(open(pred)?)?;
    let g = SemanticPointCloud::read_text(open(gt)?)?;
    let reports = taus.iter().map(|&t| metrics::evaluate(&p, &g, t)).collect::<Result<Vec<EvalReport>>>()?;
    print!("{}", metrics::summary_table(&reports));
    write_json_atomic(out, &reports)?;
    Ok(Report {
        outputs: vec![out.to_path_buf()],
        details: json!({ "pred_points": p.len(), "gt_points": g.len(), "taus": taus }),
    })
}

fn bench(reps: usize, out: &Path, cfg: &Config, seed: u64, threads: usize) -> Result<Report> {
    if reps == 0 {
        return Err(Error::Config("reps must be positive".into()));
    }
    let threads = if threads == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        threads
    };
    let seq = simulate_sequence(cfg, seed)?;
    let time = |n: usize| -> Result<(f64, SparseVoxelTensor)> {
        let mut ms = Vec::with_capacity(reps);
        let mut last = None;
        for _ in 0..reps {
            let t = Instant::now();
            last = Some(accumulate_frames(&seq.cubes, &seq.poses, &cfg.preprocess, n)?);
            ms.push(t.elapsed().as_secs_f64() * 1e3);
        }
        ms.sort_by(f64::total_cmp);
        Ok((ms[ms.len() / 2], last.expect("reps > 0")))
    };
    let (t1, r1) = time(1)?;
    let (tn, rn) = time(threads)?;
    let identical = r1 == rn;
    let result = json!({
        "frames": seq.cubes.len(),
        "reps": reps,
        "threads": threads,
        "median_ms_1_thread": t1,
        "median_ms_n_threads": tn,
        "speedup": t1 / tn,
        "bitwise_identical": identical,
        "rcc_voxels": r1.len(),
    });
    println!("accumulate: 1 thread {t1:.1} ms, {threads} threads {tn:.1} ms, speedup {:.2}x", t1 / tn);
    write_json_atomic(out, &result)?;
    Ok(Report {
        outputs: vec![out.to_path_buf()],
        details: result,
    })
}
