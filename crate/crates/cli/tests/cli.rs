use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

const SMALL: &str = "[trajectory]\nframe_count = 2\n[preprocess]\nframes = 2\n[stage1]\nepochs = 3\n[stage2]\nsteps = 20\n[schedule]\nn_steps = 6\n";

fn radsem(dir: &Path, args: &[&str]) -> i32 {
    let status = Command::new(env!("CARGO_BIN_EXE_radsem"))
        .current_dir(dir)
        .args(args)
        .status()
        .expect("binary runs");
    status.code().expect("exit code")
}

fn manifest(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).expect("manifest exists")).expect("manifest is JSON")
}

#[test]
fn config_error_exits_2_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[schedule]\nsigma_min = 100.0\n").unwrap();
    assert_eq!(radsem(dir.path(), &["--config", "bad.toml", "simulate", "--out", "s"]), 2);
    let m = manifest(&dir.path().join("s/simulate.manifest.json"));
    assert_eq!(m["status"], "error");
    assert_eq!(m["exit_code"], 2);
    assert!(m["error"].as_str().unwrap().contains("sigma_min"));
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(radsem(dir.path(), &["--manifest", "m.json", "preprocess", "--data", "absent"]), 3);
    assert_eq!(manifest(&dir.path().join("m.json"))["exit_code"], 3);
}

#[test]
fn divergent_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.toml"), SMALL).unwrap();
    fs::write(d.join("div.toml"), format!("{SMALL}[stage2.adam]\nlr = 1e200\n")).unwrap();
    assert_eq!(radsem(d, &["--config", "c.toml", "simulate", "--out", "a"]), 0);
    assert_eq!(radsem(d, &["--config", "c.toml", "preprocess", "--data", "a"]), 0);
    assert_eq!(radsem(d, &["--config", "c.toml", "train", "1", "--data", "a", "--out", "s1.bin"]), 0);
    assert_eq!(radsem(d, &["--config", "div.toml", "train", "2", "--data", "a", "--stage1", "s1.bin", "--out", "s2.bin"]), 4);
    assert!(!d.join("s2.bin").exists());
    assert_eq!(manifest(&d.join("s2.bin.manifest.json"))["status"], "error");
}

#[test]
fn simulate_is_seeded_and_oracle_scores_perfectly_on_support() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.toml"), SMALL).unwrap();
    for out in ["a", "b"] {
        assert_eq!(radsem(d, &["--config", "c.toml", "--seed", "9", "simulate", "--out", out]), 0);
    }
    assert_eq!(fs::read(d.join("a/cube_001.bin")).unwrap(), fs::read(d.join("b/cube_001.bin")).unwrap());
    assert_eq!(manifest(&d.join("a/simulate.manifest.json"))["details"]["frames"], 2);

    assert_eq!(radsem(d, &["--config", "c.toml", "--threads", "1", "preprocess", "--data", "a"]), 0);
    let m = manifest(&d.join("a/preprocess.manifest.json"));
    assert!(m["details"]["rcc_voxels"].as_u64().unwrap() > 0);

    for sampler in ["heun", "consistency"] {
        let out = format!("oracle_{sampler}.txt");
        assert_eq!(
            radsem(d, &["--config", "c.toml", "infer", "--data", "a", "--cheat-oracle", "--sampler", sampler, "--out", &out]),
            0
        );
        let report = format!("{sampler}.json");
        assert_eq!(radsem(d, &["evaluate", "--pred", &out, "--gt", &out, "--taus", "0.25", "--out", &report]), 0);
        let r: Value = serde_json::from_str(&fs::read_to_string(d.join(&report)).unwrap()).unwrap();
        assert_eq!(r[0]["prf"]["iou"], 1.0);
    }
    let m = manifest(&d.join("oracle_heun.txt.manifest.json"));
    assert_eq!(m["details"]["network_evaluations"], 11);
    assert_eq!(manifest(&d.join("oracle_consistency.txt.manifest.json"))["details"]["network_evaluations"], 1);
}

#[test]
fn learned_models_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.toml"), format!("{SMALL}[distill]\niterations = 20\n")).unwrap();
    assert_eq!(radsem(d, &["--config", "c.toml", "--seed", "1", "simulate", "--out", "a"]), 0);
    assert_eq!(radsem(d, &["--config", "c.toml", "preprocess", "--data", "a"]), 0);
    let run = |args: &[&str]| radsem(d, &[&["--config", "c.toml"], args].concat());
    assert_eq!(run(&["train", "1", "--data", "a", "--out", "s1.bin"]), 0);
    assert_eq!(run(&["train", "2", "--data", "a", "--stage1", "s1.bin", "--out", "s2.bin"]), 0);
    assert_eq!(run(&["train", "distill", "--data", "a", "--stage1", "s1.bin", "--teacher", "s2.bin", "--out", "cm.bin"]), 0);
    assert_eq!(run(&["infer", "--data", "a", "--stage1", "s1.bin", "--stage2", "cm.bin", "--sampler", "consistency", "--out", "p.txt"]), 0);
    assert_eq!(run(&["evaluate", "--pred", "p.txt", "--gt", "a/gt.txt", "--out", "r.json"]), 0);
    let log = fs::read_to_string(d.join("s1.bin.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    // a Stage-I file is not a denoiser
    assert_eq!(run(&["infer", "--data", "a", "--stage1", "s1.bin", "--stage2", "s1.bin", "--out", "q.txt"]), 3);
}
