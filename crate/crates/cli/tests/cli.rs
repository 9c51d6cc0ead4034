use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
run_dir = "runs"
checkpoint_every = 2

[dataset]
dir = "data"
n_train = 2
n_test = 1
base_seed = 5

[dataset.phantom]
grid_edge = 32
a_max = 8.0
b_max = 7.0
c_max = 7.0

[model]
base_width = 4
depth = 2
tau_embed_dim = 8

[train]
steps = 3
batch = 2
patch = 16

[eval]
steps = [2]
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cryoflow"))
        .args(args)
        .arg("--config")
        .arg(dir.join("tiny.toml"))
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn usage_errors_exit_with_2() {
    let help = Command::new(env!("CARGO_BIN_EXE_cryoflow")).arg("--help").output().unwrap();
    assert_eq!(code(&help), 0);
    let bad = Command::new(env!("CARGO_BIN_EXE_cryoflow")).arg("frobnicate").output().unwrap();
    assert_eq!(code(&bad), 2);

    let dir = setup();
    assert_eq!(code(&run(dir.path(), &["train", "--model", "neither"])), 2);
    let missing = Command::new(env!("CARGO_BIN_EXE_cryoflow"))
        .args(["gen", "--config", "/nonexistent/cfg.toml"])
        .output()
        .unwrap();
    assert_eq!(code(&missing), 2);
    fs::write(dir.path().join("bad.toml"), "[train]\nbatch = 0\n").unwrap();
    let invalid = Command::new(env!("CARGO_BIN_EXE_cryoflow"))
        .args(["gen", "--config"])
        .arg(dir.path().join("bad.toml"))
        .output()
        .unwrap();
    assert_eq!(code(&invalid), 2);

    assert_eq!(code(&run(dir.path(), &["gen"])), 0);
    // no checkpoint yet
    let predict = run(dir.path(), &["predict", "--case", "case_0002"]);
    assert_eq!(code(&predict), 2);
    assert!(String::from_utf8_lossy(&predict.stderr).contains("no checkpoint"));
    assert_eq!(code(&run(dir.path(), &["eval"])), 2);
}

#[test]
fn gen_rerun_verifies_hashes() {
    let dir = setup();
    assert_eq!(code(&run(dir.path(), &["gen"])), 0);
    let manifest = dir.path().join("data/manifest.json");
    let before = fs::metadata(&manifest).unwrap().modified().unwrap();
    let again = run(dir.path(), &["gen"]);
    assert_eq!(code(&again), 0);
    assert!(String::from_utf8_lossy(&again.stderr).contains("up to date"));
    assert_eq!(fs::metadata(&manifest).unwrap().modified().unwrap(), before);

    let frame = dir.path().join("data/case_0000/frame_3min.mask.vvol");
    let mut bytes = fs::read(&frame).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&frame, bytes).unwrap();
    let corrupt = run(dir.path(), &["gen"]);
    assert_eq!(code(&corrupt), 3);
    assert!(String::from_utf8_lossy(&corrupt.stderr).contains("hash mismatch"));
    assert_eq!(code(&run(dir.path(), &["gen", "--force"])), 0);
    assert_eq!(code(&run(dir.path(), &["gen"])), 0);
}

#[test]
fn train_predict_rollout_eval_report() {
    let dir = setup();
    let root = dir.path();
    assert_eq!(code(&run(root, &["gen"])), 0);
    let train = run(root, &["train"]);
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    let runs = root.join("runs");
    let log = fs::read_to_string(runs.join("flow.loss.csv")).unwrap();
    assert!(log.starts_with("step,loss,lr\n"));
    assert_eq!(log.lines().count(), 4);
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(runs.join("flow.run.json")).unwrap()).unwrap();
    assert_eq!(record["steps"], 3);
    assert_eq!(record["train"]["augment"], true);

    // resuming to a later step extends the same log
    assert_eq!(code(&run(root, &["train", "--steps", "4"])), 0);
    assert_eq!(fs::read_to_string(runs.join("flow.loss.csv")).unwrap().lines().count(), 5);

    let predict = run(root, &["predict", "--case", "case_0002", "--steps", "2"]);
    assert_eq!(code(&predict), 0, "{}", String::from_utf8_lossy(&predict.stderr));
    let out_dir = runs.join("predictions/case_0002/flow-heun-2_t3_dt7");
    for f in ["ct.vvol", "mask_prob.vvol", "mask_bin.vvol", "provenance.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let prov: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["delta_t_min"], 7.0);
    assert_eq!(prov["checkpoint"], "flow.ckpt");

    let rollout = run(root, &["rollout", "--case", "case_0002", "--horizons", "1,3,5,7", "--steps", "2"]);
    assert_eq!(code(&rollout), 0, "{}", String::from_utf8_lossy(&rollout.stderr));
    let vols = fs::read_to_string(runs.join("rollout/case_0002/flow-heun-2_t0_volumes.csv")).unwrap();
    assert_eq!(vols.lines().count(), 5);

    // the diffusion arm has no checkpoint and is left out
    let eval = run(root, &["eval", "--steps", "2"]);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(String::from_utf8_lossy(&eval.stderr).contains("omitting diffusion"));
    let table = String::from_utf8_lossy(&eval.stdout);
    assert!(table.contains("Identity |"));
    assert!(table.contains("Flow (2) |"));
    let csv = runs.join("metrics.csv");
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 1 + 2);
    assert!(runs.join("metrics.json").exists());

    let report = Command::new(env!("CARGO_BIN_EXE_cryoflow")).arg("report").arg("--csv").arg(&csv).output().unwrap();
    assert_eq!(code(&report), 0);
    assert_eq!(String::from_utf8_lossy(&report.stdout), table);
}
