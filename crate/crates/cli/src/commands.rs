use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cryoflow::diffusion::edm_sample;
use cryoflow::metrics::{evaluate_case, read_csv, write_csv, MetricsRecord};
use cryoflow::model::{load_checkpoint_for, save_checkpoint};
use cryoflow::phantom::{generate_dataset, load_case, CaseEntry, CaseTimeline, Manifest, Split, MANIFEST_FILE};
use cryoflow::report::render_table;
use cryoflow::sampler::{predict_future, tile_predict, IntegrationSpec, Method, Prediction};
use cryoflow::train::{train, Arm, TrainConfig};
use cryoflow::{vvol, Conditioning, OptimizerState, Sample, Stage, VelocityModel};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::Config;

/// A mistake in how the tool was invoked, reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Maps a failure to the documented process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<cryoflow::Error>() {
            return match e {
                e if e.is_numeric() => EXIT_NUMERIC,
                cryoflow::Error::Config(_) | cryoflow::Error::InvalidArgument(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes the phantom dataset. An existing dataset generated with the same
/// settings is hash-checked and left alone.
fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn gen(cfg: &Config, force: bool) -> Result<Manifest> {
    let dir = &cfg.dataset.dir;
    let d = &cfg.dataset;
    if dir.join(MANIFEST_FILE).exists() && !force {
        let manifest = Manifest::load(dir)?;
        let same = manifest.base_seed == d.base_seed
            && manifest.params == d.phantom
            && manifest.split(Split::Train).count() == d.n_train
            && manifest.split(Split::Test).count() == d.n_test;
        if !same {
            return Err(usage(format!(
                "{} holds a dataset generated with other settings; pass --force to regenerate",
                dir.display()
            )));
        }
        let bad = manifest.verify(dir);
        if !bad.is_empty() {
            for p in &bad {
                eprintln!("hash mismatch: {}", p.display());
            }
            bail!(cryoflow::Error::format(&bad[0], format!("{} file(s) missing or failing their manifest hash", bad.len())));
        }
        eprintln!("{} is up to date", dir.display());
        return Ok(manifest);
    }
    let manifest = generate_dataset(d.n_train, d.n_test, d.base_seed, &d.phantom, dir)?;
    eprintln!(
        "wrote {} train and {} test cases to {}",
        d.n_train,
        d.n_test,
        dir.display()
    );
    Ok(manifest)
}

/// Loads and hash-checks the manifest.
pub fn load_manifest(cfg: &Config) -> Result<Manifest> {
    let dir = &cfg.dataset.dir;
    let manifest = Manifest::load(dir)?;
    let bad = manifest.verify(dir);
    if !bad.is_empty() {
        bail!(cryoflow::Error::format(&bad[0], format!("{} file(s) missing or failing their manifest hash", bad.len())));
    }
    Ok(manifest)
}

pub fn load_split(cfg: &Config, manifest: &Manifest, split: Split) -> Result<Vec<(CaseEntry, CaseTimeline)>> {
    manifest
        .split(split)
        .map(|e| Ok((e.clone(), load_case(&cfg.dataset.dir, e)?)))
        .collect()
}

fn frame_at(timeline: &CaseTimeline, t: f32) -> Result<&Sample> {
    timeline
        .frames
        .iter()
        .find(|f| f.time_min == t)
        .ok_or_else(|| usage(format!("case {} has no frame at t={t} min", timeline.case_id)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub last_loss: Option<f64>,
}

pub fn train_cmd(cfg: &Config, arm: Arm, force: bool) -> Result<TrainSummary> {
    let manifest = load_manifest(cfg)?;
    let cases: Vec<CaseTimeline> = load_split(cfg, &manifest, Split::Train)?.into_iter().map(|(_, c)| c).collect();
    create_dir(&cfg.run_dir)?;
    let ckpt = cfg.checkpoint_path(arm);
    let model_cfg = cfg.model_for(arm);
    let loss_log = cfg.run_dir.join(format!("{arm}.loss.csv"));
    let (mut model, mut opt) = if ckpt.exists() && !force {
        let (m, o) = load_checkpoint_for(&ckpt, &model_cfg)?;
        eprintln!("resuming {arm} from step {}", o.step);
        (m, o)
    } else {
        let m = VelocityModel::init(model_cfg)?;
        let o = OptimizerState::new(m.param_count(), cfg.train.base_lr, cfg.train.lr_half_life_steps);
        fs::write(&loss_log, "step,loss,lr\n").with_context(|| format!("writing {}", loss_log.display()))?;
        (m, o)
    };
    eprintln!("{arm}: {} parameters, {} train cases", model.param_count(), cases.len());

    let mut log = String::new();
    let mut last = None;
    let every = cfg.checkpoint_every.max(1);
    while opt.step < cfg.train.steps {
        let target = ((opt.step / every + 1) * every).min(cfg.train.steps);
        let chunk = TrainConfig {
            steps: target,
            ..cfg.train.clone()
        };
        let mut window = 0.0;
        let lr_of = |step: u64| cfg.train.base_lr * (-(step as f64) / cfg.train.lr_half_life_steps).exp2();
        train(&mut model, &mut opt, &cases, arm, &chunk, &cfg.diffusion, |step, loss| {
            log.push_str(&format!("{step},{loss:e},{:e}\n", lr_of(step)));
            last = Some(loss);
            window += loss;
            if (step + 1) % 100 == 0 {
                eprintln!("step {:>6}  loss {:.5}", step + 1, window / 100.0);
                window = 0.0;
            }
        })?;
        save_checkpoint(&model, &opt, &ckpt)?;
        let mut f = fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&loss_log)
            .with_context(|| format!("opening {}", loss_log.display()))?;
        std::io::Write::write_all(&mut f, log.as_bytes())?;
        log.clear();
    }
    if !ckpt.exists() {
        save_checkpoint(&model, &opt, &ckpt)?;
    }
    let record = serde_json::json!({
        "arm": arm,
        "config_digest": cfg.digest(),
        "model_digest": hex::encode(model.config().digest()),
        "checkpoint": ckpt.file_name().map(|n| n.to_string_lossy().into_owned()),
        "checkpoint_sha256": file_sha256(&ckpt)?,
        "steps": opt.step,
        "train": cfg.train,
        "model": model.config(),
    });
    write_json(&cfg.run_dir.join(format!("{arm}.run.json")), &record)?;
    eprintln!("checkpoint {}", ckpt.display());
    Ok(TrainSummary {
        steps: opt.step,
        last_loss: last,
    })
}

/// Inference settings shared by predict, rollout and eval.
#[derive(Debug, Clone, Copy)]
pub struct Sampling {
    pub method: Method,
    pub steps: usize,
}

fn checkpoint_for(cfg: &Config, arm: Arm, checkpoint: Option<&Path>) -> PathBuf {
    checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.checkpoint_path(arm))
}

pub fn load_model(cfg: &Config, arm: Arm, checkpoint: Option<&Path>) -> Result<VelocityModel> {
    let path = checkpoint_for(cfg, arm, checkpoint);
    if !path.exists() {
        return Err(usage(format!("no checkpoint at {}; run `cryoflow train` first", path.display())));
    }
    Ok(load_checkpoint_for(&path, &cfg.model_for(arm))?.0)
}

/// One forecast of the frame `delta_t` minutes after `src`.
#[allow(clippy::too_many_arguments)]
pub fn forecast(
    cfg: &Config,
    arm: Arm,
    model: &VelocityModel,
    src: &Sample,
    delta_t: f32,
    stage: Stage,
    sampling: Sampling,
    seed: u64,
) -> Result<Prediction> {
    let threshold = cfg.eval.threshold;
    Ok(match arm {
        Arm::Flow => {
            let spec = IntegrationSpec {
                method: sampling.method,
                steps: sampling.steps,
                threshold,
            };
            if cfg.eval.tile_edge == 0 {
                predict_future(model, src, delta_t, stage, &spec)?
            } else {
                tile_predict(model, src, delta_t, stage, &spec, cfg.eval.tile_edge, cfg.eval.tile_overlap)?
            }
        }
        Arm::Diffusion => edm_sample(
            model,
            src,
            Conditioning::new(delta_t, stage),
            sampling.steps,
            &cfg.diffusion,
            seed,
            threshold,
        )?,
    })
}

pub fn arm_name(arm: Arm, sampling: Sampling) -> String {
    match arm {
        Arm::Flow => format!("flow-{}-{}", sampling.method, sampling.steps),
        Arm::Diffusion => format!("diffusion-{}", sampling.steps),
    }
}

/// Where a forecast came from, written next to its volumes.
struct Provenance<'a> {
    cfg: &'a Config,
    arm: Arm,
    checkpoint: PathBuf,
    sampling: Sampling,
    case: &'a str,
    source_time: f32,
    stage: Stage,
    seed: u64,
}

impl Provenance<'_> {
    fn record(&self, delta_t: f32) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "config_digest": self.cfg.digest(),
            "arm": self.arm,
            "checkpoint": self.checkpoint.file_name().map(|n| n.to_string_lossy().into_owned()),
            "checkpoint_sha256": file_sha256(&self.checkpoint)?,
            "method": self.sampling.method,
            "steps": self.sampling.steps,
            "threshold": self.cfg.eval.threshold,
            "case": self.case,
            "source_time_min": self.source_time,
            "delta_t_min": delta_t,
            "stage": self.stage,
            "sample_seed": self.seed,
        }))
    }
}

fn write_prediction(dir: &Path, p: &Prediction, provenance: &serde_json::Value) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    write_json(&dir.join("provenance.json"), provenance)?;
    let mut out = Vec::new();
    for (name, v) in [("ct", &p.ct), ("mask_prob", &p.mask_prob), ("mask_bin", &p.mask_bin)] {
        let path = dir.join(format!("{name}.vvol"));
        vvol::write(&path, v)?;
        out.push(path);
    }
    Ok(out)
}

fn find_case<'m>(manifest: &'m Manifest, case: &str) -> Result<&'m CaseEntry> {
    manifest
        .case(case)
        .ok_or_else(|| usage(format!("no case {case:?} in the dataset")))
}

fn sample_seed(cfg: &Config, entry: &CaseEntry) -> u64 {
    cfg.eval.sample_seed.wrapping_add(entry.seed)
}

#[allow(clippy::too_many_arguments)]
pub fn predict_cmd(
    cfg: &Config,
    arm: Arm,
    checkpoint: Option<&Path>,
    case: &str,
    source_time: f32,
    delta_t: f32,
    stage: Option<Stage>,
    sampling: Sampling,
) -> Result<Vec<PathBuf>> {
    let manifest = load_manifest(cfg)?;
    let entry = find_case(&manifest, case)?;
    let timeline = load_case(&cfg.dataset.dir, entry)?;
    let src = frame_at(&timeline, source_time)?;
    let model = load_model(cfg, arm, checkpoint)?;
    let stage = stage.unwrap_or(entry.stage);
    let prov = Provenance {
        cfg,
        arm,
        checkpoint: checkpoint_for(cfg, arm, checkpoint),
        sampling,
        case,
        source_time,
        stage,
        seed: sample_seed(cfg, entry),
    };
    let pred = forecast(cfg, arm, &model, src, delta_t, stage, sampling, prov.seed)?;
    let dir = cfg
        .run_dir
        .join("predictions")
        .join(case)
        .join(format!("{}_t{source_time}_dt{delta_t}", arm_name(arm, sampling)));
    write_prediction(&dir, &pred, &prov.record(delta_t)?)
}

/// Direct forecasts from one source frame at several horizons, plus a CSV of
/// the predicted iceball volume per horizon.
#[allow(clippy::too_many_arguments)]
pub fn rollout_cmd(
    cfg: &Config,
    arm: Arm,
    checkpoint: Option<&Path>,
    case: &str,
    source_time: f32,
    horizons: &[f32],
    stage: Option<Stage>,
    sampling: Sampling,
) -> Result<Vec<(f32, f64, PathBuf)>> {
    if horizons.is_empty() {
        return Err(usage("rollout needs at least one horizon"));
    }
    let manifest = load_manifest(cfg)?;
    let entry = find_case(&manifest, case)?;
    let timeline = load_case(&cfg.dataset.dir, entry)?;
    let src = frame_at(&timeline, source_time)?;
    let model = load_model(cfg, arm, checkpoint)?;
    let stage = stage.unwrap_or(entry.stage);
    let prov = Provenance {
        cfg,
        arm,
        checkpoint: checkpoint_for(cfg, arm, checkpoint),
        sampling,
        case,
        source_time,
        stage,
        seed: sample_seed(cfg, entry),
    };
    let root = cfg.run_dir.join("rollout").join(case);
    let out = horizons
        .iter()
        .map(|&h| {
            let pred = forecast(cfg, arm, &model, src, h, stage, sampling, prov.seed)?;
            let ml = pred.mask_bin.data().iter().filter(|&&v| v == 1.0).count() as f64 * pred.mask_bin.voxel_volume_mm3() / 1000.0;
            let dir = root.join(format!("{}_t{source_time}_dt{h}", arm_name(arm, sampling)));
            write_prediction(&dir, &pred, &prov.record(h)?)?;
            eprintln!("Δt = {h:+} min: iceball {ml:.2} mL -> {}", dir.display());
            Ok((h, ml, dir))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("delta_t_min,mask_volume_ml\n");
    for (h, ml, _) in &out {
        csv.push_str(&format!("{h},{ml}\n"));
    }
    let csv_path = root.join(format!("{}_t{source_time}_volumes.csv", arm_name(arm, sampling)));
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    Ok(out)
}

/// Scores `arm` at each step count, plus the copy-the-source baseline, on
/// every test case. Rows come back sorted by arm, then case.
pub fn evaluate(
    cfg: &Config,
    arm: Arm,
    checkpoint: Option<&Path>,
    method: Method,
    steps: &[usize],
) -> Result<Vec<MetricsRecord>> {
    let manifest = load_manifest(cfg)?;
    let cases = load_split(cfg, &manifest, Split::Test)?;
    let model = load_model(cfg, arm, checkpoint)?;
    let (t0, dt) = (cfg.eval.source_time, cfg.eval.delta_t);
    let per_case: Vec<Vec<MetricsRecord>> = cases
        .par_iter()
        .map(|(entry, timeline)| -> Result<Vec<MetricsRecord>> {
            let src = frame_at(timeline, t0)?;
            let gt = frame_at(timeline, t0 + dt)?;
            let identity = Prediction {
                ct: src.ct.clone(),
                mask_prob: src.mask.clone(),
                mask_bin: src.mask.clone(),
            };
            let mut rows = vec![evaluate_case(&entry.case_id, "identity", dt, &identity, gt)?];
            for &n in steps {
                let sampling = Sampling { method, steps: n };
                let pred = forecast(cfg, arm, &model, src, dt, entry.stage, sampling, sample_seed(cfg, entry))?;
                rows.push(evaluate_case(&entry.case_id, &arm_name(arm, sampling), dt, &pred, gt)?);
            }
            eprintln!("evaluated {}", entry.case_id);
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<MetricsRecord> = per_case.into_iter().flatten().collect();
    rows.sort_by(|a, b| a.arm.cmp(&b.arm).then_with(|| a.case_id.cmp(&b.case_id)));
    Ok(rows)
}

/// Scores `arm`, or every arm listed in the config when `arm` is `None`.
/// Listed arms without a checkpoint are skipped with a warning. Writes the
/// per-case CSV plus a provenance record beside it and returns the table.
pub fn eval_cmd(
    cfg: &Config,
    arm: Option<Arm>,
    checkpoint: Option<&Path>,
    method: Method,
    steps: &[usize],
    csv: Option<&Path>,
) -> Result<(PathBuf, String)> {
    let arms = match arm {
        Some(a) => vec![a],
        None if checkpoint.is_some() => return Err(usage("--checkpoint needs --model")),
        None => cfg.eval.arms.clone(),
    };
    let mut rows: Vec<MetricsRecord> = Vec::new();
    let mut scored = Vec::new();
    for a in arms {
        let path = checkpoint_for(cfg, a, checkpoint);
        if arm.is_none() && !path.exists() {
            eprintln!("warning: no {a} checkpoint at {}; omitting {a}", path.display());
            continue;
        }
        let first = scored.is_empty();
        rows.extend(
            evaluate(cfg, a, checkpoint, method, steps)?
                .into_iter()
                .filter(|r| first || r.arm != "identity"),
        );
        scored.push(serde_json::json!({ "arm": a, "checkpoint_sha256": file_sha256(&path)? }));
    }
    if scored.is_empty() {
        return Err(usage("no checkpoints to evaluate; run `cryoflow train` first"));
    }
    rows.sort_by(|a, b| a.arm.cmp(&b.arm).then_with(|| a.case_id.cmp(&b.case_id)));

    let default_name = match arm {
        Some(a) => format!("metrics_{a}.csv"),
        None => "metrics.csv".to_string(),
    };
    let path = csv.map(Path::to_path_buf).unwrap_or_else(|| cfg.run_dir.join(default_name));
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(&rows, file)?;
    let record = serde_json::json!({
        "config_digest": cfg.digest(),
        "models": scored,
        "method": method,
        "steps": steps,
        "source_time_min": cfg.eval.source_time,
        "delta_t_min": cfg.eval.delta_t,
        "threshold": cfg.eval.threshold,
    });
    write_json(&path.with_extension("json"), &record)?;
    Ok((path, render_table(&rows)?))
}

pub fn report_cmd(csvs: &[PathBuf]) -> Result<String> {
    if csvs.is_empty() {
        return Err(usage("report needs at least one --csv file"));
    }
    let mut rows = Vec::new();
    for path in csvs {
        let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        rows.extend(read_csv(file).map_err(|e| anyhow!(cryoflow::Error::format(path, e.to_string())))?);
    }
    Ok(render_table(&rows)?)
}
