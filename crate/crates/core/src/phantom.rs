//! Synthetic cryoablation cases.
//!
//! A case is a static soft-tissue background with a catheter entering along
//! +x, and an ellipsoidal hypodense iceball centred on the catheter tip whose
//! semi-axes grow as `sqrt(t)`. The semi-axis along y plays the medial edge
//! and is shortened by `medial_factor`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::volume::{linear_index, normalize_window, HuWindow, Sample, Stage, Unit, Volume};
use crate::vvol;

/// Acquisition times of every generated timeline, in minutes.
pub const FRAME_TIMES: [f32; 4] = [0.0, 3.0, 6.0, 10.0];

const TEXTURE_KERNEL_WIDTH: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    pub grid_edge: usize,
    pub spacing_mm: f32,
    pub tissue_hu: f32,
    pub tissue_texture_amp: f32,
    pub noise_sigma_hu: f32,
    pub catheter_hu: f32,
    pub catheter_radius_mm: f32,
    pub iceball_hu_center: f32,
    pub iceball_hu_edge: f32,
    pub a_max: f32,
    pub b_max: f32,
    pub c_max: f32,
    pub medial_factor: f32,
    pub t_max_min: f32,
    pub stage2_gain: f32,
    /// Offset of the iceball centre from the grid centre.
    pub center_offset_mm: [f32; 3],
    /// Per-case uniform jitter of the centre, `±center_jitter_mm` per axis.
    pub center_jitter_mm: f32,
    /// Per-case relative jitter of the maximal semi-axes, `±size_jitter`.
    pub size_jitter: f32,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            grid_edge: 64,
            spacing_mm: 1.0,
            tissue_hu: 40.0,
            tissue_texture_amp: 20.0,
            noise_sigma_hu: 10.0,
            catheter_hu: 800.0,
            catheter_radius_mm: 1.5,
            iceball_hu_center: -30.0,
            iceball_hu_edge: 0.0,
            a_max: 14.0,
            b_max: 12.0,
            c_max: 12.0,
            medial_factor: 0.7,
            t_max_min: 10.0,
            stage2_gain: 1.15,
            center_offset_mm: [0.0; 3],
            center_jitter_mm: 4.0,
            size_jitter: 0.1,
            seed: 0,
        }
    }
}

impl PhantomParams {
    fn gain(&self, stage: Stage) -> f32 {
        match stage {
            Stage::First => 1.0,
            Stage::Second => self.stage2_gain,
        }
    }

    fn extent_mm(&self) -> f32 {
        self.grid_edge as f32 * self.spacing_mm
    }

    fn center_mm(&self) -> [f32; 3] {
        let half = self.extent_mm() / 2.0;
        std::array::from_fn(|a| half + self.center_offset_mm[a])
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grid_edge", self.grid_edge as f32),
            ("spacing_mm", self.spacing_mm),
            ("catheter_radius_mm", self.catheter_radius_mm),
            ("a_max", self.a_max),
            ("b_max", self.b_max),
            ("c_max", self.c_max),
            ("t_max_min", self.t_max_min),
            ("stage2_gain", self.stage2_gain),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.medial_factor > 0.0 && self.medial_factor <= 1.0) {
            return Err(Error::Config(format!(
                "medial_factor must lie in (0, 1], got {}",
                self.medial_factor
            )));
        }
        if !(0.0..1.0).contains(&self.size_jitter) || self.center_jitter_mm < 0.0 {
            return Err(Error::Config("jitter parameters out of range".into()));
        }
        let axes = iceball_semi_axes(self.t_max_min, Stage::Second, self)
            .max(iceball_semi_axes(self.t_max_min, Stage::First, self));
        self.check_contains(axes)
    }

    fn check_contains(&self, axes: [f32; 3]) -> Result<()> {
        let center = self.center_mm();
        let extent = self.extent_mm();
        for a in 0..3 {
            if center[a] - axes[a] < 0.0 || center[a] + axes[a] > extent {
                return Err(Error::Config(format!(
                    "iceball with semi-axes {axes:?} mm leaves the {extent} mm grid on axis {a}"
                )));
            }
        }
        Ok(())
    }

    /// Case-specific parameters: seed, centre and size jitter drawn from `seed`.
    pub fn for_case(&self, seed: u64) -> PhantomParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let mut p = self.clone();
        p.seed = seed;
        for a in 0..3 {
            let u: f32 = rng.random_range(-1.0..=1.0);
            p.center_offset_mm[a] += u * self.center_jitter_mm;
        }
        let scale = 1.0 + self.size_jitter * rng.random_range(-1.0f32..=1.0);
        p.a_max *= scale;
        p.b_max *= scale;
        p.c_max *= scale;
        p.center_jitter_mm = 0.0;
        p.size_jitter = 0.0;
        p
    }
}

trait Max3 {
    fn max(self, other: Self) -> Self;
}

impl Max3 for [f32; 3] {
    fn max(self, other: Self) -> Self {
        std::array::from_fn(|a| self[a].max(other[a]))
    }
}

/// Iceball semi-axes `(a, b, c)` in mm along x, y, z at time `t`.
pub fn iceball_semi_axes(t: f32, stage: Stage, p: &PhantomParams) -> [f32; 3] {
    let t = t.max(0.0).min(p.t_max_min);
    let s = p.gain(stage) * (t / p.t_max_min).sqrt();
    [s * p.a_max, s * p.b_max * p.medial_factor, s * p.c_max]
}

/// Band-limited tissue texture with unit standard deviation.
fn texture(p: &PhantomParams) -> Vec<f32> {
    let n = p.grid_edge;
    let dims = [n; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut field: Vec<f32> = (0..n * n * n)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();

    let half = (TEXTURE_KERNEL_WIDTH / 2) as i64;
    let kernel: Vec<f32> = (-half..=half).map(|k| (half + 1 - k.abs()) as f32).collect();
    let norm: f32 = kernel.iter().sum();
    let mut tmp = vec![0.0f32; field.len()];
    for axis in 0..3 {
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let p0 = [x, y, z];
                    let mut acc = 0.0;
                    for (ki, &w) in kernel.iter().enumerate() {
                        let mut q = p0;
                        q[axis] = (p0[axis] as i64 + ki as i64 - half).clamp(0, n as i64 - 1) as usize;
                        acc += w * field[linear_index(dims, q[0], q[1], q[2])];
                    }
                    tmp[linear_index(dims, x, y, z)] = acc / norm;
                }
            }
        }
        std::mem::swap(&mut field, &mut tmp);
    }
    let mean = field.iter().map(|&v| v as f64).sum::<f64>() / field.len() as f64;
    let var = field.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / field.len() as f64;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    field.iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect()
}

fn frame_noise(p: &PhantomParams, t: f32, stage: Stage, len: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    rng.set_stream(1 + ((t * 1000.0).round() as u64) * 4 + stage.index() as u64);
    (0..len)
        .map(|_| {
            let z: f32 = StandardNormal.sample(&mut rng);
            z * p.noise_sigma_hu
        })
        .collect()
}

fn rasterize_with_texture(p: &PhantomParams, tex: &[f32], t: f32, stage: Stage) -> Result<Sample> {
    let axes = iceball_semi_axes(t, stage, p);
    p.check_contains(axes)?;
    let n = p.grid_edge;
    let dims = [n; 3];
    let noise = frame_noise(p, t, stage, n * n * n);
    let center = p.center_mm();
    let has_ice = axes.iter().all(|&r| r > 0.0);
    let r2 = p.catheter_radius_mm * p.catheter_radius_mm;

    let mut hu = vec![0.0f32; n * n * n];
    let mut mask = vec![0.0f32; n * n * n];
    for z in 0..n {
        let dz = (z as f32 + 0.5) * p.spacing_mm - center[2];
        for y in 0..n {
            let dy = (y as f32 + 0.5) * p.spacing_mm - center[1];
            for x in 0..n {
                let dx = (x as f32 + 0.5) * p.spacing_mm - center[0];
                let i = linear_index(dims, x, y, z);
                let mut v = p.tissue_hu + p.tissue_texture_amp * tex[i] + noise[i];
                if has_ice {
                    let rho2 = (dx / axes[0]).powi(2) + (dy / axes[1]).powi(2) + (dz / axes[2]).powi(2);
                    if rho2 <= 1.0 {
                        mask[i] = 1.0;
                        v = p.iceball_hu_center + (p.iceball_hu_edge - p.iceball_hu_center) * rho2.sqrt();
                    }
                }
                if dx <= 0.0 && dy * dy + dz * dz <= r2 {
                    v = p.catheter_hu;
                }
                hu[i] = v;
            }
        }
    }
    let spacing = [p.spacing_mm; 3];
    let ct = normalize_window(&Volume::new(dims, spacing, Unit::Hu, hu)?, HuWindow::DEFAULT)?;
    let mask = Volume::new(dims, spacing, Unit::Prob, mask)?;
    Sample::new(ct, mask, t, stage)
}

/// Renders the case described by `p` (including its seed) at time `t`.
pub fn rasterize_frame(p: &PhantomParams, t: f32, stage: Stage) -> Result<Sample> {
    p.validate()?;
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("time must be >= 0, got {t}")));
    }
    rasterize_with_texture(p, &texture(p), t, stage)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseTimeline {
    pub case_id: String,
    pub stage: Stage,
    pub frames: Vec<Sample>,
}

pub fn generate_case(seed: u64, p: &PhantomParams, stage: Stage) -> Result<CaseTimeline> {
    let case = p.for_case(seed);
    case.validate()?;
    let tex = texture(&case);
    let frames = FRAME_TIMES
        .iter()
        .map(|&t| rasterize_with_texture(&case, &tex, t, stage))
        .collect::<Result<Vec<_>>>()?;
    Ok(CaseTimeline {
        case_id: format!("seed{seed}"),
        stage,
        frames,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub time_min: f32,
    pub ct: String,
    pub mask: String,
    pub ct_sha256: String,
    pub mask_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub case_id: String,
    pub split: Split,
    pub stage: Stage,
    pub seed: u64,
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub base_seed: u64,
    pub params: PhantomParams,
    pub cases: Vec<CaseEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(move |c| c.split == split)
    }

    pub fn case(&self, case_id: &str) -> Option<&CaseEntry> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Manifest> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Files whose current hash differs from the recorded one.
    pub fn verify(&self, dir: impl AsRef<Path>) -> Vec<PathBuf> {
        let dir = dir.as_ref();
        let mut bad = Vec::new();
        for case in &self.cases {
            for f in &case.frames {
                for (rel, want) in [(&f.ct, &f.ct_sha256), (&f.mask, &f.mask_sha256)] {
                    let path = dir.join(rel);
                    match fs::read(&path) {
                        Ok(bytes) if &sha256_hex(&bytes) == want => {}
                        _ => bad.push(path),
                    }
                }
            }
        }
        bad
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn case_dir_name(index: usize) -> String {
    format!("case_{index:04}")
}

pub fn frame_file_stem(t: f32) -> String {
    format!("frame_{}min", t)
}

/// Case `i` (train cases first, then test cases) uses seed `base_seed + i`
/// and stage `1 + i % 2`.
pub fn case_plan(n_train: usize, n_test: usize, base_seed: u64) -> Vec<(usize, Split, Stage, u64)> {
    (0..n_train + n_test)
        .map(|i| {
            let split = if i < n_train { Split::Train } else { Split::Test };
            let stage = if i % 2 == 0 { Stage::First } else { Stage::Second };
            (i, split, stage, base_seed.wrapping_add(i as u64))
        })
        .collect()
}

/// Writes every case to `out_dir` and returns the manifest (also written).
pub fn generate_dataset(
    n_train: usize,
    n_test: usize,
    base_seed: u64,
    p: &PhantomParams,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidArgument(
            "both splits need at least one case".into(),
        ));
    }
    p.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let cases = case_plan(n_train, n_test, base_seed)
        .into_par_iter()
        .map(|(i, split, stage, seed)| -> Result<CaseEntry> {
            let timeline = generate_case(seed, p, stage)?;
            let case_id = case_dir_name(i);
            let case_dir = out_dir.join(&case_id);
            fs::create_dir_all(&case_dir).map_err(|e| Error::io(&case_dir, e))?;
            let mut frames = Vec::new();
            for s in &timeline.frames {
                let stem = frame_file_stem(s.time_min);
                let ct_rel = format!("{case_id}/{stem}.ct.vvol");
                let mask_rel = format!("{case_id}/{stem}.mask.vvol");
                let ct_bytes = vvol::encode(&s.ct);
                let mask_bytes = vvol::encode(&s.mask);
                for (rel, bytes) in [(&ct_rel, &ct_bytes), (&mask_rel, &mask_bytes)] {
                    let path = out_dir.join(rel);
                    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
                }
                frames.push(FrameEntry {
                    time_min: s.time_min,
                    ct: ct_rel,
                    mask: mask_rel,
                    ct_sha256: sha256_hex(&ct_bytes),
                    mask_sha256: sha256_hex(&mask_bytes),
                });
            }
            Ok(CaseEntry {
                case_id,
                split,
                stage,
                seed,
                frames,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest {
        version: 1,
        base_seed,
        params: p.clone(),
        cases,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads a case's frames from disk.
pub fn load_case(dir: impl AsRef<Path>, entry: &CaseEntry) -> Result<CaseTimeline> {
    let dir = dir.as_ref();
    let frames = entry
        .frames
        .iter()
        .map(|f| {
            let ct = vvol::read(dir.join(&f.ct))?;
            let mask = vvol::read(dir.join(&f.mask))?;
            Sample::new(ct, mask, f.time_min, entry.stage)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CaseTimeline {
        case_id: entry.case_id.clone(),
        stage: entry.stage,
        frames,
    })
}
