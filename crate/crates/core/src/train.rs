//! Patch sampling and the training loop for both model arms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{diffusion_example, NoiseSchedule};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::flow::{assemble_model_input, interpolate, pair_indices, residual, Conditioning, PatchPair};
use crate::model::{train_step, Example, OptimizerState, VelocityModel};
use crate::phantom::CaseTimeline;
use crate::volume::{linear_index, Rotation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Flow,
    Diffusion,
}

impl Arm {
    pub fn in_channels(self) -> usize {
        match self {
            Arm::Flow => 4,
            Arm::Diffusion => crate::diffusion::DIFFUSION_IN_CHANNELS,
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arm::Flow => "flow",
            Arm::Diffusion => "diffusion",
        })
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(Arm::Flow),
            "diffusion" => Ok(Arm::Diffusion),
            other => Err(Error::InvalidArgument(format!("unknown model {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub patch: usize,
    pub base_lr: f64,
    pub lr_half_life_steps: f64,
    /// Probability that a patch is centred on a voxel of the iceball union.
    pub focus_prob: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 8,
            patch: 16,
            base_lr: 2e-3,
            lr_half_life_steps: 2000.0,
            focus_prob: 0.75,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.patch == 0 {
            return Err(Error::Config("batch and patch must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.lr_half_life_steps > 0.0) {
            return Err(Error::Config("learning rate and half-life must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.focus_prob) {
            return Err(Error::Config(format!("focus_prob must lie in [0, 1], got {}", self.focus_prob)));
        }
        Ok(())
    }
}

/// Draws random co-located patch pairs from the frame pairs of each case.
pub struct PatchSampler<'a> {
    cases: &'a [CaseTimeline],
    pairs: Vec<(usize, usize, usize)>,
    unions: Vec<Vec<Vec<usize>>>,
    patch: usize,
    focus_prob: f64,
    rotations: Vec<Rotation>,
}

impl<'a> PatchSampler<'a> {
    pub fn new(cases: &'a [CaseTimeline], patch: usize, focus_prob: f64, augment: bool) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::InvalidArgument("no training cases".into()));
        }
        let mut pairs = Vec::new();
        let mut unions = Vec::new();
        for (c, case) in cases.iter().enumerate() {
            for f in &case.frames {
                if f.dims().iter().any(|&d| d < patch) {
                    return Err(Error::InvalidArgument(format!(
                        "patch {patch} larger than frame {:?} of {}",
                        f.dims(),
                        case.case_id
                    )));
                }
            }
            let n = case.frames.len();
            let mut per_pair = vec![Vec::new(); n * n];
            for (i, j) in pair_indices(n) {
                pairs.push((c, i, j));
                let (a, b) = (&case.frames[i].mask, &case.frames[j].mask);
                per_pair[i * n + j] = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .enumerate()
                    .filter(|(_, (&x, &y))| x >= 0.5 || y >= 0.5)
                    .map(|(k, _)| k)
                    .collect();
            }
            unions.push(per_pair);
        }
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("cases need at least two frames".into()));
        }
        let rotations = if augment { Rotation::augmentation_set() } else { vec![Rotation::IDENTITY] };
        Ok(PatchSampler {
            cases,
            pairs,
            unions,
            patch,
            focus_prob,
            rotations,
        })
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Result<PatchPair> {
        let (c, i, j) = self.pairs[rng.random_range(0..self.pairs.len())];
        let case = &self.cases[c];
        let (src, tgt) = (&case.frames[i], &case.frames[j]);
        let dims = src.dims();
        let p = self.patch;
        let union = &self.unions[c][i * case.frames.len() + j];
        let origin = if !union.is_empty() && rng.random_bool(self.focus_prob) {
            let k = union[rng.random_range(0..union.len())];
            let centre = [k % dims[0], (k / dims[0]) % dims[1], k / (dims[0] * dims[1])];
            debug_assert_eq!(linear_index(dims, centre[0], centre[1], centre[2]), k);
            let mut o = [0; 3];
            for a in 0..3 {
                o[a] = centre[a].saturating_sub(p / 2).min(dims[a] - p);
            }
            o
        } else {
            [0, 1, 2].map(|a| rng.random_range(0..=dims[a] - p))
        };
        let rot = self.rotations[rng.random_range(0..self.rotations.len())];
        let cut = |s: &crate::volume::Sample| -> Result<Field> { s.to_field().window(origin, [p; 3])?.rotated(rot) };
        Ok(PatchPair {
            src: cut(src)?,
            tgt: cut(tgt)?,
            cond: Conditioning::new(tgt.time_min - src.time_min, case.stage),
        })
    }
}

/// Flow example: `τ ~ U[0,1]`, input at `P(τ)`, target the residual.
pub fn flow_example(pair: &PatchPair, rng: &mut impl Rng) -> Result<Example> {
    let tau: f32 = rng.random();
    let state = interpolate(&pair.src, &pair.tgt, tau, pair.cond)?;
    Ok(Example {
        input: assemble_model_input(&state),
        cond: tau,
        target: residual(&pair.src, &pair.tgt)?,
    })
}

/// The batch for optimizer step `step`. Each step has its own RNG stream, so
/// a resumed run sees the same batches as an uninterrupted one.
pub fn make_batch(
    sampler: &PatchSampler<'_>,
    arm: Arm,
    batch: usize,
    seed: u64,
    step: u64,
    schedule: &NoiseSchedule,
) -> Result<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    (0..batch)
        .map(|_| {
            let pair = sampler.draw(&mut rng)?;
            match arm {
                Arm::Flow => flow_example(&pair, &mut rng),
                Arm::Diffusion => Ok(diffusion_example(&pair.src, &pair.tgt, pair.cond, schedule, &mut rng)?.0),
            }
        })
        .collect()
}

/// Runs optimizer steps until `opt.step == cfg.steps`, calling `on_step`
/// with `(step, loss)` after each.
pub fn train(
    model: &mut VelocityModel,
    opt: &mut OptimizerState,
    cases: &[CaseTimeline],
    arm: Arm,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    mut on_step: impl FnMut(u64, f64),
) -> Result<()> {
    cfg.validate()?;
    if model.config().in_channels != arm.in_channels() {
        return Err(Error::Config(format!(
            "{arm} needs {} input channels, model has {}",
            arm.in_channels(),
            model.config().in_channels
        )));
    }
    let sampler = PatchSampler::new(cases, cfg.patch, cfg.focus_prob, cfg.augment)?;
    while opt.step < cfg.steps {
        let step = opt.step;
        let batch = make_batch(&sampler, arm, cfg.batch, cfg.seed, step, schedule)?;
        let loss = train_step(model, opt, &batch)?;
        on_step(step, loss);
    }
    Ok(())
}
