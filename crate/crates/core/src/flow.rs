//! Linear-path flow matching between paired 2-channel states.
//!
//! For a pair `(src, tgt)` the path is `I(τ) = src + τ·(tgt − src)`, whose
//! velocity is the constant residual `tgt − src`. A velocity model is
//! regressed onto that residual with a mean-squared error.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::phantom::CaseTimeline;
use crate::volume::{Sample, Stage};

/// Minutes mapped to a conditioning value of 1.
pub const DELTA_T_SCALE_MIN: f32 = 10.0;

/// Clinical conditioning: time offset to the target and freeze cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub delta_t_min: f32,
    pub stage: Stage,
}

impl Conditioning {
    pub fn new(delta_t_min: f32, stage: Stage) -> Self {
        Conditioning { delta_t_min, stage }
    }

    pub fn delta_t_norm(&self) -> f32 {
        self.delta_t_min / DELTA_T_SCALE_MIN
    }

    pub fn stage_flag(&self) -> f32 {
        self.stage.flag()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub src: Sample,
    pub tgt: Sample,
    pub delta_t_min: f32,
    pub stage: Stage,
}

impl TrainingPair {
    pub fn conditioning(&self) -> Conditioning {
        Conditioning::new(self.delta_t_min, self.stage)
    }
}

/// A point on the interpolation path.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub tau: f32,
    pub state: Field,
    pub cond: Conditioning,
}

fn check_two_channel(a: &Field) -> Result<()> {
    if a.channels() != 2 {
        return Err(Error::Shape(format!(
            "flow states have 2 channels, got {}",
            a.channels()
        )));
    }
    Ok(())
}

pub fn residual(src: &Field, tgt: &Field) -> Result<Field> {
    check_two_channel(src)?;
    tgt.sub(src)
}

pub fn interpolate(src: &Field, tgt: &Field, tau: f32, cond: Conditioning) -> Result<FlowState> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau must lie in [0, 1], got {tau}")));
    }
    check_two_channel(src)?;
    src.check_same_shape(tgt)?;
    // Endpoints are returned verbatim so that I(0) and I(1) are exact.
    let state = if tau == 0.0 {
        src.clone()
    } else if tau == 1.0 {
        tgt.clone()
    } else {
        let data = src
            .data()
            .iter()
            .zip(tgt.data())
            .map(|(&s, &t)| s + tau * (t - s))
            .collect();
        Field::from_vec(2, src.dims(), data)?
    };
    Ok(FlowState { tau, state, cond })
}

/// Mean over voxels and channels of the squared difference.
pub fn flow_matching_loss(predicted_velocity: &Field, residual: &Field) -> Result<f64> {
    predicted_velocity.check_same_shape(residual)?;
    let terms: Vec<f64> = predicted_velocity
        .data()
        .iter()
        .zip(residual.data())
        .map(|(&p, &r)| {
            let d = p as f64 - r as f64;
            d * d
        })
        .collect();
    Ok(crate::metrics::ordered_sum(terms) / predicted_velocity.data().len() as f64)
}

/// A patch pair ready for the loss: source and target states plus conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub src: Field,
    pub tgt: Field,
    pub cond: Conditioning,
}

/// Anything that maps a model input at flow time τ to a velocity field.
pub trait VelocityField {
    /// `input` is the assembled multi-channel model input; the result has two
    /// channels.
    fn velocity(&self, input: &Field, tau: f32) -> Result<Field>;
}

impl<F> VelocityField for F
where
    F: Fn(&Field, f32) -> Result<Field>,
{
    fn velocity(&self, input: &Field, tau: f32) -> Result<Field> {
        self(input, tau)
    }
}

/// `(1/N) Σ_i mse(model(P_i(τ_i), τ_i), r_i)`.
pub fn patch_batch_loss(
    model: &impl VelocityField,
    pairs: &[PatchPair],
    taus: &[f32],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if pairs.len() != taus.len() {
        return Err(Error::InvalidArgument(format!(
            "{} pairs but {} taus",
            pairs.len(),
            taus.len()
        )));
    }
    let mut total = 0.0;
    for (pair, &tau) in pairs.iter().zip(taus) {
        let state = interpolate(&pair.src, &pair.tgt, tau, pair.cond)?;
        let input = assemble_model_input(&state);
        let v = model.velocity(&input, tau)?;
        total += flow_matching_loss(&v, &residual(&pair.src, &pair.tgt)?)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Every ordered pair of distinct frames, shuffled.
pub fn sample_pairs(timeline: &CaseTimeline, rng: &mut impl Rng) -> Result<Vec<TrainingPair>> {
    let frames = &timeline.frames;
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "case {} has {} frame(s); pairing needs at least 2",
            timeline.case_id,
            frames.len()
        )));
    }
    let mut pairs = Vec::with_capacity(frames.len() * (frames.len() - 1));
    for (i, src) in frames.iter().enumerate() {
        for (j, tgt) in frames.iter().enumerate() {
            if i == j {
                continue;
            }
            pairs.push(TrainingPair {
                src: src.clone(),
                tgt: tgt.clone(),
                delta_t_min: tgt.time_min - src.time_min,
                stage: timeline.stage,
            });
        }
    }
    pairs.shuffle(rng);
    Ok(pairs)
}

/// Ordered `(i, j)` frame index pairs, `i != j`.
pub fn pair_indices(n_frames: usize) -> Vec<(usize, usize)> {
    (0..n_frames)
        .flat_map(|i| (0..n_frames).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

/// Channels `[CT(τ), mask(τ), Δt/10, stage flag]`.
pub fn assemble_model_input(state: &FlowState) -> Field {
    with_condition_channels(&state.state, state.cond)
}

/// Appends the two constant conditioning channels to `base`.
pub fn with_condition_channels(base: &Field, cond: Conditioning) -> Field {
    let n = base.voxels();
    let mut data = Vec::with_capacity(base.data().len() + 2 * n);
    data.extend_from_slice(base.data());
    data.extend(std::iter::repeat_n(cond.delta_t_norm(), n));
    data.extend(std::iter::repeat_n(cond.stage_flag(), n));
    Field::from_vec(base.channels() + 2, base.dims(), data).expect("shape derived from base")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_case, PhantomParams};
    use crate::volume::Rotation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant(dims: [usize; 3], ct: f32, mask: f32) -> Field {
        let n = dims.iter().product::<usize>();
        let mut d = vec![ct; n];
        d.extend(vec![mask; n]);
        Field::from_vec(2, dims, d).unwrap()
    }

    fn cond() -> Conditioning {
        Conditioning::new(4.0, Stage::First)
    }

    #[test]
    fn residual_examples() {
        let a = constant([2, 2, 2], 0.2, 0.0);
        assert!(residual(&a, &a).unwrap().data().iter().all(|&x| x == 0.0));
        let r = residual(&a, &constant([2, 2, 2], 0.5, 1.0)).unwrap();
        assert!(r.channel(0).iter().all(|&x| (x - 0.3).abs() < 1e-7));
        assert!(r.channel(1).iter().all(|&x| x == 1.0));
        assert!(residual(&a, &constant([2, 2, 1], 0.5, 1.0)).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let src = constant([3, 3, 3], 0.2, 0.0);
        let tgt = constant([3, 3, 3], 0.6, 1.0);
        assert_eq!(interpolate(&src, &tgt, 0.0, cond()).unwrap().state, src);
        assert_eq!(interpolate(&src, &tgt, 1.0, cond()).unwrap().state, tgt);
        let mid = interpolate(&src, &tgt, 0.5, cond()).unwrap().state;
        assert!((mid.channel(0)[0] - 0.4).abs() < 1e-7);
        assert_eq!(mid.channel(1)[0], 0.5);
        assert!(interpolate(&src, &tgt, 1.5, cond()).is_err());
        assert!(interpolate(&src, &tgt, -0.1, cond()).is_err());
    }

    #[test]
    fn loss_examples() {
        let r = constant([2, 2, 2], 0.3, -0.5);
        assert_eq!(flow_matching_loss(&r, &r).unwrap(), 0.0);
        let off = r.map(|x| x + 0.1);
        assert!((flow_matching_loss(&off, &r).unwrap() - 0.01).abs() < 1e-8);
        let zero = Field::zeros(2, [2, 2, 2]);
        let expect = (0.09 + 0.25) / 2.0;
        assert!((flow_matching_loss(&zero, &r).unwrap() - expect).abs() < 1e-7);
    }

    #[test]
    fn batch_loss_is_mean_of_patch_losses() {
        let pairs = vec![
            PatchPair {
                src: constant([2, 2, 2], 0.0, 0.0),
                tgt: constant([2, 2, 2], 0.0, 0.0),
                cond: cond(),
            };
            2
        ];
        // Model with a per-call constant error: sqrt(0.02) then sqrt(0.04).
        let calls = std::cell::Cell::new(0);
        let model = |input: &Field, _tau: f32| -> Result<Field> {
            let k = calls.get();
            calls.set(k + 1);
            let e = if k == 0 { 0.02f32.sqrt() } else { 0.04f32.sqrt() };
            Ok(Field::zeros(2, input.dims()).map(|_| e))
        };
        let loss = patch_batch_loss(&model, &pairs, &[0.1, 0.9]).unwrap();
        assert!((loss - 0.03).abs() < 1e-7);
        assert!(patch_batch_loss(&model, &[], &[]).is_err());
        assert!(patch_batch_loss(&model, &pairs, &[0.5]).is_err());
    }

    #[test]
    fn single_pair_batch_reduces_to_flow_loss() {
        let src = constant([2, 2, 2], 0.1, 0.0);
        let tgt = constant([2, 2, 2], 0.4, 1.0);
        let model = |input: &Field, _tau: f32| -> Result<Field> {
            Ok(Field::zeros(2, input.dims()).map(|_| 0.25))
        };
        let pair = PatchPair { src: src.clone(), tgt: tgt.clone(), cond: cond() };
        let direct = flow_matching_loss(
            &Field::zeros(2, [2, 2, 2]).map(|_| 0.25),
            &residual(&src, &tgt).unwrap(),
        )
        .unwrap();
        assert_eq!(patch_batch_loss(&model, &[pair], &[0.3]).unwrap(), direct);
    }

    #[test]
    fn pairing_covers_both_signs() {
        let p = PhantomParams {
            grid_edge: 40,
            a_max: 8.0,
            b_max: 8.0,
            c_max: 8.0,
            ..PhantomParams::default()
        };
        let case = generate_case(1, &p, Stage::Second).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs = sample_pairs(&case, &mut rng).unwrap();
        assert_eq!(pairs.len(), 12);
        let mut dts: Vec<i32> = pairs.iter().map(|p| p.delta_t_min as i32).collect();
        dts.sort();
        assert!(dts.contains(&3) && dts.contains(&-3) && dts.contains(&4) && dts.contains(&7));
        let mut neg: Vec<i32> = dts.iter().map(|d| -d).collect();
        neg.sort();
        assert_eq!(neg, dts);
        assert!(pairs.iter().all(|p| p.stage == Stage::Second));

        let two = CaseTimeline {
            case_id: "c".into(),
            stage: Stage::First,
            frames: case.frames[1..3].to_vec(),
        };
        let mut d: Vec<f32> = sample_pairs(&two, &mut rng).unwrap().iter().map(|p| p.delta_t_min).collect();
        d.sort_by(f32::total_cmp);
        assert_eq!(d, vec![-3.0, 3.0]);

        let one = CaseTimeline { frames: case.frames[..1].to_vec(), ..two };
        assert!(sample_pairs(&one, &mut rng).is_err());
        assert_eq!(pair_indices(4).len(), 12);
    }

    #[test]
    fn model_input_channels() {
        let s = interpolate(
            &constant([2, 2, 2], 0.2, 0.0),
            &constant([2, 2, 2], 0.4, 1.0),
            0.5,
            Conditioning::new(4.0, Stage::First),
        )
        .unwrap();
        let input = assemble_model_input(&s);
        assert_eq!(input.channels(), 4);
        assert!(input.channel(2).iter().all(|&x| (x - 0.4).abs() < 1e-7));
        assert!(input.channel(3).iter().all(|&x| x == 0.0));
        let s2 = FlowState { cond: Conditioning::new(-10.0, Stage::Second), ..s };
        let input = assemble_model_input(&s2);
        assert!(input.channel(2).iter().all(|&x| x == -1.0));
        assert!(input.channel(3).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn loss_invariant_under_rotation() {
        let dims = [4, 4, 4];
        let a = Field::from_vec(2, dims, (0..128).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let b = Field::from_vec(2, dims, (0..128).map(|i| (i as f32 * 0.11).cos()).collect()).unwrap();
        let base = flow_matching_loss(&a, &b).unwrap();
        for rot in Rotation::augmentation_set() {
            let l = flow_matching_loss(&a.rotated(rot).unwrap(), &b.rotated(rot).unwrap()).unwrap();
            assert_eq!(l.to_bits(), base.to_bits());
        }
    }
}
