//! Conditional denoising diffusion over the target state, the comparison arm.
//!
//! The network predicts the clean target `x₀` directly from
//! `[noisy CT, noisy mask, src CT, src mask, Δt, stage]` with `ln σ / 4` in
//! the scalar embedding slot. Sampling runs the deterministic Karras grid
//! with a Heun correction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::flow::{with_condition_channels, Conditioning};
use crate::model::{Example, VelocityModel};
use crate::sampler::Prediction;
use crate::volume::Sample;

/// Input channel count of the diffusion network.
pub const DIFFUSION_IN_CHANNELS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub sigma_data: f64,
    pub train_sigma_min: f64,
    pub train_sigma_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            sigma_data: 0.5,
            train_sigma_min: 0.02,
            train_sigma_max: 10.0,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0) {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.train_sigma_min > 0.0 && self.train_sigma_min < self.train_sigma_max) {
            return Err(Error::Config("need 0 < train_sigma_min < train_sigma_max".into()));
        }
        Ok(())
    }
}

/// Karras ρ-spaced noise levels from `σ_max` down to `σ_min`, then 0.
pub fn sigma_grid(s: &NoiseSchedule, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be >= 1".into()));
    }
    s.validate()?;
    let mut grid = Vec::with_capacity(steps + 1);
    if steps == 1 {
        grid.push(s.sigma_max);
    } else {
        let hi = s.sigma_max.powf(1.0 / s.rho);
        let lo = s.sigma_min.powf(1.0 / s.rho);
        for i in 0..steps {
            let sigma = if i == 0 {
                s.sigma_max
            } else if i == steps - 1 {
                s.sigma_min
            } else {
                (hi + (i as f64 / (steps - 1) as f64) * (lo - hi)).powf(s.rho)
            };
            grid.push(sigma);
        }
    }
    grid.push(0.0);
    Ok(grid)
}

/// Scalar fed to the embedding in place of τ.
pub fn sigma_embedding(sigma: f64) -> f32 {
    (sigma.ln() / 4.0) as f32
}

/// Something that estimates the clean target from a 6-channel input.
pub trait Denoiser {
    fn denoise(&self, input: &Field, sigma: f64) -> Result<Field>;
}

impl<F> Denoiser for F
where
    F: Fn(&Field, f64) -> Result<Field>,
{
    fn denoise(&self, input: &Field, sigma: f64) -> Result<Field> {
        self(input, sigma)
    }
}

impl Denoiser for VelocityModel {
    fn denoise(&self, input: &Field, sigma: f64) -> Result<Field> {
        self.forward(input, sigma_embedding(sigma))
    }
}

/// `[noisy (2), src (2), Δt, stage]`.
pub fn diffusion_input(noisy: &Field, src: &Field, cond: Conditioning) -> Result<Field> {
    if noisy.channels() != 2 || src.channels() != 2 {
        return Err(Error::Shape("noisy and source states need 2 channels".into()));
    }
    noisy.check_same_shape(src)?;
    let both = Field::stack(noisy.dims(), &[noisy.channel(0), noisy.channel(1), src.channel(0), src.channel(1)])?;
    Ok(with_condition_channels(&both, cond))
}

fn gaussian_like(f: &Field, scale: f64, rng: &mut impl Rng) -> Vec<f32> {
    (0..f.data().len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * scale) as f32
        })
        .collect()
}

/// Draws `σ` log-uniformly in the training range and builds the supervised
/// example `(noisy input, ln σ / 4) → tgt`.
pub fn diffusion_example(
    src: &Field,
    tgt: &Field,
    cond: Conditioning,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<(Example, f64)> {
    src.check_same_shape(tgt)?;
    let (lo, hi) = (schedule.train_sigma_min.ln(), schedule.train_sigma_max.ln());
    let sigma = rng.random_range(lo..=hi).exp();
    let noise = gaussian_like(tgt, sigma, rng);
    let noisy_data: Vec<f32> = tgt.data().iter().zip(&noise).map(|(&t, &n)| t + n).collect();
    let noisy = Field::from_vec(2, tgt.dims(), noisy_data)?;
    let input = diffusion_input(&noisy, src, cond)?;
    Ok((
        Example {
            input,
            cond: sigma_embedding(sigma),
            target: tgt.clone(),
        },
        sigma,
    ))
}

/// MSE between the denoiser's `x₀` estimate and `tgt` at a random `σ`.
pub fn diffusion_loss(
    model: &impl Denoiser,
    src: &Field,
    tgt: &Field,
    cond: Conditioning,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    let (ex, sigma) = diffusion_example(src, tgt, cond, schedule, rng)?;
    let x0 = model.denoise(&ex.input, sigma)?;
    crate::flow::flow_matching_loss(&x0, tgt)
}

/// Deterministic EDM sampling of the 2-channel target state given `src`.
/// Returns the raw final state.
pub fn edm_sample_state(
    model: &impl Denoiser,
    src: &Field,
    cond: Conditioning,
    steps: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Field> {
    let grid = sigma_grid(schedule, steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = gaussian_like(src, grid[0], &mut rng);
    let mut x = Field::from_vec(2, src.dims(), noise)?;
    let denoise = |x: &Field, sigma: f64| -> Result<Field> {
        let out = model.denoise(&diffusion_input(x, src, cond)?, sigma)?;
        if out.channels() != 2 || out.dims() != x.dims() {
            return Err(Error::Shape("denoiser must return 2 channels at the input size".into()));
        }
        Ok(out)
    };
    for i in 0..steps {
        let (s, s_next) = (grid[i], grid[i + 1]);
        let x0 = denoise(&x, s)?;
        let d: Vec<f64> = x.data().iter().zip(x0.data()).map(|(&a, &b)| (a as f64 - b as f64) / s).collect();
        let euler: Vec<f32> = x.data().iter().zip(&d).map(|(&a, &di)| (a as f64 + (s_next - s) * di) as f32).collect();
        let next = if s_next > 0.0 {
            let xe = Field::from_vec(2, x.dims(), euler)?;
            let x0e = denoise(&xe, s_next)?;
            x.data()
                .iter()
                .zip(&d)
                .zip(xe.data().iter().zip(x0e.data()))
                .map(|((&a, &di), (&e, &b))| {
                    let de = (e as f64 - b as f64) / s_next;
                    (a as f64 + (s_next - s) * 0.5 * (di + de)) as f32
                })
                .collect()
        } else {
            euler
        };
        x = Field::from_vec(2, x.dims(), next)?;
        if !x.is_finite() {
            return Err(Error::Diverged { step: i });
        }
    }
    Ok(x)
}

/// [`edm_sample_state`] followed by clamping and thresholding.
pub fn edm_sample(
    model: &impl Denoiser,
    src: &Sample,
    cond: Conditioning,
    steps: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    threshold: f32,
) -> Result<Prediction> {
    let state = edm_sample_state(model, &src.to_field(), cond, steps, schedule, seed)?;
    Prediction::from_state(&state, src.spacing(), threshold)
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;
    use crate::volume::Stage;

    fn pair() -> (Field, Field) {
        let dims = [4, 4, 4];
        let src = Field::from_vec(2, dims, (0..128).map(|i| ((i * 5 % 17) as f32) / 17.0).collect()).unwrap();
        let tgt = Field::from_vec(2, dims, (0..128).map(|i| ((i * 3 % 11) as f32) / 11.0).collect()).unwrap();
        (src, tgt)
    }

    fn cond() -> Conditioning {
        Conditioning::new(7.0, Stage::Second)
    }

    #[test]
    fn grid_endpoints_and_order() {
        let s = NoiseSchedule::default();
        for steps in [2, 5, 10, 50, 100] {
            let g = sigma_grid(&s, steps).unwrap();
            assert_eq!(g.len(), steps + 1);
            assert_eq!(g[0], 80.0);
            assert_eq!(g[steps - 1], 0.002);
            assert_eq!(g[steps], 0.0);
            assert!(g.windows(2).all(|w| w[0] > w[1]));
        }
        assert_eq!(sigma_grid(&s, 1).unwrap(), vec![80.0, 0.0]);
        assert!(sigma_grid(&s, 0).is_err());
    }

    #[test]
    fn ten_step_grid_golden() {
        // (80^(1/7) + i/9 (0.002^(1/7) − 80^(1/7)))^7 in 40-digit arithmetic.
        let golden = [
            80.0,
            42.41518931851268,
            21.10867673619375,
            9.723201355260127,
            4.066123602953758,
            1.5017419790680078,
            0.4699790579977468,
            0.11663856352517846,
            0.020435334553438714,
            0.002,
            0.0,
        ];
        let g = sigma_grid(&NoiseSchedule::default(), 10).unwrap();
        for (a, b) in g.iter().zip(golden) {
            assert!((a - b).abs() <= 1e-12 * b.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn loss_zero_cases_and_determinism() {
        let (src, tgt) = pair();
        let s = NoiseSchedule::default();
        let oracle = |_x: &Field, _s: f64| Ok(tgt.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(diffusion_loss(&oracle, &src, &tgt, cond(), &s, &mut rng).unwrap(), 0.0);
        let zero = |x: &Field, _s: f64| Ok(Field::zeros(2, x.dims()));
        let z = Field::zeros(2, src.dims());
        assert_eq!(diffusion_loss(&zero, &src, &z, cond(), &s, &mut rng).unwrap(), 0.0);
        let l1 = diffusion_loss(&zero, &src, &tgt, cond(), &s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let l2 = diffusion_loss(&zero, &src, &tgt, cond(), &s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(l1, l2);
        assert!(l1 > 0.0);
    }

    #[test]
    fn example_layout_and_sigma_range() {
        let (src, tgt) = pair();
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (ex, sigma) = diffusion_example(&src, &tgt, cond(), &s, &mut rng).unwrap();
            assert!((0.02..=10.0).contains(&sigma));
            assert_eq!(ex.cond, sigma_embedding(sigma));
            assert_eq!(ex.input.channels(), DIFFUSION_IN_CHANNELS);
            assert_eq!(ex.input.channel(2), src.channel(0));
            assert_eq!(ex.input.channel(3), src.channel(1));
            assert!(ex.input.channel(4).iter().all(|&v| v == 0.7));
            assert!(ex.input.channel(5).iter().all(|&v| v == 1.0));
            assert_eq!(ex.target, tgt);
        }
    }

    #[test]
    fn oracle_sampler_reaches_target() {
        let (src, tgt) = pair();
        let s = NoiseSchedule::default();
        let oracle = |_x: &Field, _s: f64| Ok(tgt.clone());
        for steps in [10, 50, 100] {
            let out = edm_sample_state(&oracle, &src, cond(), steps, &s, 3).unwrap();
            let err = out.data().iter().zip(tgt.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(err < 1e-3, "{steps}: {err}");
        }
    }

    #[test]
    fn single_step_returns_first_estimate() {
        let (src, tgt) = pair();
        let s = NoiseSchedule::default();
        let calls = Cell::new(0);
        let seen_sigma = Cell::new(0.0);
        let model = |x: &Field, sigma: f64| {
            calls.set(calls.get() + 1);
            seen_sigma.set(sigma);
            Ok(Field::from_vec(2, x.dims(), x.data()[..128].iter().map(|v| v * 0.01).collect()).unwrap())
        };
        let out = edm_sample_state(&model, &src, cond(), 1, &s, 5).unwrap();
        assert_eq!(calls.get(), 1);
        assert_eq!(seen_sigma.get(), 80.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = gaussian_like(&tgt, 80.0, &mut rng);
        for (o, n) in out.data().iter().zip(&x0) {
            assert!((o - n * 0.01).abs() <= 1e-6 * n.abs().max(1.0));
        }
    }

    #[test]
    fn same_seed_same_sample() {
        let (src, _) = pair();
        let s = NoiseSchedule::default();
        let model = |x: &Field, sigma: f64| {
            Ok(Field::from_vec(2, x.dims(), x.data()[..128].iter().map(|v| v / (1.0 + sigma as f32)).collect()).unwrap())
        };
        let a = edm_sample_state(&model, &src, cond(), 10, &s, 8).unwrap();
        let b = edm_sample_state(&model, &src, cond(), 10, &s, 8).unwrap();
        let c = edm_sample_state(&model, &src, cond(), 10, &s, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
