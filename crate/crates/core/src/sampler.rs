//! Fixed-step ODE integration of a velocity field over τ ∈ [0, 1], plus
//! whole-volume inference by blended tiles.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::flow::{with_condition_channels, Conditioning, VelocityField};
use crate::volume::{Sample, Stage, Unit, Volume};

pub const MASK_THRESHOLD: f32 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Heun,
}

impl Method {
    /// Velocity evaluations per step.
    pub fn evals_per_step(self) -> usize {
        match self {
            Method::Euler => 1,
            Method::Heun => 2,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Heun => "heun",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "heun" => Ok(Method::Heun),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrationSpec {
    pub method: Method,
    pub steps: usize,
    pub threshold: f32,
}

impl IntegrationSpec {
    pub fn new(method: Method, steps: usize) -> Result<Self> {
        let spec = IntegrationSpec {
            method,
            steps,
            threshold: MASK_THRESHOLD,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

impl Default for IntegrationSpec {
    fn default() -> Self {
        IntegrationSpec {
            method: Method::Heun,
            steps: 50,
            threshold: MASK_THRESHOLD,
        }
    }
}

fn check_finite(x: &Field, step: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step })
    }
}

fn axpy(x: &Field, h: f32, v: &Field) -> Result<Field> {
    if v.channels() != x.channels() || v.dims() != x.dims() {
        return Err(Error::Shape(format!(
            "velocity has {} channels at {:?}, state has {} at {:?}",
            v.channels(),
            v.dims(),
            x.channels(),
            x.dims()
        )));
    }
    x.add_scaled(v, h)
}

/// Integrates `dx/dτ = v(x, τ)` from τ = 0 to 1 on a uniform grid.
pub fn integrate(
    model: &impl VelocityField,
    start: &Field,
    cond: Conditioning,
    spec: &IntegrationSpec,
) -> Result<Field> {
    spec.validate()?;
    if let Some(index) = start.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let n = spec.steps;
    let h = 1.0 / n as f32;
    let tau = |k: usize| k as f32 / n as f32;
    let eval = |x: &Field, t: f32| model.velocity(&with_condition_channels(x, cond), t);
    let mut x = start.clone();
    for k in 0..n {
        let v0 = eval(&x, tau(k))?;
        match spec.method {
            Method::Euler => x = axpy(&x, h, &v0)?,
            Method::Heun => {
                let pred = axpy(&x, h, &v0)?;
                check_finite(&pred, k)?;
                let v1 = eval(&pred, tau(k + 1))?;
                let mut next = axpy(&x, 0.5 * h, &v0)?;
                next = axpy(&next, 0.5 * h, &v1)?;
                x = next;
            }
        }
        check_finite(&x, k)?;
    }
    Ok(x)
}

/// CT in [0, 1], mask probability and its binarization.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub ct: Volume,
    pub mask_prob: Volume,
    pub mask_bin: Volume,
}

impl Prediction {
    /// Clamps both channels to [0, 1], then thresholds the mask.
    pub fn from_state(state: &Field, spacing: [f32; 3], threshold: f32) -> Result<Prediction> {
        if state.channels() != 2 {
            return Err(Error::Shape(format!("expected 2 channels, got {}", state.channels())));
        }
        let clamp = |c: usize| state.channel(c).iter().map(|v| v.clamp(0.0, 1.0)).collect::<Vec<f32>>();
        let prob = clamp(1);
        let bin = binarize(&prob, threshold);
        Ok(Prediction {
            ct: Volume::new(state.dims(), spacing, Unit::Normalized, clamp(0))?,
            mask_prob: Volume::new(state.dims(), spacing, Unit::Prob, prob)?,
            mask_bin: Volume::new(state.dims(), spacing, Unit::Prob, bin)?,
        })
    }
}

/// `1` where `p ≥ threshold`, else `0`.
pub fn binarize(prob: &[f32], threshold: f32) -> Vec<f32> {
    prob.iter().map(|&p| if p >= threshold { 1.0 } else { 0.0 }).collect()
}

pub fn predict_future(
    model: &impl VelocityField,
    src: &Sample,
    delta_t_min: f32,
    stage: Stage,
    spec: &IntegrationSpec,
) -> Result<Prediction> {
    let cond = Conditioning::new(delta_t_min, stage);
    let end = integrate(model, &src.to_field(), cond, spec)?;
    Prediction::from_state(&end, src.spacing(), spec.threshold)
}

/// Tile origins along one axis: stride `edge − overlap`, last tile flush
/// with the far boundary.
pub fn tile_starts(len: usize, edge: usize, overlap: usize) -> Vec<usize> {
    let stride = edge - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + edge < len).collect();
    starts.push(len - edge);
    starts.dedup();
    starts
}

/// One-axis blending weights: a raised-cosine ramp over `overlap` voxels at
/// each end, 1 in between, never zero.
pub fn taper_1d(edge: usize, overlap: usize) -> Vec<f64> {
    (0..edge)
        .map(|i| {
            let d = i.min(edge - 1 - i);
            if d < overlap {
                let x = (d + 1) as f64 / (overlap + 1) as f64;
                0.5 - 0.5 * (std::f64::consts::PI * x).cos()
            } else {
                1.0
            }
        })
        .collect()
}

/// Per-voxel normalized weights of every tile, for inspection and tests.
/// Returns, for each tile origin in canonical order, its weight field.
pub fn tile_weights(dims: [usize; 3], edge: usize, overlap: usize) -> Result<Vec<([usize; 3], Vec<f64>)>> {
    let origins = tile_origins(dims, edge, overlap)?;
    let w1 = taper_1d(edge, overlap);
    let mut total = vec![0.0; dims[0] * dims[1] * dims[2]];
    let mut raw = Vec::with_capacity(origins.len());
    for &o in &origins {
        let mut w = vec![0.0; dims[0] * dims[1] * dims[2]];
        for z in 0..edge {
            for y in 0..edge {
                for x in 0..edge {
                    let i = (o[0] + x) + dims[0] * ((o[1] + y) + dims[1] * (o[2] + z));
                    w[i] = w1[x] * w1[y] * w1[z];
                    total[i] += w[i];
                }
            }
        }
        raw.push((o, w));
    }
    for (_, w) in &mut raw {
        for (v, t) in w.iter_mut().zip(&total) {
            if *t > 0.0 {
                *v /= t;
            }
        }
    }
    Ok(raw)
}

fn tile_origins(dims: [usize; 3], edge: usize, overlap: usize) -> Result<Vec<[usize; 3]>> {
    if edge == 0 || overlap >= edge {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= overlap < tile edge, got overlap {overlap}, edge {edge}"
        )));
    }
    if dims.iter().any(|&d| d < edge) {
        return Err(Error::InvalidArgument(format!("tile edge {edge} exceeds volume {dims:?}")));
    }
    let sx = tile_starts(dims[0], edge, overlap);
    let sy = tile_starts(dims[1], edge, overlap);
    let sz = tile_starts(dims[2], edge, overlap);
    let mut out = Vec::new();
    for &z in &sz {
        for &y in &sy {
            for &x in &sx {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}

/// Integrates overlapping tiles independently and blends them.
///
/// Each voxel takes `a + Σ wᵢ(cᵢ − a) / Σ wᵢ` where `a` is the value from the
/// first covering tile in canonical order, so tiles that agree reproduce
/// that value bit for bit.
pub fn tile_predict(
    model: &(impl VelocityField + Sync),
    src: &Sample,
    delta_t_min: f32,
    stage: Stage,
    spec: &IntegrationSpec,
    tile_edge: usize,
    overlap: usize,
) -> Result<Prediction> {
    spec.validate()?;
    let dims = src.dims();
    let origins = tile_origins(dims, tile_edge, overlap)?;
    let cond = Conditioning::new(delta_t_min, stage);
    let full = src.to_field();
    let tiles: Vec<Field> = origins
        .par_iter()
        .map(|&o| {
            let start = full.window(o, [tile_edge; 3])?;
            integrate(model, &start, cond, spec)
        })
        .collect::<Result<_>>()?;

    let w1 = taper_1d(tile_edge, overlap);
    let n = full.voxels();
    let mut anchor = vec![f32::NAN; 2 * n];
    let mut acc = vec![0.0f64; 2 * n];
    let mut wsum = vec![0.0f64; n];
    for (o, tile) in origins.iter().zip(&tiles) {
        for z in 0..tile_edge {
            for y in 0..tile_edge {
                for x in 0..tile_edge {
                    let t = x + tile_edge * (y + tile_edge * z);
                    let i = (o[0] + x) + dims[0] * ((o[1] + y) + dims[1] * (o[2] + z));
                    let w = w1[x] * w1[y] * w1[z];
                    wsum[i] += w;
                    for c in 0..2 {
                        let v = tile.channel(c)[t];
                        let a = &mut anchor[c * n + i];
                        if a.is_nan() {
                            *a = v;
                        }
                        acc[c * n + i] += w * (v as f64 - *a as f64);
                    }
                }
            }
        }
    }
    let data: Vec<f32> = (0..2 * n)
        .map(|j| {
            let delta = acc[j] / wsum[j % n];
            if delta == 0.0 {
                anchor[j]
            } else {
                (anchor[j] as f64 + delta) as f32
            }
        })
        .collect();
    let blended = Field::from_vec(2, dims, data)?;
    Prediction::from_state(&blended, src.spacing(), spec.threshold)
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;

    fn start(dims: [usize; 3]) -> Field {
        let n = dims[0] * dims[1] * dims[2];
        Field::from_vec(2, dims, (0..2 * n).map(|i| ((i * 7 % 13) as f32) / 13.0).collect()).unwrap()
    }

    fn cond() -> Conditioning {
        Conditioning::new(7.0, Stage::First)
    }

    fn head2(input: &Field) -> Field {
        Field::from_vec(2, input.dims(), input.data()[..2 * input.voxels()].to_vec()).unwrap()
    }

    #[test]
    fn zero_field_is_identity() {
        let s = start([4, 4, 4]);
        let zero = |x: &Field, _t: f32| Ok(Field::zeros(2, x.dims()));
        for m in [Method::Euler, Method::Heun] {
            let out = integrate(&zero, &s, cond(), &IntegrationSpec::new(m, 7).unwrap()).unwrap();
            assert_eq!(out, s);
        }
    }

    #[test]
    fn linear_in_tau_closed_forms() {
        let s = start([2, 2, 2]);
        let c = 0.8f32;
        let field = |x: &Field, t: f32| Ok(Field::from_vec(2, x.dims(), vec![t * c; 2 * x.voxels()]).unwrap());
        for n in [1usize, 3, 10, 40] {
            let e = integrate(&field, &s, cond(), &IntegrationSpec::new(Method::Euler, n).unwrap()).unwrap();
            let h = integrate(&field, &s, cond(), &IntegrationSpec::new(Method::Heun, n).unwrap()).unwrap();
            let want_e = c * (n as f32 - 1.0) / (2.0 * n as f32);
            for i in 0..s.data().len() {
                assert!((e.data()[i] - s.data()[i] - want_e).abs() < 1e-5);
                assert!((h.data()[i] - s.data()[i] - c / 2.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn evaluation_counts() {
        let s = start([2, 2, 2]);
        let calls = Cell::new(0usize);
        let field = |x: &Field, _t: f32| {
            calls.set(calls.get() + 1);
            assert_eq!(x.channels(), 4);
            Ok(Field::zeros(2, x.dims()))
        };
        for (m, steps, want) in [(Method::Euler, 9, 9), (Method::Heun, 9, 18), (Method::Heun, 1, 2)] {
            calls.set(0);
            integrate(&field, &s, cond(), &IntegrationSpec::new(m, steps).unwrap()).unwrap();
            assert_eq!(calls.get(), want);
        }
    }

    #[test]
    fn conditioning_channels_constant() {
        let s = start([2, 2, 2]);
        let field = |x: &Field, _t: f32| {
            assert!(x.channel(2).iter().all(|&v| v == 0.7));
            assert!(x.channel(3).iter().all(|&v| v == 0.0));
            Ok(head2(x).map(|v| v * 0.1))
        };
        integrate(&field, &s, cond(), &IntegrationSpec::new(Method::Heun, 5).unwrap()).unwrap();
    }

    #[test]
    fn divergence_names_the_step() {
        let s = start([2, 2, 2]);
        let field = |x: &Field, t: f32| {
            let v = if t >= 0.5 { f32::INFINITY } else { 0.0 };
            Ok(Field::from_vec(2, x.dims(), vec![v; 2 * x.voxels()]).unwrap())
        };
        let err = integrate(&field, &s, cond(), &IntegrationSpec::new(Method::Euler, 4).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 2 }));
        assert!(err.is_numeric());
    }

    #[test]
    fn spec_validation() {
        assert!(IntegrationSpec::new(Method::Euler, 0).is_err());
        let bad = IntegrationSpec { threshold: 1.0, ..IntegrationSpec::default() };
        assert!(bad.validate().is_err());
        assert_eq!("heun".parse::<Method>().unwrap(), Method::Heun);
        assert!("rk4".parse::<Method>().is_err());
    }

    #[test]
    fn threshold_is_inclusive_and_monotone() {
        assert_eq!(binarize(&[0.949, 0.95, 0.951, 1.0], 0.95), vec![0.0, 1.0, 1.0, 1.0]);
        let p: Vec<f32> = (0..200).map(|i| i as f32 / 199.0).collect();
        let mut prev = usize::MAX;
        for k in 1..20 {
            let count = binarize(&p, k as f32 / 20.0).iter().filter(|&&v| v == 1.0).count();
            assert!(count <= prev);
            prev = count;
        }
    }

    #[test]
    fn tile_starts_cover() {
        assert_eq!(tile_starts(64, 32, 8), vec![0, 24, 32]);
        assert_eq!(tile_starts(32, 32, 0), vec![0]);
        assert_eq!(tile_starts(40, 16, 4), vec![0, 12, 24]);
    }

    #[test]
    fn tile_weights_partition_unity() {
        let dims = [20, 16, 12];
        let w = tile_weights(dims, 8, 3).unwrap();
        let n = dims.iter().product::<usize>();
        for i in 0..n {
            let s: f64 = w.iter().map(|(_, f)| f[i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(tile_weights(dims, 13, 2).is_err());
        assert!(tile_weights(dims, 8, 8).is_err());
    }
}
