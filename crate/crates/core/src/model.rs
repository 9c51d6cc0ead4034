//! The trainable velocity estimator, its optimizer and checkpoints.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::flow::VelocityField;
use crate::nn::{Network, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub tau_embed_dim: usize,
    pub magnitude_preserving: bool,
    pub param_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 4,
            out_channels: 2,
            base_width: 16,
            depth: 3,
            tau_embed_dim: 32,
            magnitude_preserving: true,
            param_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("channel counts and widths must be positive".into()));
        }
        if self.depth == 0 || self.depth > 6 {
            return Err(Error::Config(format!("depth must be in 1..=6, got {}", self.depth)));
        }
        if self.tau_embed_dim < 2 || !self.tau_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "tau_embed_dim must be even and >= 2, got {}",
                self.tau_embed_dim
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).into()
    }

    pub fn network(&self) -> Network {
        Network::new(
            self.in_channels,
            self.out_channels,
            self.base_width,
            self.depth,
            self.tau_embed_dim,
            self.magnitude_preserving,
        )
    }
}

/// One supervised example: model input, conditioning scalar, regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Field,
    pub cond: f32,
    pub target: Field,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    config: ModelConfig,
    net: Network,
    params: Vec<f32>,
}

impl VelocityModel {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let net = config.network();
        let params = net.init_params(config.param_seed);
        Ok(VelocityModel {
            config,
            net,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, input: &Field) -> Result<()> {
        if input.channels() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {}",
                self.config.in_channels,
                input.channels()
            )));
        }
        if !self.net.accepts(input.dims()) {
            return Err(Error::Shape(format!(
                "spatial dims {:?} must be multiples of {}",
                input.dims(),
                self.net.size_multiple()
            )));
        }
        Ok(())
    }

    /// Network output for `input` at conditioning scalar `cond`.
    pub fn forward(&self, input: &Field, cond: f32) -> Result<Field> {
        self.check_input(input)?;
        let eff = self.net.effective_params(&self.params);
        let (out, _) = self.net.forward(&eff, input.data(), input.dims(), cond);
        Field::from_vec(self.config.out_channels, input.dims(), out)
    }

    /// Batch MSE loss and its gradient w.r.t. the stored parameters.
    pub fn loss_and_grad(&self, batch: &[Example]) -> Result<(f64, Vec<f32>)> {
        for ex in batch {
            self.check_input(&ex.input)?;
            if ex.target.channels() != self.config.out_channels || ex.target.dims() != ex.input.dims() {
                return Err(Error::Shape("target does not match model output".into()));
            }
        }
        let (loss, grad) = batch_loss_grad(&self.net, &self.params, batch)?;
        Ok((loss, grad))
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let net = config.network();
        if params.len() != net.param_count() {
            return Err(Error::ConfigMismatch);
        }
        Ok(VelocityModel {
            config,
            net,
            params,
        })
    }
}

impl VelocityField for VelocityModel {
    fn velocity(&self, input: &Field, tau: f32) -> Result<Field> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!("tau must lie in [0, 1], got {tau}")));
        }
        self.forward(input, tau)
    }
}

fn to_real<T: Real>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x as f64)).collect()
}

/// Mean over examples of the per-example MSE, with its exact gradient w.r.t.
/// raw parameters `raw` (any precision). Examples are processed in parallel
/// and reduced in index order, so the result does not depend on thread count.
pub fn batch_loss_grad<T: Real>(net: &Network, raw: &[T], batch: &[Example]) -> Result<(f64, Vec<T>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let eff = net.effective_params(raw);
    let scale = T::lit(1.0 / batch.len() as f64);
    let parts: Vec<(T, Vec<T>)> = batch
        .par_iter()
        .map(|ex| {
            let input: Vec<T> = to_real(ex.input.data());
            let target: Vec<T> = to_real(ex.target.data());
            let (out, trace) = net.forward(&eff, &input, ex.input.dims(), T::lit(ex.cond as f64));
            let m = T::lit(out.len() as f64);
            let mut loss = T::zero();
            let d_out: Vec<T> = out
                .iter()
                .zip(&target)
                .map(|(&o, &t)| {
                    let d = o - t;
                    loss += d * d;
                    T::lit(2.0) * d / m * scale
                })
                .collect();
            let mut grad = vec![T::zero(); net.param_count()];
            net.backward(&eff, &trace, &d_out, &mut grad, false);
            (loss / m, grad)
        })
        .collect();
    let mut total = T::zero();
    let mut grad = vec![T::zero(); net.param_count()];
    for (l, g) in parts {
        total += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    net.raw_gradient(raw, &mut grad);
    Ok(((total * scale).to_f64().unwrap_or(f64::NAN), grad))
}

/// Adam moments plus the half-life learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub base_lr: f64,
    pub lr_half_life_steps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(n_params: usize, base_lr: f64, lr_half_life_steps: f64) -> Self {
        OptimizerState {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            base_lr,
            lr_half_life_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// `base_lr · 2^(−step / half_life)`.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.base_lr * (-(step as f64) / self.lr_half_life_steps).exp2()
    }
}

/// One Adam update on `batch`. Returns the pre-update loss.
pub fn train_step(model: &mut VelocityModel, opt: &mut OptimizerState, batch: &[Example]) -> Result<f64> {
    if opt.m.len() != model.param_count() || opt.v.len() != model.param_count() {
        return Err(Error::Shape("optimizer buffers do not match the model".into()));
    }
    let (loss, grad) = model.loss_and_grad(batch)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: opt.step,
            loss,
        });
    }
    let lr = opt.lr_at(opt.step);
    let t = (opt.step + 1) as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let (b1, b2) = (opt.beta1 as f32, opt.beta2 as f32);
    for (((p, m), v), &g) in model
        .params
        .iter_mut()
        .zip(opt.m.iter_mut())
        .zip(opt.v.iter_mut())
        .zip(&grad)
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mhat = *m as f64 / bc1;
        let vhat = *v as f64 / bc2;
        *p -= (lr * mhat / (vhat.sqrt() + opt.eps)) as f32;
    }
    model.net.renormalize(&mut model.params);
    opt.step += 1;
    if model.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: opt.step,
            loss,
        });
    }
    Ok(loss)
}

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"CKPT1";
const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint layout (little-endian): magic `CKPT1`, `u32` version,
/// 32-byte config digest, `u32` length + JSON model config, `u64` step,
/// `f64` base lr, `f64` lr half-life, `u64` parameter count, then the
/// parameters, first moments and second moments as `f32` arrays.
pub fn encode_checkpoint(model: &VelocityModel, opt: &OptimizerState) -> Vec<u8> {
    let json = serde_json::to_vec(&model.config).expect("config serializes");
    let n = model.params.len();
    let mut out = Vec::with_capacity(64 + json.len() + 12 * n);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&model.config.digest());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&opt.step.to_le_bytes());
    out.extend_from_slice(&opt.base_lr.to_le_bytes());
    out.extend_from_slice(&opt.lr_half_life_steps.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for arr in [&model.params, &opt.m, &opt.v] {
        for x in arr.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(VelocityModel, OptimizerState)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(5)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let json_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| Error::format(path, format!("model config: {e}")))?;
    if config.digest() != digest {
        return Err(Error::format(path, "config digest does not match embedded config"));
    }
    let step = r.u64()?;
    let base_lr = r.f64()?;
    let half_life = r.f64()?;
    let n = r.u64()? as usize;
    let expected = config.network().param_count();
    if n != expected {
        return Err(Error::format(path, format!("{n} parameters, config implies {expected}")));
    }
    let params = r.f32s(n)?;
    let m = r.f32s(n)?;
    let v = r.f32s(n)?;
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after checkpoint payload"));
    }
    let model = VelocityModel::from_parts(config, params)?;
    let mut opt = OptimizerState::new(n, base_lr, half_life);
    opt.step = step;
    opt.m = m;
    opt.v = v;
    Ok((model, opt))
}

pub fn save_checkpoint(model: &VelocityModel, opt: &OptimizerState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model, opt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(VelocityModel, OptimizerState)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Loads a checkpoint and insists it was written for `config`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, config: &ModelConfig) -> Result<(VelocityModel, OptimizerState)> {
    let (model, opt) = load_checkpoint(path)?;
    if model.config.digest() != config.digest() {
        return Err(Error::ConfigMismatch);
    }
    Ok((model, opt))
}
