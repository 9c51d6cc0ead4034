//! Compact 3D encoder–decoder with scalar (τ or σ) conditioning.
//!
//! Layout for `depth = L` and level widths `w_0 .. w_{L-1}`:
//!
//! ```text
//! in_conv   conv3  in -> w0, act
//! level l   (l > 0: down2 w_{l-1} -> w_l, act)
//!           + emb_l(τ)        (magnitude-preserving sum)
//!           enc_l  conv3, act             -> skip_l
//! mid       conv3 on skip_{L-1}, act
//! dec l     up ×2, proj_l 1x1 w_{l+1} -> w_l, + skip_l, dec_l conv3, act
//! head      1x1 w0 -> out, per-channel gain (zero at init) and bias
//! ```
//!
//! In magnitude-preserving mode every weight row is used at unit norm (the
//! stored rows are free parameters and the normalization is differentiated
//! through), activations are `silu / 0.596` and sums are scaled by `1/√2`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ops::{
    conv3_backward, conv3_forward, down2_backward, down2_forward, half_dims, mp_silu,
    mp_silu_grad, point_backward, point_forward, upsample2, upsample2_adjoint,
};
use super::Real;
use crate::volume::{voxel_count, Dims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv3,
    Down2,
    Pointwise,
    Linear,
    Head,
}

impl LayerKind {
    fn taps(self) -> usize {
        match self {
            LayerKind::Conv3 => 27,
            LayerKind::Down2 => 8,
            LayerKind::Pointwise | LayerKind::Linear | LayerKind::Head => 1,
        }
    }
}

/// One named parameter segment group inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
    pub w_off: usize,
    pub b_off: Option<usize>,
    pub gain_off: Option<usize>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.cin * self.kind.taps()
    }

    pub fn w_len(&self) -> usize {
        self.cout * self.fan_in()
    }

    fn w<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.w_off..self.w_off + self.w_len()]
    }

    fn b<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        let o = self.b_off.expect("layer has a bias");
        &p[o..o + self.cout]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub in_channels: usize,
    pub out_channels: usize,
    pub widths: Vec<usize>,
    pub embed_dim: usize,
    pub magnitude_preserving: bool,
    pub layers: Vec<Layer>,
    n_params: usize,
    in_conv: usize,
    enc: Vec<usize>,
    down: Vec<usize>,
    emb: Vec<usize>,
    mid: usize,
    proj: Vec<usize>,
    dec: Vec<usize>,
    head: usize,
}

/// Activations recorded by a forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Trace<T> {
    dims: Vec<Dims>,
    input: Vec<T>,
    feats: Vec<T>,
    in_pre: Vec<T>,
    down_pre: Vec<Vec<T>>,
    enc_in: Vec<Vec<T>>,
    enc_pre: Vec<Vec<T>>,
    skip: Vec<Vec<T>>,
    mid_pre: Vec<T>,
    up: Vec<Vec<T>>,
    dec_in: Vec<Vec<T>>,
    dec_pre: Vec<Vec<T>>,
    dec_out: Vec<Vec<T>>,
    head_pre: Vec<T>,
}

fn act<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| mp_silu(v)).collect()
}

fn act_back<T: Real>(pre: &[T], grad: &mut [T]) {
    for (g, &x) in grad.iter_mut().zip(pre) {
        *g *= mp_silu_grad(x);
    }
}

fn add_scaled<T: Real>(a: &[T], b: &[T], s: T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| (x + y) * s).collect()
}

fn frac_sqrt2<T: Real>() -> T {
    T::lit(std::f64::consts::FRAC_1_SQRT_2)
}

impl Network {
    /// Level widths `base * min(2^l, 4)`.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        base_width: usize,
        depth: usize,
        embed_dim: usize,
        magnitude_preserving: bool,
    ) -> Network {
        assert!(depth >= 1 && base_width >= 1 && embed_dim >= 2 && embed_dim.is_multiple_of(2));
        let widths: Vec<usize> = (0..depth).map(|l| base_width << l.min(2)).collect();
        let mut layers = Vec::new();
        let mut off = 0usize;
        let mut push = |name: String, kind: LayerKind, cin: usize, cout: usize, bias: bool, gain: bool| {
            let mut layer = Layer {
                name,
                kind,
                cin,
                cout,
                w_off: off,
                b_off: None,
                gain_off: None,
            };
            off += layer.w_len();
            if gain {
                layer.gain_off = Some(off);
                off += cout;
            }
            if bias {
                layer.b_off = Some(off);
                off += cout;
            }
            layers.push(layer);
            layers.len() - 1
        };

        let in_conv = push("in_conv".into(), LayerKind::Conv3, in_channels, widths[0], true, false);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        let mut emb = Vec::new();
        for l in 0..depth {
            if l > 0 {
                down.push(push(format!("down{l}"), LayerKind::Down2, widths[l - 1], widths[l], true, false));
            }
            emb.push(push(format!("emb{l}"), LayerKind::Linear, embed_dim, widths[l], false, false));
            enc.push(push(format!("enc{l}"), LayerKind::Conv3, widths[l], widths[l], true, false));
        }
        let mid = push("mid".into(), LayerKind::Conv3, widths[depth - 1], widths[depth - 1], true, false);
        let mut proj = vec![0; depth - 1];
        let mut dec = vec![0; depth - 1];
        for l in (0..depth - 1).rev() {
            proj[l] = push(format!("proj{l}"), LayerKind::Pointwise, widths[l + 1], widths[l], true, false);
            dec[l] = push(format!("dec{l}"), LayerKind::Conv3, widths[l], widths[l], true, false);
        }
        let head = push("head".into(), LayerKind::Head, widths[0], out_channels, true, true);

        Network {
            in_channels,
            out_channels,
            widths,
            embed_dim,
            magnitude_preserving,
            layers,
            n_params: off,
            in_conv,
            enc,
            down,
            emb,
            mid,
            proj,
            dec,
            head,
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    /// Spatial dims must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth() - 1)
    }

    pub fn accepts(&self, dims: Dims) -> bool {
        dims.iter().all(|&d| d > 0 && d % self.size_multiple() == 0)
    }

    /// Seeded initial parameters. Rows are standard normal in
    /// magnitude-preserving mode (used at unit norm) and `N(0, 1/fan_in)`
    /// otherwise; biases and the head gain start at zero.
    pub fn init_params<T: Real>(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![T::zero(); self.n_params];
        for layer in &self.layers {
            let scale = if self.magnitude_preserving {
                1.0
            } else {
                1.0 / (layer.fan_in() as f64).sqrt()
            };
            for v in &mut p[layer.w_off..layer.w_off + layer.w_len()] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = T::lit(z * scale);
            }
        }
        p
    }

    /// Weights as used by the forward pass.
    pub fn effective_params<T: Real>(&self, raw: &[T]) -> Vec<T> {
        let mut p = raw.to_vec();
        if self.magnitude_preserving {
            for layer in &self.layers {
                let k = layer.fan_in();
                for row in p[layer.w_off..layer.w_off + layer.w_len()].chunks_exact_mut(k) {
                    let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if norm > T::zero() {
                        for v in row {
                            *v = *v / norm;
                        }
                    }
                }
            }
        }
        p
    }

    /// Pulls a gradient w.r.t. effective parameters back to raw parameters.
    pub fn raw_gradient<T: Real>(&self, raw: &[T], grad_eff: &mut [T]) {
        if !self.magnitude_preserving {
            return;
        }
        for layer in &self.layers {
            let k = layer.fan_in();
            let range = layer.w_off..layer.w_off + layer.w_len();
            for (w, g) in raw[range.clone()].chunks_exact(k).zip(grad_eff[range].chunks_exact_mut(k)) {
                let norm = w.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm == T::zero() {
                    continue;
                }
                let dot = w.iter().zip(g.iter()).map(|(&a, &b)| a * b).sum::<T>() / norm;
                for (gi, &wi) in g.iter_mut().zip(w) {
                    *gi = (*gi - dot * wi / norm) / norm;
                }
            }
        }
    }

    /// Resets every stored weight row to RMS 1; the function is unchanged.
    pub fn renormalize<T: Real>(&self, raw: &mut [T]) {
        if !self.magnitude_preserving {
            return;
        }
        for layer in &self.layers {
            let k = layer.fan_in();
            let target = T::lit((k as f64).sqrt());
            for row in raw[layer.w_off..layer.w_off + layer.w_len()].chunks_exact_mut(k) {
                let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm > T::zero() {
                    for v in row {
                        *v = *v * target / norm;
                    }
                }
            }
        }
    }

    /// Fourier features of the conditioning scalar, RMS 1.
    pub fn features<T: Real>(&self, s: T) -> Vec<T> {
        let half = self.embed_dim / 2;
        let two_pi = T::lit(std::f64::consts::TAU);
        let sqrt2 = T::lit(std::f64::consts::SQRT_2);
        let freqs: Vec<T> = (0..half)
            .map(|j| {
                let e = if half > 1 { j as f64 / (half - 1) as f64 } else { 0.0 };
                T::lit(0.25 * 64f64.powf(e))
            })
            .collect();
        let mut f = Vec::with_capacity(self.embed_dim);
        f.extend(freqs.iter().map(|&w| (two_pi * w * s).cos() * sqrt2));
        f.extend(freqs.iter().map(|&w| (two_pi * w * s).sin() * sqrt2));
        f
    }

    fn embed<T: Real>(&self, p: &[T], l: usize, feats: &[T]) -> Vec<T> {
        let layer = &self.layers[self.emb[l]];
        layer
            .w(p)
            .chunks_exact(layer.cin)
            .map(|row| row.iter().zip(feats).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    /// Forward pass on one sample. `params` are effective parameters.
    pub fn forward<T: Real>(&self, params: &[T], input: &[T], dims: Dims, cond: T) -> (Vec<T>, Trace<T>) {
        assert_eq!(params.len(), self.n_params);
        assert_eq!(input.len(), self.in_channels * voxel_count(dims));
        assert!(self.accepts(dims), "dims {dims:?} not divisible by {}", self.size_multiple());
        let depth = self.depth();
        let s2 = frac_sqrt2::<T>();
        let mut level_dims = vec![dims];
        for l in 1..depth {
            level_dims.push(half_dims(level_dims[l - 1]));
        }
        let feats = self.features(cond);

        let lin = &self.layers[self.in_conv];
        let in_pre = conv3_forward(input, lin.cin, dims, lin.w(params), lin.b(params), lin.cout);
        let mut h = act(&in_pre);
        let mut down_pre = Vec::new();
        let mut enc_in = Vec::new();
        let mut enc_pre = Vec::new();
        let mut skip: Vec<Vec<T>> = Vec::new();
        for l in 0..depth {
            let d = level_dims[l];
            let n = voxel_count(d);
            if l > 0 {
                let ld = &self.layers[self.down[l - 1]];
                let pre = down2_forward(&skip[l - 1], ld.cin, level_dims[l - 1], ld.w(params), ld.b(params), ld.cout);
                h = act(&pre);
                down_pre.push(pre);
            }
            let e = self.embed(params, l, &feats);
            let mut x = h.clone();
            for (c, &ec) in e.iter().enumerate() {
                for v in &mut x[c * n..(c + 1) * n] {
                    *v = (*v + ec) * s2;
                }
            }
            let le = &self.layers[self.enc[l]];
            let pre = conv3_forward(&x, le.cin, d, le.w(params), le.b(params), le.cout);
            skip.push(act(&pre));
            enc_in.push(x);
            enc_pre.push(pre);
        }

        let lm = &self.layers[self.mid];
        let mid_pre = conv3_forward(&skip[depth - 1], lm.cin, level_dims[depth - 1], lm.w(params), lm.b(params), lm.cout);
        let mut cur = act(&mid_pre);

        let mut up = vec![Vec::new(); depth - 1];
        let mut dec_in = vec![Vec::new(); depth - 1];
        let mut dec_pre = vec![Vec::new(); depth - 1];
        let mut dec_out = vec![Vec::new(); depth - 1];
        for l in (0..depth - 1).rev() {
            let d = level_dims[l];
            let n = voxel_count(d);
            let u = upsample2(&cur, self.widths[l + 1], level_dims[l + 1]);
            let lp = &self.layers[self.proj[l]];
            let pr = point_forward(&u, lp.cin, n, lp.w(params), lp.b(params), lp.cout);
            let m = add_scaled(&pr, &skip[l], s2);
            let ld = &self.layers[self.dec[l]];
            let pre = conv3_forward(&m, ld.cin, d, ld.w(params), ld.b(params), ld.cout);
            cur = act(&pre);
            up[l] = u;
            dec_in[l] = m;
            dec_pre[l] = pre;
            dec_out[l] = cur.clone();
        }

        let lh = &self.layers[self.head];
        let n0 = voxel_count(dims);
        let head_pre = point_forward(&cur, lh.cin, n0, lh.w(params), &vec![T::zero(); lh.cout], lh.cout);
        let gain = &params[lh.gain_off.unwrap()..lh.gain_off.unwrap() + lh.cout];
        let bias = lh.b(params);
        let mut out = head_pre.clone();
        for c in 0..lh.cout {
            for v in &mut out[c * n0..(c + 1) * n0] {
                *v = *v * gain[c] + bias[c];
            }
        }

        let trace = Trace {
            dims: level_dims,
            input: input.to_vec(),
            feats,
            in_pre,
            down_pre,
            enc_in,
            enc_pre,
            skip,
            mid_pre,
            up,
            dec_in,
            dec_pre,
            // dec_out[0] always holds the head input
            dec_out: if depth > 1 { dec_out } else { vec![cur] },
            head_pre,
        };
        (out, trace)
    }

    /// Reverse pass: accumulates `d loss / d effective params` into `grad` and
    /// optionally returns `d loss / d input`.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        trace: &Trace<T>,
        d_out: &[T],
        grad: &mut [T],
        need_input_grad: bool,
    ) -> Option<Vec<T>> {
        assert_eq!(grad.len(), self.n_params);
        let depth = self.depth();
        let s2 = frac_sqrt2::<T>();
        let dims = &trace.dims;
        let n0 = voxel_count(dims[0]);

        // head
        let lh = &self.layers[self.head];
        let g_off = lh.gain_off.unwrap();
        let b_off = lh.b_off.unwrap();
        let mut d_head = d_out.to_vec();
        for c in 0..lh.cout {
            let gain = params[g_off + c];
            let (mut gg, mut gb) = (T::zero(), T::zero());
            for (d, &hp) in d_head[c * n0..(c + 1) * n0].iter_mut().zip(&trace.head_pre[c * n0..(c + 1) * n0]) {
                gg += *d * hp;
                gb += *d;
                *d *= gain;
            }
            grad[g_off + c] += gg;
            grad[b_off + c] += gb;
        }
        // The head bias is applied after the gain, so the pointwise bias slot is unused.
        let mut unused_bias = vec![T::zero(); lh.cout];
        let gw_head = &mut grad[lh.w_off..lh.w_off + lh.w_len()];
        let mut d_cur = point_backward(&trace.dec_out[0], lh.cin, n0, lh.w(params), lh.cout, &d_head, gw_head, &mut unused_bias);

        // decoder, top level first
        let mut d_skip: Vec<Vec<T>> = (0..depth).map(|l| vec![T::zero(); self.widths[l] * voxel_count(dims[l])]).collect();
        for l in 0..depth - 1 {
            let n = voxel_count(dims[l]);
            act_back(&trace.dec_pre[l], &mut d_cur);
            let ld = &self.layers[self.dec[l]];
            let (gw, gb) = split_wb(grad, ld);
            let d_m = conv3_backward(&trace.dec_in[l], ld.cin, dims[l], ld.w(params), ld.cout, &d_cur, gw, gb, true).unwrap();
            let d_pr: Vec<T> = d_m.iter().map(|&v| v * s2).collect();
            for (a, &v) in d_skip[l].iter_mut().zip(&d_pr) {
                *a += v;
            }
            let lp = &self.layers[self.proj[l]];
            let (gw, gb) = split_wb(grad, lp);
            let d_u = point_backward(&trace.up[l], lp.cin, n, lp.w(params), lp.cout, &d_pr, gw, gb);
            d_cur = upsample2_adjoint(&d_u, self.widths[l + 1], dims[l + 1]);
        }

        // bottleneck
        act_back(&trace.mid_pre, &mut d_cur);
        let lm = &self.layers[self.mid];
        let (gw, gb) = split_wb(grad, lm);
        let d_bottom = conv3_backward(&trace.skip[depth - 1], lm.cin, dims[depth - 1], lm.w(params), lm.cout, &d_cur, gw, gb, true).unwrap();
        for (a, &v) in d_skip[depth - 1].iter_mut().zip(&d_bottom) {
            *a += v;
        }

        // encoder, deepest level first
        for l in (0..depth).rev() {
            let n = voxel_count(dims[l]);
            let mut d = std::mem::take(&mut d_skip[l]);
            act_back(&trace.enc_pre[l], &mut d);
            let le = &self.layers[self.enc[l]];
            let (gw, gb) = split_wb(grad, le);
            let mut d_h = conv3_backward(&trace.enc_in[l], le.cin, dims[l], le.w(params), le.cout, &d, gw, gb, true).unwrap();
            for v in &mut d_h {
                *v *= s2;
            }
            let lemb = &self.layers[self.emb[l]];
            for c in 0..lemb.cout {
                let de: T = d_h[c * n..(c + 1) * n].iter().copied().sum();
                let row = lemb.w_off + c * lemb.cin;
                for (j, &f) in trace.feats.iter().enumerate() {
                    grad[row + j] += de * f;
                }
            }
            if l > 0 {
                act_back(&trace.down_pre[l - 1], &mut d_h);
                let ld = &self.layers[self.down[l - 1]];
                let (gw, gb) = split_wb(grad, ld);
                let d_prev = down2_backward(&trace.skip[l - 1], ld.cin, dims[l - 1], ld.w(params), ld.cout, &d_h, gw, gb);
                for (a, &v) in d_skip[l - 1].iter_mut().zip(&d_prev) {
                    *a += v;
                }
            } else {
                act_back(&trace.in_pre, &mut d_h);
                let li = &self.layers[self.in_conv];
                let (gw, gb) = split_wb(grad, li);
                return conv3_backward(&trace.input, li.cin, dims[0], li.w(params), li.cout, &d_h, gw, gb, need_input_grad);
            }
        }
        unreachable!("encoder loop returns at level 0")
    }
}

/// Disjoint mutable views of a layer's weight and bias gradients.
fn split_wb<'a, T>(grad: &'a mut [T], layer: &Layer) -> (&'a mut [T], &'a mut [T]) {
    let b_off = layer.b_off.expect("bias");
    debug_assert!(b_off >= layer.w_off + layer.w_len());
    let (head, tail) = grad.split_at_mut(b_off);
    (
        &mut head[layer.w_off..layer.w_off + layer.w_len()],
        &mut tail[..layer.cout],
    )
}
