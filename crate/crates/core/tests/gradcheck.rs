//! Reverse-mode gradients against central finite differences in f64.

use cryoflow::model::batch_loss_grad;
use cryoflow::nn::{LayerKind, Network};
use cryoflow::{Example, Field};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const PER_KIND: usize = 12;
const MIN_PER_KIND: usize = 10;

fn batch(in_ch: usize, edge: usize, rng: &mut ChaCha8Rng) -> Vec<Example> {
    let n = edge * edge * edge;
    (0..2)
        .map(|_| Example {
            input: Field::from_vec(in_ch, [edge; 3], (0..in_ch * n).map(|_| rng.random::<f32>()).collect()).unwrap(),
            cond: rng.random(),
            target: Field::from_vec(2, [edge; 3], (0..2 * n).map(|_| rng.random::<f32>() - 0.5).collect()).unwrap(),
        })
        .collect()
}

/// Parameter indices owned by layers of each kind.
fn indices_by_kind(net: &Network) -> Vec<(LayerKind, Vec<usize>)> {
    let kinds = [LayerKind::Conv3, LayerKind::Down2, LayerKind::Pointwise, LayerKind::Linear, LayerKind::Head];
    kinds
        .iter()
        .map(|&k| {
            let mut idx = Vec::new();
            for l in net.layers.iter().filter(|l| l.kind == k) {
                idx.extend(l.w_off..l.w_off + l.w_len());
                for o in [l.b_off, l.gain_off].into_iter().flatten() {
                    idx.extend(o..o + l.cout);
                }
            }
            (k, idx)
        })
        .collect()
}

fn check(mp: bool, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::new(4, 2, 3, 3, 8, mp);
    let mut raw: Vec<f64> = net.init_params(seed);
    // move off the zero-gain, zero-bias start so every path carries gradient
    for v in raw.iter_mut() {
        if *v == 0.0 {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let data = batch(4, 8, &mut rng);
    let (_, grad) = batch_loss_grad(&net, &raw, &data).unwrap();
    let loss = |p: &[f64]| batch_loss_grad(&net, p, &data).unwrap().0;

    for (kind, mut idx) in indices_by_kind(&net) {
        idx.shuffle(&mut rng);
        let mut checked = 0;
        for &i in &idx {
            if checked == PER_KIND {
                break;
            }
            let mut p = raw.clone();
            p[i] = raw[i] + H;
            let up = loss(&p);
            p[i] = raw[i] - H;
            let down = loss(&p);
            let numeric = (up - down) / (2.0 * H);
            let analytic = grad[i];
            let scale = numeric.abs().max(analytic.abs());
            if scale < 1e-9 {
                continue;
            }
            let rel = (numeric - analytic).abs() / scale;
            assert!(rel < 1e-4, "{kind:?} param {i}: analytic {analytic:e} numeric {numeric:e} rel {rel:e}");
            checked += 1;
        }
        assert!(checked >= MIN_PER_KIND, "{kind:?}: only {checked} parameters with measurable gradient");
    }
}

#[test]
fn magnitude_preserving_network_gradients() {
    check(true, 1);
}

#[test]
fn plain_network_gradients() {
    check(false, 2);
}

#[test]
fn input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = Network::new(4, 2, 3, 2, 8, true);
    let mut raw: Vec<f64> = net.init_params(3);
    for v in raw.iter_mut() {
        if *v == 0.0 {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let eff = net.effective_params(&raw);
    let dims = [4; 3];
    let input: Vec<f64> = (0..4 * 64).map(|_| rng.random()).collect();
    let weights: Vec<f64> = (0..2 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let objective = |x: &[f64]| {
        let (out, _) = net.forward(&eff, x, dims, 0.3);
        out.iter().zip(&weights).map(|(o, w)| o * w).sum::<f64>()
    };
    let (_, trace) = net.forward(&eff, &input, dims, 0.3);
    let mut g = vec![0.0; net.param_count()];
    let dx = net.backward(&eff, &trace, &weights, &mut g, true).unwrap();
    for i in (0..input.len()).step_by(7) {
        let mut x = input.clone();
        x[i] += H;
        let up = objective(&x);
        x[i] -= 2.0 * H;
        let numeric = (up - objective(&x)) / (2.0 * H);
        assert!((numeric - dx[i]).abs() <= 1e-6 * numeric.abs().max(1.0), "voxel {i}");
    }
}
