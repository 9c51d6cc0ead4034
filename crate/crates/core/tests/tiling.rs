//! Tiled inference against whole-volume inference with local stub fields.

use cryoflow::sampler::{predict_future, tile_predict};
use cryoflow::{Field, IntegrationSpec, Method, Prediction, Result, Sample, Stage, Unit, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample(edge: usize, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = edge * edge * edge;
    let ct = Volume::new([edge; 3], [1.0; 3], Unit::Normalized, (0..n).map(|_| rng.random()).collect()).unwrap();
    let mask = (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let mask = Volume::new([edge; 3], [1.0; 3], Unit::Prob, mask).unwrap();
    Sample::new(ct, mask, 3.0, Stage::First).unwrap()
}

fn bits(p: &Prediction) -> Vec<u32> {
    [&p.ct, &p.mask_prob, &p.mask_bin]
        .iter()
        .flat_map(|v| v.data().iter().map(|x| x.to_bits()))
        .collect()
}

/// Velocity that depends only on each voxel's own state, its conditioning
/// and τ, so a tile boundary cannot change any trajectory.
fn pointwise(input: &Field, tau: f32) -> Result<Field> {
    let n = input.voxels();
    let (ct, mask, dt) = (input.channel(0), input.channel(1), input.channel(2));
    let mut out = Vec::with_capacity(2 * n);
    out.extend(ct.iter().map(|&c| -0.1 * c * tau));
    out.extend(mask.iter().zip(dt).map(|(&m, &d)| d * (1.0 - m) * (0.5 + tau)));
    Field::from_vec(2, input.dims(), out)
}

#[test]
fn single_tile_equals_whole_volume() {
    let src = sample(16, 1);
    let spec = IntegrationSpec::new(Method::Heun, 5).unwrap();
    let whole = predict_future(&pointwise, &src, 7.0, Stage::First, &spec).unwrap();
    let tiled = tile_predict(&pointwise, &src, 7.0, Stage::First, &spec, 16, 0).unwrap();
    assert_eq!(bits(&whole), bits(&tiled));
}

#[test]
fn constant_field_tiles_blend_exactly() {
    let src = sample(24, 2);
    let spec = IntegrationSpec::new(Method::Euler, 7).unwrap();
    let r = |input: &Field, _: f32| -> Result<Field> {
        let n = input.voxels();
        let mut v = vec![0.03f32; n];
        v.extend(std::iter::repeat_n(0.4f32, n));
        Field::from_vec(2, input.dims(), v)
    };
    let whole = predict_future(&r, &src, 7.0, Stage::Second, &spec).unwrap();
    for (edge, overlap) in [(8, 2), (8, 4), (16, 8), (12, 0)] {
        let tiled = tile_predict(&r, &src, 7.0, Stage::Second, &spec, edge, overlap).unwrap();
        assert_eq!(bits(&whole), bits(&tiled), "tile {edge}, overlap {overlap}");
    }
}

#[test]
fn pointwise_field_tiles_blend_exactly() {
    let src = sample(20, 3);
    let spec = IntegrationSpec::new(Method::Heun, 6).unwrap();
    let whole = predict_future(&pointwise, &src, 4.0, Stage::First, &spec).unwrap();
    for (edge, overlap) in [(8, 3), (16, 6)] {
        let tiled = tile_predict(&pointwise, &src, 4.0, Stage::First, &spec, edge, overlap).unwrap();
        assert_eq!(bits(&whole), bits(&tiled), "tile {edge}, overlap {overlap}");
    }
}

#[test]
fn oversized_tile_is_rejected() {
    let src = sample(8, 4);
    let spec = IntegrationSpec::default();
    assert!(tile_predict(&pointwise, &src, 7.0, Stage::First, &spec, 16, 0).is_err());
    assert!(tile_predict(&pointwise, &src, 7.0, Stage::First, &spec, 8, 8).is_err());
}
