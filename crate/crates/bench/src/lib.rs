//! Shared fixtures for the benchmarks.

use cryoflow::phantom::{generate_case, CaseTimeline, PhantomParams};
use cryoflow::{Example, Field, ModelConfig, Stage, VelocityModel};

pub fn desk_model() -> VelocityModel {
    VelocityModel::init(ModelConfig::default()).expect("default config is valid")
}

/// Deterministic smooth inputs and targets, `n` examples of edge `edge`.
pub fn examples(n: usize, edge: usize) -> Vec<Example> {
    let v = edge * edge * edge;
    (0..n)
        .map(|k| {
            let wave = |c: usize, s: f32| -> Vec<f32> {
                (0..v).map(|i| 0.5 + 0.4 * ((i + c * 7 + k * 13) as f32 * s).sin()).collect()
            };
            let input = [wave(0, 0.11), wave(1, 0.07), vec![0.7; v], vec![0.0; v]].concat();
            let target = [wave(2, 0.05), wave(3, 0.03)].concat();
            Example {
                input: Field::from_vec(4, [edge; 3], input).expect("sized"),
                cond: 0.25 + 0.5 * (k as f32 / n.max(1) as f32),
                target: Field::from_vec(2, [edge; 3], target).expect("sized"),
            }
        })
        .collect()
}

pub fn phantom_case(grid_edge: usize) -> CaseTimeline {
    let p = PhantomParams {
        grid_edge,
        ..PhantomParams::default()
    };
    generate_case(7, &p, Stage::First).expect("valid phantom")
}
