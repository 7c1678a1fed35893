#![allow(dead_code)]

use refvos::model::{Model, SampleInput};
use refvos::schema::{AugmentedExpressionSet, ClipSample};
use refvos::synth::{generate_example, WorldSpec};
use refvos::trainer::TrainConfig;

/// A 4×4, C=8 world small enough for finite differences.
pub fn tiny_world() -> WorldSpec {
    WorldSpec {
        grid_h: 4,
        grid_w: 4,
        c: 8,
        n_objects_range: [1, 2],
        extent_range: [1, 2],
        t: 3,
        frame_spacing: 1,
        n_l: 6,
        p: 2,
        n: 2,
        ..WorldSpec::default()
    }
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        t: 3,
        frame_stride: 1,
        p: 2,
        n: 2,
        k_v: 3,
        k_z: 2,
        depth: 2,
        selection_layers: vec![1, 2],
        ..TrainConfig::default()
    }
}

pub fn examples(spec: &WorldSpec, seed: u64, n: usize) -> Vec<(ClipSample, AugmentedExpressionSet)> {
    (0..n as u64)
        .map(|i| {
            let (g, set) = generate_example(spec, seed, i).expect("generate");
            (g.clip, set)
        })
        .collect()
}

pub fn sample_input(clip: &ClipSample, set: &AugmentedExpressionSet) -> SampleInput {
    let frames: Vec<usize> = (0..clip.t).collect();
    SampleInput::new(clip, &frames, &set.positives, &set.negatives).expect("input")
}

pub fn tiny_model(cfg: &TrainConfig) -> Model {
    Model::new(cfg.model_config(8)).expect("model")
}

/// Tiny config whose every parameter has a gradient large enough to be
/// measured by central differences: the interaction FFN output starts
/// nonzero and the MIL logits are not shrunk.
pub fn gradcheck_config() -> TrainConfig {
    TrainConfig { interaction_out_gain: 0.5, mil_logit_scale: Some(1.0), ..tiny_config() }
}
