#![allow(dead_code)]

use decamp::pipeline::{generate_dataset, prepare_scenes, ExperimentConfig};
use decamp_core::config::ModelConfig;
use decamp_core::scene::{Horizon, Scene, SceneGenConfig};
use decamp_core::train::TrainConfig;

/// A configuration small enough for end-to-end runs in a test.
pub fn small_experiment() -> ExperimentConfig {
    let horizon = Horizon { history: 10, future: 12 };
    let model = ModelConfig {
        width: 8,
        heads: 2,
        ffn_mult: 2,
        dropout: 0.0,
        encoder_depth: 1,
        regressor_depth: 1,
        spatial_depth: 1,
        motion_depth: 1,
        modes: 3,
        generator_hidden: 8,
        horizon,
        lane_points: 8,
        max_agents: 4,
        max_lanes: 6,
        ..ModelConfig::default()
    };
    let train = TrainConfig { model, epochs: 2, batch_size: 3, ..TrainConfig::default() };
    ExperimentConfig {
        data: SceneGenConfig { max_agents: 4, min_lanes: 3, max_lanes: 6, horizon, lane_points: 8, ..SceneGenConfig::default() },
        pretrain: train.clone(),
        finetune: train,
    }
}

pub fn dataset(cfg: &ExperimentConfig, seed: u64, count: usize) -> Vec<Scene> {
    prepare_scenes(&generate_dataset(&cfg.data, seed, count).unwrap(), &cfg.pretrain).unwrap()
}
