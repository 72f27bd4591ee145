//! Fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod criteria;
pub mod gradcheck;

use incdet::detector::{prepare_scene, DetectorConfig, PreparedScene};
use incdet::numeric::SeededRng;
use incdet::scene::{generate_scene, GeneratorConfig, Scene};
use incdet::trainer::{ExperimentConfig, OptimizerConfig};

/// Miniature detector: P=256, M=32, D=16, K=8.
pub fn mini_detector() -> DetectorConfig {
    DetectorConfig {
        num_points: 256,
        num_seeds: 32,
        feature_dim: 16,
        num_proposals: 8,
        heads: 2,
        neighbor_cap: 16,
        point_hidden: 16,
        seed_hidden: 32,
        proposal_hidden: 32,
        ..DetectorConfig::default()
    }
}

pub fn mini_generator() -> GeneratorConfig {
    GeneratorConfig {
        points_per_scene: 256,
        ..GeneratorConfig::default()
    }
}

pub fn mini_scene(classes: &[usize], seed: u64, label: &str) -> Scene {
    let mut rng = SeededRng::new(seed).substream_named(label);
    generate_scene(&mini_generator(), classes, label, &mut rng).expect("scene")
}

pub fn mini_prepared(classes: &[usize], seed: u64, label: &str) -> PreparedScene {
    prepare_scene(&mini_scene(classes, seed, label), &mini_detector()).expect("prepare")
}

/// Small end-to-end experiment: 2+2 classes, a handful of scenes, two epochs.
pub fn tiny_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        generator: mini_generator(),
        detector: mini_detector(),
        optimizer: OptimizerConfig {
            lr: 1e-3,
            epochs: 2,
            batch_size: 4,
        },
        ..ExperimentConfig::default()
    };
    cfg.scenes_per_task.train = 8;
    cfg.scenes_per_task.eval = 4;
    cfg
}
