#![allow(dead_code)]

use fbpose_core::experiment::{AuditConfig, BaselineConfig, ExperimentConfig, SceneKind};
use fbpose_core::baseline::{LbfgsConfig, SwarmConfig};
use fbpose_core::nets::{NetScale, PoseSetConfig};
use fbpose_core::pipeline::PipelineConfig;
use fbpose_core::train::TrainConfig;

fn tc(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    }
}

/// Smallest pipeline that exercises every stage in well under a second.
pub fn tiny_pipeline() -> PipelineConfig {
    PipelineConfig {
        scale: NetScale {
            crop: 16,
            conv: 2,
            fc: 16,
            dropout: 0.1,
            synth_latent: 8,
            synth_blocks: vec![(4, 3)],
        },
        prior_k: 6,
        localizer_train: tc(1, 11),
        predictor_train: tc(2, 12),
        synth_train: tc(1, 13),
        synth_stage_epochs: vec![1, 1],
        updater_train: tc(2, 14),
        pose_set: PoseSetConfig {
            copies: 2,
            cap: 8,
            ..PoseSetConfig::default()
        },
        ..PipelineConfig::default()
    }
}

pub fn tiny_experiment(scene: SceneKind) -> ExperimentConfig {
    ExperimentConfig {
        name: "tiny".into(),
        scene,
        seed: 5,
        train_samples: 24,
        test_samples: 6,
        pipeline: tiny_pipeline(),
        iterations: 2,
        baseline: BaselineConfig {
            samples: 2,
            lbfgs: LbfgsConfig {
                max_evals: 10,
                ..LbfgsConfig::default()
            },
            pso: Some(SwarmConfig {
                particles: 4,
                generations: 3,
                ..SwarmConfig::default()
            }),
        },
        audit: AuditConfig {
            enabled: true,
            sigmas: vec![0.1],
            lambda: 0.6,
        },
        dump: 1,
        ..ExperimentConfig::default()
    }
}
