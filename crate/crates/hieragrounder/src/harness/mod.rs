//! Experiment engine: run configuration, optimizer, training loop,
//! evaluation, the ablation matrix, and the scaling benchmark. The CLI in
//! main.rs is a thin shell over these modules.

pub mod ablate;
pub mod bench;
pub mod cli;
pub mod config;
pub mod evaluate;
pub mod optim;
pub mod train;

/// Small shared fixtures for the harness test suites.
#[cfg(test)]
pub(crate) mod testutil {
    use crate::losses::ContrastiveConfig;
    use crate::model::ModelConfig;
    use crate::synthdata::GenConfig;

    pub fn tiny_gen() -> GenConfig {
        GenConfig {
            l0: 48,
            d_v: 16,
            d_q: 8,
            n_event_classes: 4,
            events_per_episode: 2,
            queries_per_episode: 2,
            ..GenConfig::default()
        }
    }

    pub fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_video: 16,
            d_query: 8,
            dim: 8,
            num_layers: 2,
            stride: 2,
            d_state: 4,
            window: 3,
            heads: 2,
            text_layers: 1,
            text_heads: 2,
            fusion_heads: 2,
            head_depth: 2,
            contrastive: ContrastiveConfig {
                proj_dim: 4,
                margin: 1,
                ..ContrastiveConfig::default()
            },
            ..ModelConfig::default()
        }
    }
}
