//! Fixtures shared by the benchmarks.

use card_core::corpus::PackedCorpus;
use card_core::{LabConfig, Model, Objective, Vocab};

/// Default laboratory configuration on a smaller corpus, training `objective`.
pub fn config(objective: Objective) -> LabConfig {
    let mut cfg = LabConfig::default();
    cfg.data.tokens = 32_000;
    cfg.objective.objective = objective;
    cfg.train.steps = 1_000_000;
    cfg.train.eval_every = 0;
    cfg
}

/// Vocabulary and packed corpus for `cfg`.
pub fn corpus(cfg: &LabConfig) -> (Vocab, PackedCorpus) {
    cfg.data.load().expect("synthetic corpus loads")
}

/// Freshly initialized model for `cfg`.
pub fn model(cfg: &LabConfig) -> Model<f32> {
    Model::init(cfg.model_config().expect("valid model config"), cfg.train.seed).expect("model initializes")
}
