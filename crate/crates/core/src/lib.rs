//! Causal autoregressive diffusion (CARD) language modeling at desk scale.
//!
//! The crate bundles everything needed to train and study small causal
//! diffusion language models: byte-level corpora, the tail-biased forward
//! process, context-aware loss weights, a tiny transformer with hand-written
//! gradients, the CARD / ARM / MDLM / BD3LM objectives, an AdamW trainer,
//! KV-cached decoders, and numerical checks of the method's analytic claims.

pub mod analysis;
pub mod config;
pub mod corpus;
pub mod corruption;
pub mod error;
pub mod inference;
pub mod markov;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod trainer;
pub mod weighting;

pub use config::{DataConfig, DataSource, LabConfig};
pub use corpus::{Dataset, Split, TokenId, TokenSeq, Vocab};
pub use corruption::{CorruptionConfig, MaskPattern, MaskStrategy, NoiseSchedule};
pub use error::{LabError, Result};
pub use inference::{DecodeConfig, DecodeTrace, Generation};
pub use markov::MarkovSource;
pub use objectives::{LossNorm, Objective, ObjectiveConfig, TrainingExample};
pub use model::{AttnMode, Checkpoint, KvCache, Model, ModelConfig, ModelParams};
pub use trainer::{LrSchedule, TrainConfig, TrainState, Trainer};
pub use weighting::{ScoreConvention, WeightConfig, WeightVector};
