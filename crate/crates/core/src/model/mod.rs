//! A small pre-norm transformer with hand-written gradients.

mod checkpoint;
mod config;
mod net;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use config::{AttnMode, ModelConfig};
pub use net::{cross_entropy, softmax, KvCache, Model};
pub use params::{Block, Linear, ModelParams, Norm, ParamGroup, INIT_STD};
pub use tensor::{Real, Tensor};
