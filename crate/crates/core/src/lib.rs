//! Expert-guided multimodal fusion: audio, visual and text features are
//! fused by cross-modal attention, refined by a gated mixture of bottleneck
//! experts, and injected as pseudo tokens into a small frozen language model
//! fine-tuned with LoRA. Emotion labels and sentiment scores are both
//! produced by the language model.

pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod enhancer;
pub mod error;
pub mod fusion;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod prompt;
pub mod synthetic;
pub mod train;
pub mod vocab;

pub use config::{Ablation, AblationSet, EgmfConfig, Task};
pub use error::{EgmfError, Result};
pub use model::EgmfModel;
