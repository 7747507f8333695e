//! Contrastive predictive model: strided convolutional encoder, causal
//! convolutional aggregator and one affine predictor per future step,
//! trained with the sigmoid (binary) contrastive loss.

mod checkpoint;
mod config;
mod model;
mod sampler;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{CpcConfig, EncoderLayer};
pub use model::{
    normalize_waveform, CpcModel, CpcParams, Dense, Forward, LossOutput, ParamShape, Real,
};
pub use sampler::{NegativePlan, NegativeSampler};

/// Per-frame contrastive losses of one utterance under one model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrameLossTrace {
    pub utterance_id: String,
    pub losses: Vec<f64>,
}

impl FrameLossTrace {
    pub fn mean(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}
