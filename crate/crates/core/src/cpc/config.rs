use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One strided convolution of the waveform encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

impl EncoderLayer {
    pub const fn new(kernel: usize, stride: usize, channels: usize) -> Self {
        Self {
            kernel,
            stride,
            channels,
        }
    }

    /// Output length of this layer for an input of `len` frames, if any.
    pub fn output_len(&self, len: usize) -> Option<usize> {
        (len >= self.kernel).then(|| (len - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpcConfig {
    pub encoder_layers: Vec<EncoderLayer>,
    pub aggregator_layers: usize,
    pub aggregator_kernel: usize,
    /// Width of z and c. Must equal the channel count of the last encoder layer.
    pub embed_dim: usize,
    pub prediction_steps: usize,
    pub negatives_per_positive: usize,
    pub seed: u64,
}

impl Default for CpcConfig {
    fn default() -> Self {
        Self {
            encoder_layers: vec![
                EncoderLayer::new(16, 2, 32),
                EncoderLayer::new(16, 3, 32),
                EncoderLayer::new(16, 4, 32),
            ],
            aggregator_layers: 2,
            aggregator_kernel: 3,
            embed_dim: 32,
            prediction_steps: 6,
            negatives_per_positive: 10,
            seed: 0,
        }
    }
}

impl CpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_layers.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        for (i, layer) in self.encoder_layers.iter().enumerate() {
            if layer.kernel == 0 || layer.stride == 0 || layer.channels == 0 {
                return Err(Error::Config(format!(
                    "encoder layer {i}: kernel, stride and channels must be >= 1"
                )));
            }
        }
        let last = self.encoder_layers.last().unwrap().channels;
        if last != self.embed_dim {
            return Err(Error::Config(format!(
                "embed_dim {} must equal the last encoder layer's channels {last}",
                self.embed_dim
            )));
        }
        if self.aggregator_layers == 0 || self.aggregator_kernel == 0 {
            return Err(Error::Config(
                "aggregator needs at least one layer with kernel >= 1".into(),
            ));
        }
        if self.prediction_steps == 0 {
            return Err(Error::Config("prediction_steps must be >= 1".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::Config("negatives_per_positive must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of encoder frames produced from `samples` input samples, or
    /// `None` when some layer would see fewer frames than its kernel.
    pub fn encoded_len(&self, samples: usize) -> Option<usize> {
        self.encoder_layers
            .iter()
            .try_fold(samples, |len, layer| layer.output_len(len))
    }

    /// Smallest input length that yields `frames` encoder frames.
    pub fn min_input_len(&self, frames: usize) -> usize {
        self.encoder_layers
            .iter()
            .rev()
            .fold(frames.max(1), |len, layer| (len - 1) * layer.stride + layer.kernel)
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        let mut c_in = 1;
        for layer in &self.encoder_layers {
            n += layer.kernel * c_in * layer.channels + layer.channels;
            c_in = layer.channels;
        }
        let d = self.embed_dim;
        n += self.aggregator_layers * (self.aggregator_kernel * d * d + d);
        n += self.prediction_steps * (d * d + d);
        n
    }
}
