use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Draws within-utterance negatives: uniform over every time index except
/// the positive one, with replacement.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    rng: ChaCha8Rng,
}

impl NegativeSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Sampler whose stream depends only on `seed` and `key`, so evaluating
    /// one utterance never depends on which utterances came before it.
    pub fn keyed(seed: u64, key: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fnv1a(key.as_bytes()));
        Self { rng }
    }

    /// Draw negatives for every valid (context frame, step) pair of a
    /// sequence with `frames` encoder frames.
    pub fn plan(&mut self, frames: usize, steps: usize, negatives: usize) -> NegativePlan {
        let max_step = steps.min(frames.saturating_sub(1));
        let mut offsets = Vec::with_capacity(max_step + 1);
        let mut indices = Vec::new();
        for k in 1..=max_step {
            offsets.push(indices.len());
            for t in 0..frames - k {
                let positive = (t + k) as u32;
                for _ in 0..negatives {
                    let draw = self.rng.gen_range(0..frames as u32 - 1);
                    indices.push(if draw >= positive { draw + 1 } else { draw });
                }
            }
        }
        offsets.push(indices.len());
        NegativePlan {
            frames,
            negatives,
            offsets,
            indices,
        }
    }
}

/// Negative indices for one utterance, laid out step-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativePlan {
    frames: usize,
    negatives: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
}

impl NegativePlan {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn negatives(&self) -> usize {
        self.negatives
    }

    /// Largest prediction step with at least one valid context frame.
    pub fn max_step(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Negatives for context frame `t` predicting `t + step`.
    pub fn get(&self, t: usize, step: usize) -> &[u32] {
        let start = self.offsets[step - 1] + t * self.negatives;
        &self.indices[start..start + self.negatives]
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
