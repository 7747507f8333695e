//! Training one CPC model per data set with Adam and early stopping, and
//! evaluating per-frame losses with a fixed negative-sampling seed.

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::cpc::{normalize_waveform, CpcConfig, CpcModel, CpcParams, FrameLossTrace, NegativeSampler};
use crate::error::{Error, Result};

/// Evaluation negatives come from this seed unless configured otherwise.
pub const DEFAULT_EVAL_SEED: u64 = 0x00c0_ffee;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub validation_fraction: f64,
    /// Drives the validation split, epoch order and training negatives.
    pub seed: u64,
    /// Drives negatives for validation and scoring.
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            patience: 10,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            validation_fraction: 0.1,
            seed: 0,
            eval_seed: DEFAULT_EVAL_SEED,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "need 1 <= patience ({}) <= max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 0.5) {
            return Err(Error::Config(format!(
                "validation_fraction must be in (0, 0.5), got {}",
                self.validation_fraction
            )));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training epochs completed (the initial evaluation is not counted).
    pub epochs_run: usize,
    /// Epoch whose parameters were returned; 0 means the initial model.
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    /// Index 0 holds the initial model's loss, index e the loss after epoch e.
    pub train_curve: Vec<f64>,
    pub validation_curve: Vec<f64>,
    pub stopped_early: bool,
    pub train_ids: Vec<String>,
    pub validation_ids: Vec<String>,
    /// Utterances too short to produce two encoder frames.
    pub skipped: Vec<String>,
}

/// Patience bookkeeping: stop once `patience` consecutive epochs fail to
/// improve on the best validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Record the loss of `epoch`; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best_loss)
    }
}

/// Outcome of one epoch as seen by the schedule.
pub struct EpochLosses {
    pub train: f64,
    pub validation: f64,
}

/// Epoch loop shared by [`train`] and by tests that script the losses.
/// `epoch_fn(state, 0)` evaluates the initial state; `on_best(state, e)`
/// fires right after every epoch that sets a new best validation loss.
pub fn run_schedule<S>(
    state: &mut S,
    max_epochs: usize,
    patience: usize,
    mut epoch_fn: impl FnMut(&mut S, usize) -> Result<EpochLosses>,
    mut on_best: impl FnMut(&mut S, usize),
) -> Result<TrainReport> {
    let mut stopper = EarlyStopping::new(patience);
    let mut train_curve = Vec::new();
    let mut validation_curve = Vec::new();
    let mut stopped_early = false;
    let mut epochs_run = 0;
    for epoch in 0..=max_epochs {
        let losses = epoch_fn(state, epoch)?;
        train_curve.push(losses.train);
        validation_curve.push(losses.validation);
        epochs_run = epoch;
        if stopper.observe(epoch, losses.validation) {
            on_best(state, epoch);
        }
        debug!(
            "epoch {epoch}: train {:.5} validation {:.5}",
            losses.train, losses.validation
        );
        if stopper.should_stop() && epoch < max_epochs {
            stopped_early = true;
            break;
        }
    }
    let (best_epoch, best_validation_loss) = stopper.best();
    Ok(TrainReport {
        epochs_run,
        best_epoch,
        best_validation_loss,
        train_curve,
        validation_curve,
        stopped_early,
        train_ids: Vec::new(),
        validation_ids: Vec::new(),
        skipped: Vec::new(),
    })
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    m: CpcParams<f32>,
    v: CpcParams<f32>,
}

impl Adam {
    fn new(config: &TrainConfig, cpc: &CpcConfig) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            step: 0,
            m: CpcParams::zeros(cpc),
            v: CpcParams::zeros(cpc),
        }
    }

    fn update(&mut self, params: &mut CpcParams<f32>, grads: &CpcParams<f32>) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let step_size = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.epsilon * c2.sqrt()) as f32;
        let blocks = params
            .blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(self.m.blocks_mut())
            .zip(self.v.blocks_mut());
        for (((p, g), m), v) in blocks {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= step_size * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

struct Prepared<'a> {
    id: &'a str,
    input: Vec<f32>,
}

fn prepare<'a>(utterances: &'a [Utterance], config: &CpcConfig) -> (Vec<Prepared<'a>>, Vec<String>) {
    let mut usable = Vec::new();
    let mut skipped = Vec::new();
    for u in utterances {
        if config.encoded_len(u.samples.len()).unwrap_or(0) >= 2 {
            usable.push(Prepared {
                id: &u.id,
                input: normalize_waveform(&u.samples),
            });
        } else {
            skipped.push(u.id.clone());
        }
    }
    (usable, skipped)
}

fn mean_loss(model: &CpcModel<f32>, set: &[&Prepared<'_>], eval_seed: u64) -> Result<f64> {
    let mut sum = 0.0;
    for p in set {
        sum += model
            .evaluate(&p.input, &mut NegativeSampler::keyed(eval_seed, p.id))?
            .total;
    }
    Ok(sum / set.len() as f64)
}

/// Train a model on `utterances` and return the parameters of the best
/// validation epoch.
pub fn train(
    utterances: &[Utterance],
    cpc_config: &CpcConfig,
    config: &TrainConfig,
) -> Result<(CpcModel<f32>, TrainReport)> {
    config.validate()?;
    cpc_config.validate()?;
    let (usable, skipped) = prepare(utterances, cpc_config);
    for id in &skipped {
        warn!("skipping {id}: too short for one prediction step");
    }
    if usable.len() < 2 {
        return Err(Error::UnusableCorpus(format!(
            "{} of {} utterances are long enough; need at least 2",
            usable.len(),
            utterances.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((usable.len() as f64 * config.validation_fraction).round() as usize)
        .clamp(1, usable.len() - 1);
    let validation: Vec<&Prepared> = order[..n_val].iter().map(|&i| &usable[i]).collect();
    let training: Vec<&Prepared> = order[n_val..].iter().map(|&i| &usable[i]).collect();
    info!(
        "training on {} utterances, validating on {}",
        training.len(),
        validation.len()
    );

    struct State<'m> {
        model: CpcModel<f32>,
        best: CpcParams<f32>,
        adam: Adam,
        sampler: NegativeSampler,
        rng: ChaCha8Rng,
        training: Vec<&'m Prepared<'m>>,
    }
    let model = CpcModel::<f32>::new(cpc_config.clone())?;
    let mut state = State {
        best: model.params.clone(),
        model,
        adam: Adam::new(config, cpc_config),
        sampler: NegativeSampler::new(config.seed ^ 0x9e37_79b9_7f4a_7c15),
        rng,
        training,
    };

    let mut report = run_schedule(
        &mut state,
        config.max_epochs,
        config.patience,
        |st, epoch| {
            let train_loss = if epoch == 0 {
                mean_loss(&st.model, &st.training, config.eval_seed)?
            } else {
                let State {
                    model,
                    adam,
                    sampler,
                    rng,
                    training,
                    ..
                } = st;
                training.shuffle(rng);
                let mut sum = 0.0;
                for (step, p) in training.iter().enumerate() {
                    let (out, grads) = model.loss_gradient(&p.input, sampler)?;
                    if !out.total.is_finite() || !grads.is_finite() {
                        return Err(Error::Divergence { epoch, step });
                    }
                    sum += out.total;
                    adam.update(&mut model.params, &grads);
                }
                sum / training.len() as f64
            };
            let validation_loss = mean_loss(&st.model, &validation, config.eval_seed)?;
            if !validation_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: st.training.len(),
                });
            }
            Ok(EpochLosses {
                train: train_loss,
                validation: validation_loss,
            })
        },
        |st, _| st.best = st.model.params.clone(),
    )?;
    info!(
        "stopped after {} epochs; best epoch {} (validation {:.5})",
        report.epochs_run, report.best_epoch, report.best_validation_loss
    );

    report.train_ids = order[n_val..].iter().map(|&i| usable[i].id.to_string()).collect();
    report.validation_ids = validation.iter().map(|p| p.id.to_string()).collect();
    report.skipped = skipped;
    let model = CpcModel::from_params(cpc_config.clone(), state.best)?;
    Ok((model, report))
}

/// Per-frame losses for every utterance long enough to score. Negatives for
/// utterance `id` come from a stream keyed by (`eval_seed`, `id`), so the
/// result for one utterance never depends on the others.
pub fn evaluate_frame_losses(
    model: &CpcModel<f32>,
    utterances: &[Utterance],
    eval_seed: u64,
) -> Result<Evaluation> {
    let mut traces = Vec::with_capacity(utterances.len());
    let mut skipped = Vec::new();
    for u in utterances {
        if model.config().encoded_len(u.samples.len()).unwrap_or(0) < 2 {
            skipped.push(u.id.clone());
            continue;
        }
        let input = normalize_waveform::<f32>(&u.samples);
        let out = model.evaluate(&input, &mut NegativeSampler::keyed(eval_seed, &u.id))?;
        traces.push(FrameLossTrace {
            utterance_id: u.id.clone(),
            losses: out.frame_losses,
        });
    }
    Ok(Evaluation { traces, skipped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub traces: Vec<FrameLossTrace>,
    pub skipped: Vec<String>,
}
