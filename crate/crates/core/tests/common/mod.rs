//! Independent oracles shared by integration tests: a loop-by-loop
//! transcription of the contrastive loss and a finite-difference gradient
//! checker built on top of it.
#![allow(dead_code)]

use clrsel_core::cpc::{CpcConfig, CpcModel, CpcParams, EncoderLayer, NegativePlan};
use rand::Rng;

pub struct NaiveLoss {
    pub total: f64,
    pub frame_losses: Vec<f64>,
    /// Sign of every ReLU pre-activation, in evaluation order.
    pub pattern: Vec<bool>,
}

fn sigma(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Direct transcription: nested loops, plain `ln(sigma(x))`.
pub fn naive_loss(
    config: &CpcConfig,
    params: &CpcParams<f64>,
    input: &[f64],
    plan: &NegativePlan,
) -> NaiveLoss {
    let mut pattern = Vec::new();
    // x[t][channel]
    let mut x: Vec<Vec<f64>> = input.iter().map(|&v| vec![v]).collect();
    let n_layers = config.encoder_layers.len();
    for (l, layer) in config.encoder_layers.iter().enumerate() {
        let w = &params.encoder[l].weight;
        let b = &params.encoder[l].bias;
        let c_in = x[0].len();
        let t_out = (x.len() - layer.kernel) / layer.stride + 1;
        let mut y = vec![vec![0.0; layer.channels]; t_out];
        for t in 0..t_out {
            for o in 0..layer.channels {
                let mut acc = b[o];
                for j in 0..layer.kernel {
                    for i in 0..c_in {
                        acc += w[[j * c_in + i, o]] * x[t * layer.stride + j][i];
                    }
                }
                if l + 1 < n_layers {
                    pattern.push(acc > 0.0);
                    acc = acc.max(0.0);
                }
                y[t][o] = acc;
            }
        }
        x = y;
    }
    let z = x;
    let frames = z.len();
    let d = config.embed_dim;
    let ka = config.aggregator_kernel;

    let mut h = z.clone();
    for agg in &params.aggregator {
        let mut y = vec![vec![0.0; d]; frames];
        for t in 0..frames {
            for o in 0..d {
                let mut acc = agg.bias[o];
                for j in 0..ka {
                    let src = t as isize + j as isize - (ka as isize - 1);
                    if src < 0 {
                        continue;
                    }
                    for i in 0..d {
                        acc += agg.weight[[j * d + i, o]] * h[src as usize][i];
                    }
                }
                pattern.push(acc > 0.0);
                y[t][o] = acc.max(0.0);
            }
        }
        h = y;
    }
    let c = h;

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let k_max = config.prediction_steps;
    let mut frame_losses = Vec::new();
    for t in 0..frames - 1 {
        let valid = k_max.min(frames - 1 - t);
        let mut sum = 0.0;
        for k in 1..=valid {
            let pred = &params.predictors[k - 1];
            let p: Vec<f64> = (0..d)
                .map(|i| pred.bias[i] + (0..d).map(|m| pred.weight[[m, i]] * c[t][m]).sum::<f64>())
                .collect();
            let mut term = -sigma(dot(&z[t + k], &p)).ln();
            let negs = plan.get(t, k);
            for &n in negs {
                term -= sigma(-dot(&z[n as usize], &p)).ln() / negs.len() as f64;
            }
            sum += term;
        }
        frame_losses.push(sum / valid as f64);
    }
    let total = frame_losses.iter().sum::<f64>() / frame_losses.len() as f64;
    NaiveLoss {
        total,
        frame_losses,
        pattern,
    }
}

pub struct FdReport {
    pub checked: usize,
    /// Parameters where every stencil crossed a ReLU kink.
    pub skipped: usize,
    pub one_sided: usize,
    /// (block, index, analytic, numeric)
    pub failures: Vec<(usize, usize, f64, f64)>,
    /// Over entries with magnitude above 1e-4, where relative error is meaningful.
    pub worst_rel: f64,
    pub worst_abs: f64,
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-7;

pub fn within_tol(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= FD_ABS_FLOOR || diff <= FD_REL_TOL * analytic.abs().max(numeric.abs())
}

/// Central differences with step `FD_STEP` on every parameter. When the
/// central stencil changes the ReLU activation pattern, a second-order
/// one-sided stencil on a kink-free side is used instead.
pub fn fd_check(
    model: &CpcModel<f64>,
    analytic: &CpcParams<f64>,
    input: &[f64],
    plan: &NegativePlan,
) -> FdReport {
    let config = model.config().clone();
    let mut params = model.params.clone();
    let base = naive_loss(&config, &params, input, plan);
    let n_blocks = params.blocks().len();
    let grads = analytic.blocks();
    let mut report = FdReport {
        checked: 0,
        skipped: 0,
        one_sided: 0,
        failures: Vec::new(),
        worst_rel: 0.0,
        worst_abs: 0.0,
    };
    for b in 0..n_blocks {
        let len = params.blocks()[b].len();
        for i in 0..len {
            let orig = params.blocks()[b][i];
            let mut eval = |delta: f64| {
                params.blocks_mut()[b][i] = orig + delta;
                let out = naive_loss(&config, &params, input, plan);
                params.blocks_mut()[b][i] = orig;
                out
            };
            let h = FD_STEP;
            let plus = eval(h);
            let minus = eval(-h);
            let numeric = if plus.pattern == base.pattern && minus.pattern == base.pattern {
                (plus.total - minus.total) / (2.0 * h)
            } else {
                let plus2 = eval(2.0 * h);
                let minus2 = eval(-2.0 * h);
                report.one_sided += 1;
                if plus.pattern == base.pattern && plus2.pattern == base.pattern {
                    (-3.0 * base.total + 4.0 * plus.total - plus2.total) / (2.0 * h)
                } else if minus.pattern == base.pattern && minus2.pattern == base.pattern {
                    (3.0 * base.total - 4.0 * minus.total + minus2.total) / (2.0 * h)
                } else {
                    report.one_sided -= 1;
                    report.skipped += 1;
                    continue;
                }
            };
            let a = grads[b][i];
            report.checked += 1;
            let scale = a.abs().max(numeric.abs());
            report.worst_abs = report.worst_abs.max((a - numeric).abs());
            if scale > 1e-4 {
                report.worst_rel = report.worst_rel.max((a - numeric).abs() / scale);
            }
            if !within_tol(a, numeric) {
                report.failures.push((b, i, a, numeric));
            }
        }
    }
    report
}

/// Random encoder/aggregator geometry with at most `max_params` parameters.
pub fn random_tiny_config(rng: &mut impl Rng, max_params: usize) -> CpcConfig {
    loop {
        let n_enc = rng.gen_range(1..=2);
        let mut layers = Vec::new();
        for _ in 0..n_enc {
            layers.push(EncoderLayer::new(
                rng.gen_range(2..=5),
                rng.gen_range(1..=3),
                rng.gen_range(2..=6),
            ));
        }
        let embed_dim = layers.last().unwrap().channels;
        let cfg = CpcConfig {
            encoder_layers: layers,
            aggregator_layers: rng.gen_range(1..=2),
            aggregator_kernel: rng.gen_range(1..=3),
            embed_dim,
            prediction_steps: rng.gen_range(1..=3),
            negatives_per_positive: rng.gen_range(1..=4),
            seed: rng.gen(),
        };
        if cfg.parameter_count() <= max_params {
            return cfg;
        }
    }
}

/// Fill every bias with small random values so bias gradients are exercised.
pub fn randomize_biases(model: &mut CpcModel<f64>, rng: &mut impl Rng) {
    for d in model
        .params
        .encoder
        .iter_mut()
        .chain(&mut model.params.aggregator)
        .chain(&mut model.params.predictors)
    {
        d.bias.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
    }
}

pub fn random_signal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}
