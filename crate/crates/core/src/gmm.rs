//! Diagonal-covariance GMM log-likelihood baseline.
//!
//! The model is fit by EM on target-set MFCC frames. Pool utterances are
//! scored by their mean frame log-likelihood, which is higher for a better
//! match, and selected with the same greedy code as the CLR path.

use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Manifest, Utterance};
use crate::envelope::{read_envelope, write_envelope};
use crate::error::{Error, Result};
use crate::features::{mfcc_lite, FeatureConfig};
use crate::scoring::rank_order;
use crate::selection::{select_budget, Budget, Candidate, Method, SelectionResult};

pub const GMM_FORMAT: &str = "clrsel-gmm";
pub const GMM_VERSION: u32 = 1;
pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEGENERATE_WEIGHT: f64 = 1e-8;
/// Method label used in every LL report.
pub const LL_LABEL: &str = "LL (approx.)";

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub components: usize,
    pub max_iterations: usize,
    /// Stop when the per-frame log-likelihood gain drops below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            components: 8,
            max_iterations: 20,
            tolerance: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGmm {
    pub weights: Array1<f64>,
    pub means: Array2<f64>,
    pub variances: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Total log-likelihood of the training frames before the first
    /// update and after every iteration.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// (iteration, component) for every degenerate-component reset.
    pub resets: Vec<(usize, usize)>,
}

impl DiagGmm {
    pub fn new(weights: Array1<f64>, means: Array2<f64>, variances: Array2<f64>) -> Result<Self> {
        let m = weights.len();
        if m == 0 || means.nrows() != m || variances.dim() != means.dim() {
            return Err(Error::Validation(format!(
                "inconsistent GMM shapes: {m} weights, means {:?}, variances {:?}",
                means.dim(),
                variances.dim()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::Validation("GMM weights must be non-negative and sum to 1".into()));
        }
        Ok(Self {
            weights,
            means,
            variances: variances.mapv(|v| v.max(VARIANCE_FLOOR)),
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// `log w_m + log N(x; μ_m, σ²_m)` for every component.
    fn component_log_densities(&self, x: ArrayView1<f64>, out: &mut [f64]) {
        let d = self.dim() as f64;
        for (m, slot) in out.iter_mut().enumerate() {
            let mut quad = 0.0;
            let mut log_det = 0.0;
            for ((&xi, &mu), &var) in x.iter().zip(self.means.row(m)).zip(self.variances.row(m)) {
                quad += (xi - mu) * (xi - mu) / var;
                log_det += var.ln();
            }
            *slot = self.weights[m].ln() - 0.5 * (d * LN_2PI + log_det + quad);
        }
    }

    /// `log Σ_m w_m N(x; μ_m, σ²_m)`.
    pub fn log_density(&self, x: ArrayView1<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let mut buf = vec![0.0; self.components()];
        self.component_log_densities(x, &mut buf);
        Ok(log_sum_exp(&buf))
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean frame log-likelihood of one utterance.
pub fn gmm_score(gmm: &DiagGmm, frames: ArrayView2<f64>) -> Result<f64> {
    if frames.ncols() != gmm.dim() {
        return Err(Error::DimMismatch {
            expected: gmm.dim(),
            got: frames.ncols(),
        });
    }
    if frames.nrows() == 0 {
        return Err(Error::EmptyFeature { len: 0, frame_len: 1 });
    }
    let mut buf = vec![0.0; gmm.components()];
    let mut total = 0.0;
    for x in frames.outer_iter() {
        gmm.component_log_densities(x, &mut buf);
        total += log_sum_exp(&buf);
    }
    Ok(total / frames.nrows() as f64)
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first center uniform, the rest drawn with
/// probability proportional to squared distance from the nearest center.
fn kmeans_pp(frames: ArrayView2<f64>, m: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = frames.nrows();
    let mut centers = Array2::zeros((m, frames.ncols()));
    centers.row_mut(0).assign(&frames.row(rng.gen_range(0..n)));
    let mut nearest: Vec<f64> = frames.outer_iter().map(|x| sq_dist(x, centers.row(0))).collect();
    for c in 1..m {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centers.row_mut(c).assign(&frames.row(pick));
        for (i, x) in frames.outer_iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(x, centers.row(c)));
        }
    }
    centers
}

/// E-step: responsibilities (in place) and total log-likelihood.
fn e_step(gmm: &DiagGmm, frames: ArrayView2<f64>, resp: &mut Array2<f64>) -> f64 {
    let mut total = 0.0;
    let mut buf = vec![0.0; gmm.components()];
    for (x, mut r) in frames.outer_iter().zip(resp.outer_iter_mut()) {
        gmm.component_log_densities(x, &mut buf);
        let lse = log_sum_exp(&buf);
        total += lse;
        for (ri, &b) in r.iter_mut().zip(&buf) {
            *ri = (b - lse).exp();
        }
    }
    total
}

/// Fit an `M`-component diagonal GMM to the rows of `frames`.
pub fn gmm_fit(frames: ArrayView2<f64>, config: &EmConfig) -> Result<(DiagGmm, FitReport)> {
    let m = config.components;
    let (n, d) = frames.dim();
    if m == 0 || config.max_iterations == 0 {
        return Err(Error::Config("GMM needs at least one component and one iteration".into()));
    }
    if n < 10 * m {
        return Err(Error::UnusableCorpus(format!(
            "{n} frames is too few for {m} components (need at least {})",
            10 * m
        )));
    }
    if d == 0 {
        return Err(Error::Validation("zero-dimensional features".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let global_var = frames.var_axis(Axis(0), 0.0).mapv(|v| v.max(VARIANCE_FLOOR));
    let mut gmm = DiagGmm {
        weights: Array1::from_elem(m, 1.0 / m as f64),
        means: kmeans_pp(frames, m, &mut rng),
        variances: Array2::from_shape_fn((m, d), |(_, j)| global_var[j]),
    };

    let mut resp = Array2::zeros((n, m));
    let mut ll = e_step(&gmm, frames, &mut resp);
    let mut report = FitReport {
        log_likelihood: vec![ll],
        iterations: 0,
        converged: false,
        resets: Vec::new(),
    };
    for iter in 1..=config.max_iterations {
        let counts = resp.sum_axis(Axis(0));
        for k in 0..m {
            let weight = counts[k] / n as f64;
            if weight < DEGENERATE_WEIGHT {
                let row = rng.gen_range(0..n);
                warn!("GMM component {k} degenerate at iteration {iter}; reset to frame {row}");
                report.resets.push((iter, k));
                gmm.means.row_mut(k).assign(&frames.row(row));
                gmm.variances.row_mut(k).assign(&global_var);
                gmm.weights[k] = DEGENERATE_WEIGHT;
                continue;
            }
            gmm.weights[k] = weight;
            let r = resp.column(k);
            let mean = r.dot(&frames) / counts[k];
            let mut var = Array1::zeros(d);
            for (x, &rk) in frames.outer_iter().zip(r) {
                for j in 0..d {
                    let dx = x[j] - mean[j];
                    var[j] += rk * dx * dx;
                }
            }
            var.mapv_inplace(|v: f64| (v / counts[k]).max(VARIANCE_FLOOR));
            gmm.means.row_mut(k).assign(&mean);
            gmm.variances.row_mut(k).assign(&var);
        }
        let total_w = gmm.weights.sum();
        gmm.weights /= total_w;

        let next = e_step(&gmm, frames, &mut resp);
        report.log_likelihood.push(next);
        report.iterations = iter;
        let gain = (next - ll) / n as f64;
        ll = next;
        if gain < config.tolerance {
            report.converged = true;
            break;
        }
    }
    info!(
        "GMM fit: {m} components, {} iterations, mean frame log-likelihood {:.4}",
        report.iterations,
        ll / n as f64
    );
    Ok((gmm, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlScore {
    pub utterance_id: String,
    pub mean_log_likelihood: f64,
    pub frames: usize,
    pub duration_s: f64,
    pub domain: Option<String>,
}

impl Candidate for LlScore {
    fn id(&self) -> &str {
        &self.utterance_id
    }
    fn score(&self) -> f64 {
        self.mean_log_likelihood
    }
    fn duration_s(&self) -> f64 {
        self.duration_s
    }
    fn domain(&self) -> Option<&str> {
        self.domain.as_deref()
    }
}

/// Concatenate MFCC frames of every utterance long enough to produce one.
pub fn stack_features(utterances: &[Utterance], config: &FeatureConfig) -> Result<Array2<f64>> {
    let mut blocks = Vec::new();
    for u in utterances {
        match mfcc_lite(u, config) {
            Ok(f) => blocks.push(f.frames),
            Err(Error::EmptyFeature { .. }) => warn!("{}: too short for one feature frame, skipped", u.id),
            Err(e) => return Err(e),
        }
    }
    if blocks.is_empty() {
        return Err(Error::UnusableCorpus("no utterance produced feature frames".into()));
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Validation(e.to_string()))
}

/// Score every utterance; those too short for one frame are returned
/// separately.
pub fn score_utterances(
    gmm: &DiagGmm,
    utterances: &[Utterance],
    config: &FeatureConfig,
    manifest: &Manifest,
) -> Result<(Vec<LlScore>, Vec<String>)> {
    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    for u in utterances {
        let feats = match mfcc_lite(u, config) {
            Ok(f) => f,
            Err(Error::EmptyFeature { .. }) => {
                skipped.push(u.id.clone());
                continue;
            }
            Err(e) => return Err(e),
        };
        let entry = manifest.entries.iter().find(|e| e.id == u.id);
        scores.push(LlScore {
            utterance_id: u.id.clone(),
            mean_log_likelihood: gmm_score(gmm, feats.frames.view())?,
            frames: feats.frames.nrows(),
            duration_s: entry.map_or_else(|| u.duration_s(), |e| e.duration_s),
            domain: entry.and_then(|e| e.domain.clone()).or_else(|| u.domain.clone()),
        });
    }
    scores.sort_by(|a, b| {
        rank_order(
            (a.mean_log_likelihood, &a.utterance_id),
            (b.mean_log_likelihood, &b.utterance_id),
        )
    });
    Ok((scores, skipped))
}

pub fn select_by_ll(scores: &[LlScore], budget: Budget) -> Result<SelectionResult> {
    select_budget(scores, budget, Method::Ll)
}

pub const LL_TSV_HEADER: &str = "utterance_id\tduration_s\tframes\tmean_log_likelihood\tdomain";

pub fn ll_table_tsv(scores: &[LlScore]) -> String {
    let mut out = format!("{LL_TSV_HEADER}\n");
    for s in scores {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            s.utterance_id,
            s.duration_s,
            s.frames,
            s.mean_log_likelihood,
            s.domain.as_deref().unwrap_or("")
        );
    }
    out
}

pub fn parse_ll_table(text: &str) -> Result<Vec<LlScore>> {
    let mut lines = text.lines();
    if lines.next() != Some(LL_TSV_HEADER) {
        return Err(Error::Parse {
            path: "LL table".into(),
            line: 1,
            message: "unexpected header".into(),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |m: String| Error::Parse {
            path: "LL table".into(),
            line: i + 2,
            message: m,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(err("expected 5 tab-separated columns".into()));
        }
        out.push(LlScore {
            utterance_id: cols[0].into(),
            duration_s: cols[1].parse().map_err(|e| err(format!("{e}")))?,
            frames: cols[2].parse().map_err(|e| err(format!("{e}")))?,
            mean_log_likelihood: cols[3].parse().map_err(|e| err(format!("{e}")))?,
            domain: (!cols[4].is_empty()).then(|| cols[4].to_string()),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GmmHeader {
    format: String,
    version: u32,
    components: usize,
    dim: usize,
    features: FeatureConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn save_gmm(path: &Path, gmm: &DiagGmm, features: &FeatureConfig, meta: serde_json::Value) -> Result<()> {
    let header = GmmHeader {
        format: GMM_FORMAT.into(),
        version: GMM_VERSION,
        components: gmm.components(),
        dim: gmm.dim(),
        features: features.clone(),
        meta,
    };
    let blocks: Vec<Vec<f32>> = [gmm.weights.view().into_dyn(), gmm.means.view().into_dyn(), gmm.variances.view().into_dyn()]
        .iter()
        .map(|a| a.iter().map(|&v| v as f32).collect())
        .collect();
    write_envelope(path, &header, blocks.iter().map(Vec::as_slice))
}

pub fn load_gmm(path: &Path) -> Result<(DiagGmm, FeatureConfig, serde_json::Value)> {
    let (h, payload): (GmmHeader, Vec<f32>) = read_envelope(path, GMM_FORMAT, GMM_VERSION)?;
    let (m, d) = (h.components, h.dim);
    if m == 0 || payload.len() != m + 2 * m * d {
        return Err(Error::Format(format!(
            "{}: expected {} values for {m} components of dimension {d}, found {}",
            path.display(),
            m + 2 * m * d,
            payload.len()
        )));
    }
    let v: Vec<f64> = payload.into_iter().map(f64::from).collect();
    let mut weights = Array1::from(v[..m].to_vec());
    weights /= weights.sum();
    let means = Array2::from_shape_vec((m, d), v[m..m + m * d].to_vec()).expect("sized above");
    let variances = Array2::from_shape_vec((m, d), v[m + m * d..].to_vec()).expect("sized above");
    Ok((DiagGmm::new(weights, means, variances)?, h.features, h.meta))
}
