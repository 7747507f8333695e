//! Contrastive loss ratios and the modular set function built from them.
//!
//! For an utterance with per-frame losses `p_t` under the pool model and
//! `q_t` under the target model,
//!
//! ```text
//! LR(u) = (1/T) Σ_t (p_t + α) / (q_t + α)
//! ```
//!
//! Higher is a better match to the target set. `f_lr(S) = Σ_{u ∈ S} LR(u)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Manifest;
use crate::cpc::FrameLossTrace;
use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 1.0;

pub fn loss_ratio(pool: &FrameLossTrace, target: &FrameLossTrace, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be a positive number, got {alpha}")));
    }
    if pool.utterance_id != target.utterance_id || pool.losses.len() != target.losses.len() {
        return Err(Error::TraceMismatch {
            id: format!("{} / {}", pool.utterance_id, target.utterance_id),
            pool: pool.losses.len(),
            target: target.losses.len(),
        });
    }
    if pool.losses.is_empty() {
        return Err(Error::Validation(format!("{}: empty loss trace", pool.utterance_id)));
    }
    let sum: f64 = pool
        .losses
        .iter()
        .zip(&target.losses)
        .map(|(p, q)| (p + alpha) / (q + alpha))
        .sum();
    Ok(sum / pool.losses.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub utterance_id: String,
    pub mean_pool_loss: f64,
    pub mean_target_loss: f64,
    pub lr: f64,
    pub duration_s: f64,
    pub domain: Option<String>,
}

/// Sum of loss ratios over a subset; zero for the empty set.
pub fn f_lr<'a>(subset: impl IntoIterator<Item = &'a UtteranceScore>) -> f64 {
    subset.into_iter().map(|s| s.lr).sum()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub pool_checkpoint: String,
    pub target_checkpoint: String,
}

/// Scores sorted by descending `lr`, ties by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub scores: Vec<UtteranceScore>,
    pub alpha: f64,
    pub provenance: Provenance,
}

/// Utterances that could not be scored because only one model produced a
/// trace for them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Exclusions {
    pub pool_only: Vec<String>,
    pub target_only: Vec<String>,
}

impl Exclusions {
    pub fn is_empty(&self) -> bool {
        self.pool_only.is_empty() && self.target_only.is_empty()
    }
}

/// Descending score, then ascending id.
pub fn rank_order(a: (f64, &str), b: (f64, &str)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

impl ScoreTable {
    pub fn new(mut scores: Vec<UtteranceScore>, alpha: f64, provenance: Provenance) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &scores {
            if !seen.insert(s.utterance_id.as_str()) {
                return Err(Error::Validation(format!("duplicate score for {:?}", s.utterance_id)));
            }
        }
        scores.sort_by(|a, b| rank_order((a.lr, &a.utterance_id), (b.lr, &b.utterance_id)));
        Ok(Self {
            scores,
            alpha,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&UtteranceScore> {
        self.scores.iter().find(|s| s.utterance_id == id)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("utterance_id\tduration_s\tmean_pool_loss\tmean_target_loss\tlr\tdomain\n");
        for s in &self.scores {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                s.utterance_id,
                s.duration_s,
                s.mean_pool_loss,
                s.mean_target_loss,
                s.lr,
                s.domain.as_deref().unwrap_or("")
            );
        }
        out
    }

    pub fn sidecar(&self) -> TableSidecar {
        TableSidecar {
            method: "CLR".into(),
            alpha: Some(self.alpha),
            provenance: self.provenance.clone(),
            rows: self.len(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn from_tsv(text: &str, sidecar: &TableSidecar) -> Result<Self> {
        let alpha = sidecar
            .alpha
            .ok_or_else(|| Error::Validation("score table sidecar has no alpha".into()))?;
        let mut scores = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let parse_err = |what: &str| Error::Parse {
                path: "score table".into(),
                line: i + 1,
                message: what.to_string(),
            };
            if cols.len() != 6 {
                return Err(parse_err("expected 6 tab-separated columns"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(&e.to_string()));
            scores.push(UtteranceScore {
                utterance_id: cols[0].to_string(),
                duration_s: num(cols[1])?,
                mean_pool_loss: num(cols[2])?,
                mean_target_loss: num(cols[3])?,
                lr: num(cols[4])?,
                domain: (!cols[5].is_empty()).then(|| cols[5].to_string()),
            });
        }
        Self::new(scores, alpha, sidecar.provenance.clone())
    }

    /// Write `<stem>.tsv` and `<stem>.json`.
    pub fn write(&self, tsv: &Path, sidecar_path: &Path, meta: serde_json::Value) -> Result<()> {
        let mut side = self.sidecar();
        side.meta = meta;
        std::fs::write(tsv, self.to_tsv()).map_err(|e| Error::io(tsv, e))?;
        std::fs::write(sidecar_path, serde_json::to_string_pretty(&side)? + "\n")
            .map_err(|e| Error::io(sidecar_path, e))
    }

    pub fn read(tsv: &Path, sidecar_path: &Path) -> Result<(Self, TableSidecar)> {
        let text = std::fs::read_to_string(tsv).map_err(|e| Error::io(tsv, e))?;
        let side: TableSidecar = serde_json::from_str(
            &std::fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?,
        )?;
        Ok((Self::from_tsv(&text, &side)?, side))
    }
}

/// JSON written next to every score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSidecar {
    pub method: String,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub provenance: Provenance,
    pub rows: usize,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Pair pool and target traces by id and compute one score per utterance
/// present in both. Durations and domains come from `manifest`.
pub fn build_score_table(
    pool: &[FrameLossTrace],
    target: &[FrameLossTrace],
    alpha: f64,
    manifest: &Manifest,
    provenance: Provenance,
) -> Result<(ScoreTable, Exclusions)> {
    let target_by_id: HashMap<&str, &FrameLossTrace> =
        target.iter().map(|t| (t.utterance_id.as_str(), t)).collect();
    let pool_ids: BTreeSet<&str> = pool.iter().map(|t| t.utterance_id.as_str()).collect();
    let entries: HashMap<&str, _> = manifest.entries.iter().map(|e| (e.id.as_str(), e)).collect();

    let mut exclusions = Exclusions::default();
    let mut scores = Vec::new();
    for p in pool {
        let Some(t) = target_by_id.get(p.utterance_id.as_str()) else {
            exclusions.pool_only.push(p.utterance_id.clone());
            continue;
        };
        let entry = entries.get(p.utterance_id.as_str()).ok_or_else(|| {
            Error::Validation(format!("{} is not in the manifest", p.utterance_id))
        })?;
        scores.push(UtteranceScore {
            utterance_id: p.utterance_id.clone(),
            mean_pool_loss: p.mean(),
            mean_target_loss: t.mean(),
            lr: loss_ratio(p, t, alpha)?,
            duration_s: entry.duration_s,
            domain: entry.domain.clone(),
        });
    }
    exclusions.target_only = target
        .iter()
        .map(|t| t.utterance_id.as_str())
        .filter(|id| !pool_ids.contains(id))
        .map(str::to_string)
        .collect();
    exclusions.pool_only.sort();
    exclusions.target_only.sort();
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    Ok((ScoreTable::new(scores, alpha, provenance)?, exclusions))
}

/// Per-domain totals of a table, for reports.
pub fn domain_totals(table: &ScoreTable) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for s in &table.scores {
        *out.entry(s.domain.clone().unwrap_or_else(|| "unknown".into()))
            .or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ManifestEntry;

    fn trace(id: &str, losses: &[f64]) -> FrameLossTrace {
        FrameLossTrace {
            utterance_id: id.into(),
            losses: losses.to_vec(),
        }
    }

    fn manifest(ids: &[&str]) -> Manifest {
        Manifest::new(
            ids.iter()
                .map(|id| ManifestEntry {
                    id: id.to_string(),
                    path: format!("{id}.wav").into(),
                    duration_s: 1.5,
                    domain: Some("A".into()),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_traces_give_one() {
        let t = trace("u", &[0.3, 2.0, 7.5]);
        for alpha in [1e-3, 1.0, 50.0] {
            assert_eq!(loss_ratio(&t, &t, alpha).unwrap(), 1.0);
        }
    }

    #[test]
    fn worked_example() {
        let lr = loss_ratio(&trace("u", &[3.0, 3.0]), &trace("u", &[1.0, 1.0]), 1.0).unwrap();
        assert_eq!(lr, 2.0);
    }

    #[test]
    fn zero_losses_are_stabilized() {
        let lr = loss_ratio(&trace("u", &[0.0, 0.0]), &trace("u", &[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(lr, 1.0);
    }

    #[test]
    fn ratio_errors() {
        let a = trace("u", &[1.0, 2.0]);
        let b = trace("u", &[1.0]);
        assert!(matches!(loss_ratio(&a, &b, 1.0), Err(Error::TraceMismatch { .. })));
        assert!(matches!(loss_ratio(&a, &a, 0.0), Err(Error::Config(_))));
        assert!(matches!(loss_ratio(&a, &a, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn f_lr_basics() {
        let s = |id: &str, lr: f64| UtteranceScore {
            utterance_id: id.into(),
            mean_pool_loss: 1.0,
            mean_target_loss: 1.0,
            lr,
            duration_s: 1.0,
            domain: None,
        };
        assert_eq!(f_lr(&[]), 0.0);
        assert_eq!(f_lr(&[s("a", 2.0)]), 2.0);
        let a = [s("a", 1.5), s("b", 2.0)];
        let b = [s("c", 1.0), s("d", 0.25)];
        assert_eq!(f_lr(&a), 3.5);
        assert_eq!(f_lr(&b), 1.25);
        assert_eq!(f_lr(a.iter().chain(&b)), 4.75);
    }

    #[test]
    fn table_from_traces() {
        let pool = vec![
            trace("u1", &[3.0, 3.0]),
            trace("u2", &[1.0, 1.0]),
            trace("u3", &[0.0, 0.0]),
            trace("only-pool", &[1.0]),
        ];
        let target = vec![
            trace("u3", &[0.0, 0.0]),
            trace("u1", &[1.0, 1.0]),
            trace("u2", &[1.0, 1.0]),
        ];
        let (table, excl) = build_score_table(
            &pool,
            &target,
            1.0,
            &manifest(&["u1", "u2", "u3", "only-pool"]),
            Provenance::default(),
        )
        .unwrap();
        assert_eq!(table.len(), 3);
        assert_eq!(excl.pool_only, vec!["only-pool".to_string()]);
        assert!(excl.target_only.is_empty());
        let ids: Vec<_> = table.scores.iter().map(|s| s.utterance_id.as_str()).collect();
        // u2 and u3 tie at 1.0 and fall back to id order
        assert_eq!(ids, ["u1", "u2", "u3"]);
        assert_eq!(table.get("u1").unwrap().lr, 2.0);
        assert_eq!(table.get("u1").unwrap().mean_pool_loss, 3.0);
    }

    #[test]
    fn disjoint_traces_are_an_error() {
        let err = build_score_table(
            &[trace("a", &[1.0])],
            &[trace("b", &[1.0])],
            1.0,
            &manifest(&["a", "b"]),
            Provenance::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyScores));
    }

    #[test]
    fn tsv_round_trip() {
        let (table, _) = build_score_table(
            &[trace("a", &[0.1, 0.7]), trace("b", &[1.0 / 3.0])],
            &[trace("a", &[0.2, 0.3]), trace("b", &[0.9])],
            0.5,
            &manifest(&["a", "b"]),
            Provenance {
                pool_checkpoint: "pool.ckpt".into(),
                target_checkpoint: "target.ckpt".into(),
            },
        )
        .unwrap();
        let back = ScoreTable::from_tsv(&table.to_tsv(), &table.sidecar()).unwrap();
        assert_eq!(back, table);
    }
}
