//! Budgeted greedy selection, negative-transfer filters and composition
//! reports.
//!
//! The objective is modular (a plain sum of per-utterance scores), so under
//! a count budget taking the top-k by score is exactly optimal. Hours
//! budgets walk the same order first-fit: an utterance that does not fit
//! is skipped and the walk continues.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Manifest;
use crate::error::{Error, Result};
use crate::scoring::{rank_order, ScoreTable, UtteranceScore};

pub const UNKNOWN_DOMAIN: &str = "unknown";
pub const BRUTE_FORCE_LIMIT: usize = 20;

/// Grid of retained fractions searched for negative-transfer filtering.
pub const DEFAULT_GRID: [f64; 4] = [0.80, 0.85, 0.90, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CLR")]
    Clr,
    #[serde(rename = "CL")]
    Cl,
    #[serde(rename = "LL")]
    Ll,
    #[serde(rename = "random")]
    Random,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Clr => "CLR",
            Method::Cl => "CL",
            Method::Ll => "LL",
            Method::Random => "random",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CLR" => Ok(Method::Clr),
            "CL" => Ok(Method::Cl),
            "LL" => Ok(Method::Ll),
            "RANDOM" => Ok(Method::Random),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Budget {
    Hours(f64),
    /// Top `floor(fraction * n)` utterances.
    Fraction(f64),
    Count(usize),
}

impl Budget {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Budget::Hours(h) if h > 0.0 && h.is_finite() => Ok(()),
            Budget::Fraction(f) if f > 0.0 && f <= 1.0 => Ok(()),
            Budget::Count(k) if k >= 1 => Ok(()),
            other => Err(Error::Config(format!("invalid budget {other:?}"))),
        }
    }
}

impl std::str::FromStr for Budget {
    type Err = Error;

    /// `2.5h`, `600s`, `85%`, `0.85` (fraction) or `120` (count).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse budget {s:?}"));
        let s = s.trim();
        let budget = if let Some(h) = s.strip_suffix('h') {
            Budget::Hours(h.parse().map_err(|_| bad())?)
        } else if let Some(sec) = s.strip_suffix('s') {
            Budget::Hours(sec.parse::<f64>().map_err(|_| bad())? / 3600.0)
        } else if let Some(p) = s.strip_suffix('%') {
            Budget::Fraction(p.parse::<f64>().map_err(|_| bad())? / 100.0)
        } else if s.contains('.') {
            Budget::Fraction(s.parse().map_err(|_| bad())?)
        } else {
            Budget::Count(s.parse().map_err(|_| bad())?)
        };
        budget.validate()?;
        Ok(budget)
    }
}

/// Anything that can be ranked and selected: an id, a score (higher is
/// better), a duration and an optional domain label.
pub trait Candidate {
    fn id(&self) -> &str;
    fn score(&self) -> f64;
    fn duration_s(&self) -> f64;
    fn domain(&self) -> Option<&str>;
}

impl Candidate for UtteranceScore {
    fn id(&self) -> &str {
        &self.utterance_id
    }
    fn score(&self) -> f64 {
        self.lr
    }
    fn duration_s(&self) -> f64 {
        self.duration_s
    }
    fn domain(&self) -> Option<&str> {
        self.domain.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: Method,
    pub selected_ids: Vec<String>,
    pub total_duration_s: f64,
    /// Sum of the selected scores (f_lr for CLR tables).
    pub objective: f64,
    pub composition: BTreeMap<String, usize>,
    /// Set when the budget covered the whole pool.
    pub budget_exceeds_pool: bool,
    /// Hours budgets: utterances passed over because they did not fit in
    /// the remaining budget at their turn.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<String>,
}

impl SelectionResult {
    fn from_picks<C: Candidate>(method: Method, picks: &[&C], exceeds: bool, skipped: Vec<String>) -> Self {
        let mut composition = BTreeMap::new();
        for c in picks {
            *composition
                .entry(c.domain().unwrap_or(UNKNOWN_DOMAIN).to_string())
                .or_insert(0) += 1;
        }
        Self {
            method,
            selected_ids: picks.iter().map(|c| c.id().to_string()).collect(),
            total_duration_s: picks.iter().map(|c| c.duration_s()).sum(),
            objective: picks.iter().map(|c| c.score()).sum(),
            composition,
            budget_exceeds_pool: exceeds,
            skipped,
        }
    }

    pub fn len(&self) -> usize {
        self.selected_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected_ids.is_empty()
    }

    /// One id per line.
    pub fn id_list(&self) -> String {
        self.selected_ids.iter().map(|id| format!("{id}\n")).collect()
    }
}

pub fn ranked<C: Candidate>(items: &[C]) -> Vec<&C> {
    let mut order: Vec<&C> = items.iter().collect();
    order.sort_by(|a, b| rank_order((a.score(), a.id()), (b.score(), b.id())));
    order
}

/// `floor(fraction * n)`, tolerant of representation error in `fraction`.
pub fn retained_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Greedy selection in descending score order under `budget`.
pub fn select_budget<C: Candidate>(items: &[C], budget: Budget, method: Method) -> Result<SelectionResult> {
    budget.validate()?;
    if items.is_empty() {
        return Err(Error::Validation("cannot select from an empty table".into()));
    }
    let order = ranked(items);
    let n = order.len();
    Ok(match budget {
        Budget::Count(k) => SelectionResult::from_picks(method, &order[..k.min(n)], k >= n, Vec::new()),
        Budget::Fraction(f) => {
            let k = retained_count(f, n);
            SelectionResult::from_picks(method, &order[..k], k == n, Vec::new())
        }
        Budget::Hours(h) => {
            let limit = h * 3600.0;
            let mut remaining = limit;
            let mut picks = Vec::new();
            let mut skipped = Vec::new();
            for c in &order {
                if c.duration_s() <= remaining {
                    remaining -= c.duration_s();
                    picks.push(*c);
                } else {
                    skipped.push(c.id().to_string());
                }
            }
            let total: f64 = items.iter().map(|c| c.duration_s()).sum();
            SelectionResult::from_picks(method, &picks, total <= limit, skipped)
        }
    })
}

/// Exhaustive maximization of the summed score over all subsets of size
/// at most `k`. Only for tables of up to [`BRUTE_FORCE_LIMIT`] items.
pub fn brute_force_select<C: Candidate>(items: &[C], k: usize, method: Method) -> Result<SelectionResult> {
    let n = items.len();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::Config(format!(
            "brute force refuses {n} items (limit {BRUTE_FORCE_LIMIT})"
        )));
    }
    let mut best_mask = 0u32;
    let mut best_value = 0.0;
    for mask in 1u32..(1 << n) {
        if mask.count_ones() as usize > k {
            continue;
        }
        let value: f64 = (0..n)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| items[i].score())
            .sum();
        if value > best_value {
            best_value = value;
            best_mask = mask;
        }
    }
    let mut picks: Vec<&C> = (0..n).filter(|i| best_mask & (1 << i) != 0).map(|i| &items[i]).collect();
    picks.sort_by(|a, b| rank_order((a.score(), a.id()), (b.score(), b.id())));
    Ok(SelectionResult::from_picks(method, &picks, k >= n, Vec::new()))
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("retained fraction must be in (0, 1], got {fraction}")))
    }
}

/// Keep the top `floor(fraction * n)` utterances by loss ratio.
pub fn filter_clr(table: &ScoreTable, fraction: f64) -> Result<SelectionResult> {
    check_fraction(fraction)?;
    select_budget(&table.scores, Budget::Fraction(fraction), Method::Clr)
}

/// Drop the `n - floor(fraction * n)` utterances with the highest mean
/// target-model loss; survivors stay in score order.
pub fn filter_cl(table: &ScoreTable, fraction: f64) -> Result<SelectionResult> {
    check_fraction(fraction)?;
    let n = table.len();
    let keep = retained_count(fraction, n);
    let mut by_loss: Vec<&UtteranceScore> = table.scores.iter().collect();
    by_loss.sort_by(|a, b| {
        b.mean_target_loss
            .total_cmp(&a.mean_target_loss)
            .then_with(|| a.utterance_id.cmp(&b.utterance_id))
    });
    let dropped: std::collections::HashSet<&str> =
        by_loss[..n - keep].iter().map(|s| s.utterance_id.as_str()).collect();
    let picks: Vec<&UtteranceScore> = ranked(&table.scores)
        .into_iter()
        .filter(|s| !dropped.contains(s.utterance_id.as_str()))
        .collect();
    Ok(SelectionResult::from_picks(Method::Cl, &picks, keep == n, Vec::new()))
}

/// Keep a uniformly random `floor(fraction * n)` subset; the control for
/// the two filters above.
pub fn filter_random<C: Candidate>(items: &[C], fraction: f64, seed: u64) -> Result<SelectionResult> {
    check_fraction(fraction)?;
    let keep = retained_count(fraction, items.len());
    let mut order = ranked(items);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut picks = order[..keep].to_vec();
    picks.sort_by(|a, b| rank_order((a.score(), a.id()), (b.score(), b.id())));
    Ok(SelectionResult::from_picks(Method::Random, &picks, keep == items.len(), Vec::new()))
}

/// One filtered result per retained fraction, in the order given.
pub fn grid_search(table: &ScoreTable, fractions: &[f64], method: Method) -> Result<Vec<(f64, SelectionResult)>> {
    if fractions.is_empty() {
        return Err(Error::Config("grid search needs at least one fraction".into()));
    }
    fractions
        .iter()
        .map(|&f| {
            let result = match method {
                Method::Clr => filter_clr(table, f)?,
                Method::Cl => filter_cl(table, f)?,
                other => {
                    return Err(Error::Config(format!("grid search supports CLR and CL, not {other}")))
                }
            };
            Ok((f, result))
        })
        .collect()
}

/// Comparison table of a grid search: one row per fraction with size,
/// duration, objective and per-domain counts.
pub fn render_grid(results: &[(f64, SelectionResult)], domains: &[String]) -> (String, String) {
    let mut header = vec![
        "fraction".to_string(),
        "method".into(),
        "selected".into(),
        "hours".into(),
        "objective".into(),
    ];
    header.extend(domains.iter().cloned());
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|(f, r)| {
            let mut row = vec![
                format!("{:.0}%", f * 100.0),
                r.method.to_string(),
                r.len().to_string(),
                format!("{:.4}", r.total_duration_s / 3600.0),
                format!("{:.6}", r.objective),
            ];
            row.extend(domains.iter().map(|d| r.composition.get(d).copied().unwrap_or(0).to_string()));
            row
        })
        .collect();
    (to_tsv(&header, &rows), align(&header, &rows))
}

/// Per-domain counts of `result`, labels taken from `manifest`. Every
/// manifest domain appears, with zero when nothing was selected from it.
pub fn composition_report(result: &SelectionResult, manifest: &Manifest) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = manifest
        .entries
        .iter()
        .map(|e| (e.domain.clone().unwrap_or_else(|| UNKNOWN_DOMAIN.into()), 0))
        .collect();
    let labels: std::collections::HashMap<&str, Option<&str>> = manifest
        .entries
        .iter()
        .map(|e| (e.id.as_str(), e.domain.as_deref()))
        .collect();
    for id in &result.selected_ids {
        let domain = labels.get(id.as_str()).copied().flatten().unwrap_or(UNKNOWN_DOMAIN);
        *counts.entry(domain.to_string()).or_insert(0) += 1;
    }
    counts
}

/// Side-by-side composition of two methods over several budgets, one row
/// per domain and one `a/b` cell per budget.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionTable {
    pub target: String,
    pub methods: (String, String),
    pub budgets: Vec<String>,
    /// domain -> one (first, second) pair per budget
    pub rows: Vec<(String, Vec<(usize, usize)>)>,
}

impl CompositionTable {
    pub fn new(
        target: &str,
        methods: (&str, &str),
        budgets: Vec<String>,
        rows: Vec<(String, Vec<(usize, usize)>)>,
    ) -> Self {
        Self {
            target: target.into(),
            methods: (methods.0.into(), methods.1.into()),
            budgets,
            rows,
        }
    }

    /// Build from `(budget label, first result, second result)` columns.
    pub fn compare(
        target: &str,
        columns: &[(String, &SelectionResult, &SelectionResult)],
        manifest: &Manifest,
    ) -> Self {
        let methods = columns
            .first()
            .map(|(_, a, b)| (a.method.to_string(), b.method.to_string()))
            .unwrap_or_default();
        let reports: Vec<_> = columns
            .iter()
            .map(|(_, a, b)| (composition_report(a, manifest), composition_report(b, manifest)))
            .collect();
        let domains: Vec<String> = reports
            .first()
            .map(|(a, _)| a.keys().cloned().collect())
            .unwrap_or_default();
        let rows = domains
            .into_iter()
            .map(|d| {
                let cells = reports
                    .iter()
                    .map(|(a, b)| (a.get(&d).copied().unwrap_or(0), b.get(&d).copied().unwrap_or(0)))
                    .collect();
                (d, cells)
            })
            .collect();
        Self {
            target: target.into(),
            methods,
            budgets: columns.iter().map(|(l, _, _)| l.clone()).collect(),
            rows,
        }
    }

    pub fn cell(&self, domain: &str, budget: usize) -> Option<String> {
        self.rows
            .iter()
            .find(|(d, _)| d == domain)
            .map(|(_, cells)| format!("{}/{}", cells[budget].0, cells[budget].1))
    }

    fn grid(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header = vec!["target".to_string()];
        header.extend(self.budgets.iter().cloned());
        header.push("selected".into());
        let rows = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, (domain, cells))| {
                let mut row = vec![if i == 0 { self.target.clone() } else { String::new() }];
                row.extend(cells.iter().map(|(a, b)| format!("{a}/{b}")));
                row.push(domain.clone());
                row
            })
            .collect();
        (header, rows)
    }

    pub fn to_tsv(&self) -> String {
        let (h, r) = self.grid();
        to_tsv(&h, &r)
    }

    pub fn to_text(&self) -> String {
        let (h, r) = self.grid();
        format!(
            "counts per domain ({}/{})\n{}",
            self.methods.0,
            self.methods.1,
            align(&h, &r)
        )
    }
}

fn to_tsv(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = header.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join("\t"));
        out.push('\n');
    }
    out
}

fn align(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: &[String], out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header, &mut out);
    let total: usize = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
    let _ = writeln!(out, "{}", "-".repeat(total));
    for r in rows {
        line(r, &mut out);
    }
    out
}
