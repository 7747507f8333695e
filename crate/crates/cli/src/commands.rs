use std::path::{Path, PathBuf};

use clrsel_core::corpus::{encode_wav, load_manifest, load_utterances, synth_corpus, Manifest, SynthSpec, Utterance};
use clrsel_core::cpc::{load_checkpoint, save_checkpoint, CpcModel};
use clrsel_core::gmm::{
    gmm_fit, ll_table_tsv, parse_ll_table, save_gmm, score_utterances, select_by_ll, stack_features, LlScore, LL_LABEL,
};
use clrsel_core::scoring::{build_score_table, domain_totals, Provenance, ScoreTable};
use clrsel_core::selection::{
    filter_random, grid_search, render_grid, select_budget, Budget, CompositionTable, Method, SelectionResult,
};
use clrsel_core::trainer::{evaluate_frame_losses, train};
use clrsel_core::Error;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{json_diff, RunConfig};
use crate::output::Outputs;

type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Target,
    Pool,
}

impl Dataset {
    fn name(self) -> &'static str {
        match self {
            Dataset::Target => "target",
            Dataset::Pool => "pool",
        }
    }
}

pub struct Ctx {
    pub config: RunConfig,
    pub hash: String,
    pub force: bool,
}

impl Ctx {
    pub fn new(config: RunConfig, force: bool) -> Self {
        Self { hash: config.hash(), config, force }
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.config.workdir.join(name)
    }

    fn checkpoint_path(&self, d: Dataset) -> PathBuf {
        self.dir("checkpoints").join(format!("{}.ckpt", d.name()))
    }

    fn table_paths(&self, method: Method) -> (PathBuf, PathBuf) {
        let stem = match method {
            Method::Ll => "ll",
            _ => "clr",
        };
        (self.dir("scores").join(format!("{stem}.tsv")), self.dir("scores").join(format!("{stem}.json")))
    }

    fn selection_stem(&self, method: Method, budget: &str) -> PathBuf {
        let label: String = budget
            .chars()
            .map(|c| match c {
                '%' => 'p',
                c if c.is_ascii_alphanumeric() || c == '.' => c,
                _ => '_',
            })
            .collect();
        self.dir("selections").join(format!("{}-{label}", method.to_string().to_lowercase()))
    }

    fn manifest(&self, d: Dataset) -> Result<(Manifest, PathBuf)> {
        let path = match d {
            Dataset::Target => &self.config.paths.target_manifest,
            Dataset::Pool => &self.config.paths.pool_manifest,
        };
        if !path.exists() {
            return Err(Error::Config(format!(
                "{} manifest {} not found; run `clrsel synth` or point paths.{}_manifest at an existing manifest",
                d.name(),
                path.display(),
                d.name()
            )));
        }
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((load_manifest(path)?, base))
    }

    fn utterances(&self, d: Dataset) -> Result<(Vec<Utterance>, Manifest)> {
        let (m, base) = self.manifest(d)?;
        Ok((load_utterances(&m, &base)?, m))
    }

    fn stamp(&self, command: &str) -> Value {
        json!({ "command": command, "config_hash": self.hash })
    }
}

fn missing(path: &Path, producer: &str) -> Error {
    Error::Config(format!("{} not found; produce it with `clrsel {producer}`", path.display()))
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(missing(path, producer))
    }
}

fn pretty(v: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

pub fn synth(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let s = &ctx.config.synth;
    let pool_spec = SynthSpec::new(s.domains, s.utterances_per_domain, s.duration_range_s, s.seed);
    let domain = pool_spec
        .domains
        .iter()
        .find(|d| d.name == s.target_domain)
        .cloned()
        .ok_or_else(|| {
            Error::Config(format!(
                "synth.target_domain {:?} is not one of the {} generated domains",
                s.target_domain, s.domains
            ))
        })?;
    let mut target_spec = pool_spec.clone();
    target_spec.domains = vec![domain];
    target_spec.utterances_per_domain = s.target_utterances;
    target_spec.seed = s.seed.wrapping_add(0x5eed);
    target_spec.id_prefix = "tgt-".into();

    let mut out = Outputs::default();
    for (spec, manifest_path) in [
        (&pool_spec, &ctx.config.paths.pool_manifest),
        (&target_spec, &ctx.config.paths.target_manifest),
    ] {
        let (utts, manifest) = synth_corpus(spec)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let audio_dir = manifest_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "audio".into());
        let mut entries = manifest.entries;
        for (e, u) in entries.iter_mut().zip(&utts) {
            e.path = Path::new(&audio_dir).join(&e.path);
            out.add(base.join(&e.path), encode_wav(u)?);
        }
        out.add(manifest_path.clone(), Manifest::new(entries)?.to_jsonl()?);
        info!("synthesized {} utterances for {}", utts.len(), manifest_path.display());
    }
    let record = json!({
        "meta": ctx.stamp("synth"),
        "pool": pool_spec,
        "target": target_spec,
    });
    out.add(ctx.dir("synth.json"), pretty(&record)?);
    out.commit(ctx.force)
}

pub fn train_cmd(ctx: &Ctx, dataset: Dataset) -> Result<Vec<PathBuf>> {
    let (utts, _) = ctx.utterances(dataset)?;
    info!("training the {} model on {} utterances", dataset.name(), utts.len());
    let (model, report) = train(&utts, &ctx.config.cpc, &ctx.config.train)?;
    let mut meta = ctx.stamp("train");
    meta["dataset"] = json!(dataset.name());
    meta["train"] = serde_json::to_value(&ctx.config.train)?;
    meta["best_epoch"] = json!(report.best_epoch);
    meta["best_validation_loss"] = json!(report.best_validation_loss);

    let path = ctx.checkpoint_path(dataset);
    std::fs::create_dir_all(ctx.dir("checkpoints")).map_err(|e| Error::Io { path: ctx.dir("checkpoints"), source: e })?;
    let scratch = path.with_extension("scratch");
    save_checkpoint(&scratch, &model, meta.clone())?;
    let bytes = std::fs::read(&scratch).map_err(|e| Error::Io { path: scratch.clone(), source: e })?;
    let _ = std::fs::remove_file(&scratch);

    let mut out = Outputs::default();
    out.add(path.clone(), bytes);
    out.add(
        path.with_extension("report.json"),
        pretty(&json!({ "meta": meta, "report": report }))?,
    );
    out.commit(ctx.force)
}

/// Load a checkpoint and refuse it if it was trained under a different
/// model configuration than the current one.
fn load_compatible(ctx: &Ctx, dataset: Dataset) -> Result<(CpcModel<f32>, Value)> {
    let path = ctx.checkpoint_path(dataset);
    require(&path, &format!("train --dataset {}", dataset.name()))?;
    let (model, meta) = load_checkpoint(&path)?;
    let expected = serde_json::to_value(&ctx.config.cpc)?;
    let found = serde_json::to_value(model.config())?;
    let diff = json_diff(&expected, &found);
    if !diff.is_empty() {
        return Err(Error::Format(format!(
            "{} was trained with a different model configuration:\n  {}",
            path.display(),
            diff.join("\n  ")
        )));
    }
    Ok((model, meta))
}

pub fn score(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let (target, _) = load_compatible(ctx, Dataset::Target)?;
    let (pool_model, _) = load_compatible(ctx, Dataset::Pool)?;
    let (pool, manifest) = ctx.utterances(Dataset::Pool)?;
    let eval_seed = ctx.config.train.eval_seed;
    let p = evaluate_frame_losses(&pool_model, &pool, eval_seed)?;
    let t = evaluate_frame_losses(&target, &pool, eval_seed)?;
    for id in &p.skipped {
        warn!("{id}: too short to score, excluded");
    }
    let provenance = Provenance {
        pool_checkpoint: ctx.checkpoint_path(Dataset::Pool).display().to_string(),
        target_checkpoint: ctx.checkpoint_path(Dataset::Target).display().to_string(),
    };
    let (mut table, exclusions) = build_score_table(&p.traces, &t.traces, ctx.config.selection.alpha, &manifest, provenance)?;
    // paths differ between workdirs; keep the table content-addressed
    table.provenance = Provenance {
        pool_checkpoint: "checkpoints/pool.ckpt".into(),
        target_checkpoint: "checkpoints/target.ckpt".into(),
    };
    let mut side = table.sidecar();
    let mut meta = ctx.stamp("score");
    meta["skipped"] = json!(p.skipped);
    meta["exclusions"] = serde_json::to_value(&exclusions)?;
    meta["domains"] = serde_json::to_value(domain_totals(&table))?;
    side.meta = meta;

    let (tsv, json_path) = ctx.table_paths(Method::Clr);
    let mut out = Outputs::default();
    out.add(tsv, table.to_tsv());
    out.add(json_path, pretty(&side)?);
    out.commit(ctx.force)
}

enum Table {
    Clr(ScoreTable),
    Ll(Vec<LlScore>),
}

fn read_table(ctx: &Ctx, method: Method) -> Result<Table> {
    let (tsv, side) = ctx.table_paths(method);
    match method {
        Method::Ll => {
            require(&tsv, "baseline")?;
            let text = std::fs::read_to_string(&tsv).map_err(|e| Error::Io { path: tsv.clone(), source: e })?;
            Ok(Table::Ll(parse_ll_table(&text)?))
        }
        _ => {
            require(&tsv, "score")?;
            require(&side, "score")?;
            Ok(Table::Clr(ScoreTable::read(&tsv, &side)?.0))
        }
    }
}

#[derive(Serialize)]
struct SelectionFile<'a> {
    meta: Value,
    budget: &'a str,
    label: String,
    #[serde(flatten)]
    result: &'a SelectionResult,
}

fn selection_outputs(ctx: &Ctx, out: &mut Outputs, result: &SelectionResult, budget: &str) -> Result<()> {
    let stem = ctx.selection_stem(result.method, budget);
    let label = match result.method {
        Method::Ll => LL_LABEL.to_string(),
        m => m.to_string(),
    };
    let file = SelectionFile {
        meta: ctx.stamp("select"),
        budget,
        label,
        result,
    };
    out.add(stem.with_extension("json"), pretty(&file)?);
    out.add(stem.with_extension("ids"), result.id_list());
    Ok(())
}

fn warn_if_exhausted(result: &SelectionResult, budget: &str) {
    if result.budget_exceeds_pool {
        warn!(
            "budget {budget} covers the whole pool; all {} utterances selected",
            result.len()
        );
    }
}

pub fn select(ctx: &Ctx, budget: &str, method: Method) -> Result<Vec<PathBuf>> {
    let parsed: Budget = budget.parse()?;
    let result = match (read_table(ctx, method)?, method) {
        (Table::Ll(scores), _) => select_by_ll(&scores, parsed)?,
        (Table::Clr(t), Method::Random) => {
            let fraction = match parsed {
                Budget::Fraction(f) => f,
                _ => return Err(Error::Config("random selection takes a fraction budget".into())),
            };
            filter_random(&t.scores, fraction, ctx.config.selection.random_seed)?
        }
        (Table::Clr(t), Method::Cl) => clrsel_core::selection::filter_cl(
            &t,
            match parsed {
                Budget::Fraction(f) => f,
                _ => return Err(Error::Config("CL selection takes a fraction budget".into())),
            },
        )?,
        (Table::Clr(t), _) => select_budget(&t.scores, parsed, Method::Clr)?,
    };
    warn_if_exhausted(&result, budget);
    info!(
        "{}: {} utterances, {:.1} s, objective {:.4}",
        result.method,
        result.len(),
        result.total_duration_s,
        result.objective
    );
    let mut out = Outputs::default();
    selection_outputs(ctx, &mut out, &result, budget)?;
    out.commit(ctx.force)
}

pub fn filter(ctx: &Ctx, method: Method, fractions: Option<Vec<f64>>) -> Result<Vec<PathBuf>> {
    let fractions = fractions.unwrap_or_else(|| ctx.config.selection.grid.clone());
    let Table::Clr(table) = read_table(ctx, Method::Clr)? else {
        unreachable!("CLR tables only")
    };
    let results = grid_search(&table, &fractions, method)?;
    let domains: Vec<String> = domain_totals(&table).into_keys().collect();
    let (tsv, text) = render_grid(&results, &domains);
    let stem = ctx.dir("filter").join(format!("grid-{}", method.to_string().to_lowercase()));
    let record = json!({
        "meta": ctx.stamp("filter"),
        "method": method,
        "results": results.iter().map(|(f, r)| json!({"fraction": f, "selection": r})).collect::<Vec<_>>(),
    });
    let mut out = Outputs::default();
    out.add(stem.with_extension("tsv"), tsv);
    out.add(stem.with_extension("txt"), format!("# config {}\n{text}", ctx.hash));
    out.add(stem.with_extension("json"), pretty(&record)?);
    out.commit(ctx.force)
}

pub fn baseline(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let (target, _) = ctx.utterances(Dataset::Target)?;
    let (pool, manifest) = ctx.utterances(Dataset::Pool)?;
    let feats = stack_features(&target, &ctx.config.features)?;
    let (gmm, report) = gmm_fit(feats.view(), &ctx.config.gmm)?;
    let (scores, skipped) = score_utterances(&gmm, &pool, &ctx.config.features, &manifest)?;
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    let mut meta = ctx.stamp("baseline");
    meta["fit"] = serde_json::to_value(&report)?;

    let ckpt = ctx.dir("baseline").join("gmm.ckpt");
    std::fs::create_dir_all(ctx.dir("baseline")).map_err(|e| Error::Io { path: ctx.dir("baseline"), source: e })?;
    let scratch = ckpt.with_extension("scratch");
    save_gmm(&scratch, &gmm, &ctx.config.features, meta.clone())?;
    let bytes = std::fs::read(&scratch).map_err(|e| Error::Io { path: scratch.clone(), source: e })?;
    let _ = std::fs::remove_file(&scratch);

    let (tsv, side) = ctx.table_paths(Method::Ll);
    let sidecar = json!({
        "method": LL_LABEL,
        "rows": scores.len(),
        "skipped": skipped,
        "meta": meta,
    });
    let mut out = Outputs::default();
    out.add(ckpt, bytes);
    out.add(tsv, ll_table_tsv(&scores));
    out.add(side, pretty(&sidecar)?);
    for budget in &ctx.config.selection.budgets {
        let result = select_by_ll(&scores, budget.parse()?)?;
        warn_if_exhausted(&result, budget);
        selection_outputs(ctx, &mut out, &result, budget)?;
    }
    out.commit(ctx.force)
}

fn read_selection(ctx: &Ctx, method: Method, budget: &str) -> Result<SelectionResult> {
    let path = ctx.selection_stem(method, budget).with_extension("json");
    let producer = match method {
        Method::Ll => "baseline".to_string(),
        m => format!("select --method {} --budget {budget}", m.to_string().to_lowercase()),
    };
    require(&path, &producer)?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn report(ctx: &Ctx, budgets: Option<Vec<String>>, methods: (Method, Method)) -> Result<Vec<PathBuf>> {
    let budgets = budgets.unwrap_or_else(|| ctx.config.selection.budgets.clone());
    if budgets.is_empty() {
        return Err(Error::Config("report needs at least one budget".into()));
    }
    let (manifest, _) = ctx.manifest(Dataset::Pool)?;
    let mut columns = Vec::new();
    for b in &budgets {
        columns.push((b.clone(), read_selection(ctx, methods.0, b)?, read_selection(ctx, methods.1, b)?));
    }
    let refs: Vec<(String, &SelectionResult, &SelectionResult)> =
        columns.iter().map(|(b, x, y)| (b.clone(), x, y)).collect();
    let target = ctx.config.synth.target_domain.clone();
    let mut table = CompositionTable::compare(&target, &refs, &manifest);
    if methods.1 == Method::Ll {
        table.methods.1 = LL_LABEL.into();
    }
    let stem = ctx.dir("reports").join("composition");
    let mut out = Outputs::default();
    out.add(stem.with_extension("tsv"), table.to_tsv());
    out.add(stem.with_extension("txt"), format!("# config {}\n{}", ctx.hash, table.to_text()));
    out.add(
        stem.with_extension("json"),
        pretty(&json!({ "meta": ctx.stamp("report"), "budgets": budgets, "methods": [methods.0, methods.1] }))?,
    );
    print!("{}", table.to_text());
    out.commit(ctx.force)
}
