//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr (uncaptured) and then asserts. Tests share one lock so that
//! timings are not distorted by each other on a single core.

#[path = "../../core/tests/common/mod.rs"]
#[allow(dead_code)]
mod common;

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use clrsel_core::corpus::{noise_swap, synth_corpus, SynthSpec, Utterance};
use clrsel_core::cpc::{CpcConfig, CpcModel, EncoderLayer, FrameLossTrace, NegativeSampler};
use clrsel_core::features::FeatureConfig;
use clrsel_core::gmm::{gmm_fit, gmm_score, score_utterances, select_by_ll, stack_features, DiagGmm, EmConfig};
use clrsel_core::scoring::{build_score_table, f_lr, loss_ratio, Provenance, ScoreTable, UtteranceScore};
use clrsel_core::selection::{
    brute_force_select, filter_cl, filter_clr, filter_random, grid_search, select_budget, Budget, Method,
    SelectionResult, DEFAULT_GRID,
};
use clrsel_core::trainer::{evaluate_frame_losses, run_schedule, train, EpochLosses, TrainConfig};
use common::{fd_check, random_signal, random_tiny_config, randomize_biases};
use ndarray::{array, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Print the verdict line and return whether the criterion passed,
/// runtime limit included.
fn verdict(n: u8, name: &str, ok: bool, detail: &str, start: Instant, limit_s: f64) -> bool {
    let secs = start.elapsed().as_secs_f64();
    let pass = ok && secs <= limit_s;
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n} {}: {name}: {detail} [{secs:.1}s of {limit_s:.0}s]",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn random_trace(rng: &mut ChaCha8Rng, id: &str, len: usize) -> FrameLossTrace {
    FrameLossTrace {
        utterance_id: id.into(),
        losses: (0..len).map(|_| rng.gen_range(0.01..3.0)).collect(),
    }
}

/// A table whose ratios come from random loss traces.
fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<UtteranceScore> {
    (0..n)
        .map(|i| {
            let id = format!("u{i:04}");
            let len = rng.gen_range(1..60);
            let p = random_trace(rng, &id, len);
            let q = random_trace(rng, &id, len);
            UtteranceScore {
                utterance_id: id,
                mean_pool_loss: p.mean(),
                mean_target_loss: q.mean(),
                lr: loss_ratio(&p, &q, rng.gen_range(0.1..2.0)).unwrap(),
                duration_s: rng.gen_range(0.5..4.0),
                domain: Some(["A", "B", "C", "D"][rng.gen_range(0..4)].into()),
            }
        })
        .collect()
}

#[test]
fn criterion_1_set_function_laws() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut violations = Vec::new();
    let mut worst_modularity: f64 = 0.0;
    for t in 0..1000 {
        let n = rng.gen_range(0..40);
        let mut scores = random_scores(&mut rng, n);
        if f_lr(&scores[..0]) != 0.0 {
            violations.push(format!("table {t}: f(empty) != 0"));
        }
        scores.shuffle(&mut rng);
        let cut1 = rng.gen_range(0..=n);
        let cut2 = rng.gen_range(cut1..=n);
        let (a, b) = (&scores[..cut1], &scores[cut1..cut2]);
        let union: Vec<&UtteranceScore> = a.iter().chain(b).collect();
        let (fa, fb, fu) = (f_lr(a), f_lr(b), f_lr(union.iter().copied()));
        let rel = (fu - fa - fb).abs() / fu.abs().max(f64::MIN_POSITIVE);
        if fu != 0.0 {
            worst_modularity = worst_modularity.max(rel);
        }
        if fu != 0.0 && rel > 1e-9 {
            violations.push(format!("table {t}: modularity off by {rel:e}"));
        }
        // superset = subset followed by more elements
        let superset: Vec<&UtteranceScore> = scores[..cut2].iter().chain(&scores[cut2..]).collect();
        if f_lr(&scores[..cut2]) > f_lr(superset.iter().copied()) {
            violations.push(format!("table {t}: not monotone"));
        }
        if fa < 0.0 || fb < 0.0 || fu < 0.0 {
            violations.push(format!("table {t}: negative value"));
        }
    }
    let detail = format!(
        "1000 tables, worst modularity error {worst_modularity:.1e}, {} violations",
        violations.len()
    );
    let pass = verdict(1, "set-function laws", violations.is_empty(), &detail, start, 10.0);
    assert!(pass, "{violations:?}");
}

#[test]
fn criterion_2_greedy_matches_brute_force() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = Vec::new();
    let mut worst: f64 = 0.0;
    for t in 0..200 {
        let n = rng.gen_range(1..=12);
        let scores = random_scores(&mut rng, n);
        let k = rng.gen_range(1..=n);
        let greedy = select_budget(&scores, Budget::Count(k), Method::Clr).unwrap();
        let brute = brute_force_select(&scores, k, Method::Clr).unwrap();
        let diff = (greedy.objective - brute.objective).abs();
        worst = worst.max(diff);
        if diff > 1e-12 {
            mismatches.push((t, greedy.objective, brute.objective));
        }
    }
    let detail = format!("200 tables (n <= 12), worst |greedy - brute| {worst:.1e}");
    let pass = verdict(2, "greedy optimality", mismatches.is_empty(), &detail, start, 30.0);
    assert!(pass, "{mismatches:?}");
}

#[test]
fn criterion_3_gradients_match_finite_differences() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut checked, mut one_sided, mut skipped, mut worst, mut worst_abs) = (0, 0, 0, 0.0f64, 0.0f64);
    let mut failures = Vec::new();
    let mut max_params = 0;
    for m in 0..50 {
        let cfg = random_tiny_config(&mut rng, 500);
        max_params = max_params.max(cfg.parameter_count());
        let mut model = CpcModel::<f64>::new(cfg.clone()).unwrap();
        randomize_biases(&mut model, &mut rng);
        let frames = rng.gen_range(3..12);
        let x = random_signal(&mut rng, cfg.min_input_len(frames));
        let fw = model.forward(&x).unwrap();
        let plan = model.plan(frames, &mut NegativeSampler::new(rng.gen())).unwrap();
        let (_, grads) = model.backward(&fw, &plan).unwrap();
        let r = fd_check(&model, &grads, &x, &plan);
        checked += r.checked;
        one_sided += r.one_sided;
        skipped += r.skipped;
        worst = worst.max(r.worst_rel);
        worst_abs = worst_abs.max(r.worst_abs);
        failures.extend(r.failures.into_iter().map(|f| (m, f)));
    }
    let ok = failures.is_empty() && max_params <= 500 && skipped * 100 <= checked;
    let detail = format!(
        "50 models (<= {max_params} params), {checked} parameters checked \
         ({one_sided} one-sided at ReLU kinks, {skipped} skipped), worst rel err {worst:.1e} where |g| > 1e-4, worst abs err {worst_abs:.1e}"
    );
    let pass = verdict(3, "gradient correctness", ok, &detail, start, 300.0);
    assert!(pass, "{failures:?}");
}

#[test]
fn criterion_4_loss_sanity() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let two_ln2 = 2.0 * std::f64::consts::LN_2;
    let mut worst_zero: f64 = 0.0;
    let mut problems = Vec::new();
    for i in 0..100 {
        let cfg = random_tiny_config(&mut rng, 2000);
        let mut model = CpcModel::<f64>::new(cfg.clone()).unwrap();
        randomize_biases(&mut model, &mut rng);
        let frames = rng.gen_range(2..20);
        let x = random_signal(&mut rng, cfg.min_input_len(frames));
        let out = model.evaluate(&x, &mut NegativeSampler::new(rng.gen())).unwrap();
        if !out.frame_losses.iter().all(|&l| l > 0.0 && l.is_finite()) {
            problems.push(format!("model {i}: non-positive frame loss"));
        }
        model.zero_predictors();
        let out = model.evaluate(&x, &mut NegativeSampler::new(rng.gen())).unwrap();
        for l in &out.frame_losses {
            worst_zero = worst_zero.max((l - two_ln2).abs());
        }
    }
    if worst_zero > 1e-9 {
        problems.push(format!("zero predictors off 2 ln 2 by {worst_zero:e}"));
    }
    for i in 0..100 {
        let layers: Vec<EncoderLayer> = (0..rng.gen_range(1..=4))
            .map(|_| {
                let k = rng.gen_range(1..=12);
                EncoderLayer::new(k, rng.gen_range(1..=k.min(6)), rng.gen_range(1..=3))
            })
            .collect();
        let cfg = CpcConfig {
            embed_dim: layers.last().unwrap().channels,
            encoder_layers: layers,
            aggregator_layers: 1,
            aggregator_kernel: 1,
            prediction_steps: 1,
            negatives_per_positive: 1,
            seed: i,
        };
        let len = rng.gen_range(1..3000);
        let mut expected = Some(len);
        for l in &cfg.encoder_layers {
            expected = expected.and_then(|t| (t >= l.kernel).then(|| (t - l.kernel) / l.stride + 1));
        }
        let model = CpcModel::<f64>::new(cfg.clone()).unwrap();
        let got = model.encode(&vec![0.1; len]).ok().map(|z| z.nrows());
        if got != expected || cfg.encoded_len(len) != expected {
            problems.push(format!("config {i}: length {got:?}, formula {expected:?}"));
        }
    }
    let detail = format!(
        "100 random models, max |frame loss - 2 ln 2| with zero predictors {worst_zero:.1e}, 100 length checks, {} problems",
        problems.len()
    );
    let pass = verdict(4, "loss sanity", problems.is_empty(), &detail, start, 30.0);
    assert!(pass, "{problems:?}");
}

#[test]
fn criterion_5_training_viability() {
    let _g = serial();
    let start = Instant::now();
    let (utts, _) = synth_corpus(&SynthSpec::new(4, 50, (1.0, 4.0), 5)).unwrap();
    let cfg = CpcConfig { seed: 5, ..CpcConfig::default() };
    let tc = TrainConfig {
        seed: 5,
        max_epochs: 50,
        ..TrainConfig::default()
    };
    let (_, report) = train(&utts, &cfg, &tc).unwrap();
    let initial = report.validation_curve[0];
    let reduction = 1.0 - report.best_validation_loss / initial;

    // scripted plateau: improving through epoch 5, flat afterwards
    let mut plateau_ok = true;
    for patience in [1, 3, 10] {
        let losses: Vec<f64> = (0..=60).map(|e| if e <= 5 { 2.0 - 0.1 * e as f64 } else { 1.5 }).collect();
        let mut bests = Vec::new();
        let r = run_schedule(
            &mut bests,
            60,
            patience,
            |_, e| Ok(EpochLosses { train: losses[e], validation: losses[e] }),
            |b: &mut Vec<usize>, e| b.push(e),
        )
        .unwrap();
        plateau_ok &= r.stopped_early && r.best_epoch == 5 && r.epochs_run == 5 + patience && bests == [0, 1, 2, 3, 4, 5];
    }
    let ok = reduction >= 0.2 && report.best_epoch <= 50 && plateau_ok;
    let detail = format!(
        "validation loss {initial:.4} -> {:.4} at epoch {} ({:.1}% reduction, {} epochs run); scripted plateau stops {}",
        report.best_validation_loss,
        report.best_epoch,
        100.0 * reduction,
        report.epochs_run,
        if plateau_ok { "after exactly `patience` stale epochs" } else { "incorrectly" }
    );
    let pass = verdict(5, "training viability", ok, &detail, start, 1200.0);
    assert!(pass);
}

fn trained_pair(
    target: &[Utterance],
    pool: &[Utterance],
    seed: u64,
    max_epochs: usize,
) -> (Vec<FrameLossTrace>, Vec<FrameLossTrace>) {
    let cfg = CpcConfig { seed, ..CpcConfig::default() };
    let tc = TrainConfig {
        seed,
        max_epochs,
        ..TrainConfig::default()
    };
    let (target_model, _) = train(target, &cfg, &tc).unwrap();
    let (pool_model, _) = train(pool, &cfg, &tc).unwrap();
    let p = evaluate_frame_losses(&pool_model, pool, tc.eval_seed).unwrap();
    let t = evaluate_frame_losses(&target_model, pool, tc.eval_seed).unwrap();
    (p.traces, t.traces)
}

fn purity(r: &SelectionResult, domain: &str) -> f64 {
    r.composition.get(domain).copied().unwrap_or(0) as f64 / r.len().max(1) as f64
}

#[test]
fn criterion_6_clr_selects_the_target_domain() {
    let _g = serial();
    let start = Instant::now();
    let mut good = 0;
    let mut runs = Vec::new();
    for seed in 1..=5u64 {
        let pool_spec = SynthSpec::new(4, 50, (1.0, 4.0), seed);
        let (pool, manifest) = synth_corpus(&pool_spec).unwrap();
        let mut target_spec = pool_spec.clone();
        target_spec.domains.truncate(1);
        target_spec.seed = seed + 1000;
        target_spec.id_prefix = "tgt-".into();
        let (target, _) = synth_corpus(&target_spec).unwrap();

        let (p, t) = trained_pair(&target, &pool, seed, 25);
        let (table, _) = build_score_table(&p, &t, 1.0, &manifest, Provenance::default()).unwrap();
        let hours = manifest.entries.iter().map(|e| e.duration_s).sum::<f64>() / 3600.0;
        let budget = Budget::Hours(0.25 * hours);
        let clr = select_budget(&table.scores, budget, Method::Clr).unwrap();

        let features = FeatureConfig::default();
        let frames = stack_features(&target, &features).unwrap();
        let (gmm, _) = gmm_fit(frames.view(), &EmConfig { seed, ..EmConfig::default() }).unwrap();
        let (ll_scores, _) = score_utterances(&gmm, &pool, &features, &manifest).unwrap();
        let ll = select_by_ll(&ll_scores, budget).unwrap();

        let (pc, pl) = (purity(&clr, "A"), purity(&ll, "A"));
        if pc >= 0.8 && pc >= pl {
            good += 1;
        }
        runs.push(format!("seed {seed}: CLR {pc:.2} ({} utts) vs LL {pl:.2}", clr.len()));
    }
    let detail = format!("{good}/5 runs with CLR purity >= 0.80 and >= LL purity; {}", runs.join("; "));
    let pass = verdict(6, "target-domain composition", good >= 4, &detail, start, 2700.0);
    assert!(pass);
}

#[test]
fn criterion_7_negative_transfer_filters() {
    let _g = serial();
    let start = Instant::now();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut table_problems = Vec::new();
    for t in 0..200 {
        let n = rng.gen_range(1..150);
        let table = ScoreTable::new(random_scores(&mut rng, n), 1.0, Provenance::default()).unwrap();
        let grid = grid_search(&table, &DEFAULT_GRID, Method::Clr).unwrap();
        for w in grid.windows(2) {
            let (small, big) = (&w[0].1.selected_ids, &w[1].1.selected_ids);
            if big.len() < small.len() || big[..small.len()] != small[..] {
                table_problems.push(format!("table {t}: CLR grid not nested"));
            }
        }
        for &f in &DEFAULT_GRID {
            let kept = filter_cl(&table, f).unwrap();
            let keep: HashSet<&str> = kept.selected_ids.iter().map(String::as_str).collect();
            let mut by_loss: Vec<&UtteranceScore> = table.scores.iter().collect();
            by_loss.sort_by(|a, b| {
                b.mean_target_loss.total_cmp(&a.mean_target_loss).then(a.utterance_id.cmp(&b.utterance_id))
            });
            let drop = n - (f * n as f64 + 1e-9).floor() as usize;
            let expected: HashSet<&str> = by_loss[drop..].iter().map(|s| s.utterance_id.as_str()).collect();
            if keep != expected {
                table_problems.push(format!("table {t}: CL at {f} did not drop exactly the top-loss tail"));
            }
        }
    }
    let table_secs = start.elapsed().as_secs_f64();
    let tables_ok = table_problems.is_empty() && table_secs < 10.0;

    let mut wins = 0;
    let mut runs = Vec::new();
    for seed in 1..=5u64 {
        let spec = SynthSpec::new(4, 25, (1.0, 2.0), seed);
        let (mut pool, manifest) = synth_corpus(&spec).unwrap();
        let mut corrupted = HashSet::new();
        for (i, u) in pool.iter_mut().enumerate() {
            if u.domain.as_deref() == Some("D") {
                noise_swap(u, seed * 1000 + i as u64);
                corrupted.insert(u.id.clone());
            }
        }
        let mut target_spec = spec.clone();
        target_spec.utterances_per_domain = 12;
        target_spec.seed = seed + 500;
        target_spec.id_prefix = "tgt-".into();
        let (target, _) = synth_corpus(&target_spec).unwrap();

        let (p, t) = trained_pair(&target, &pool, seed, 40);
        let (table, _) = build_score_table(&p, &t, 1.0, &manifest, Provenance::default()).unwrap();
        let removed = |r: SelectionResult| {
            let kept: HashSet<String> = r.selected_ids.into_iter().collect();
            corrupted.iter().filter(|id| !kept.contains(*id)).count() as f64 / corrupted.len() as f64
        };
        let clr = removed(filter_clr(&table, 0.85).unwrap());
        let random = removed(filter_random(&table.scores, 0.85, seed).unwrap());
        if clr > random {
            wins += 1;
        }
        runs.push(format!("seed {seed}: {clr:.2} vs {random:.2}"));
    }
    let detail = format!(
        "nested grid and exact CL tail on 200 tables in {table_secs:.1}s; \
         0.85 CLR filter removed more corrupted utterances than random in {wins}/5 ({})",
        runs.join("; ")
    );
    let pass = verdict(7, "negative-transfer filters", tables_ok && wins == 5, &detail, start, 1200.0);
    assert!(pass, "{table_problems:?}");
}

#[test]
fn criterion_8_baseline_correctness() {
    let _g = serial();
    let start = Instant::now();
    let mut problems = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut fits = 0;
    for i in 0..30 {
        let d = rng.gen_range(1..5);
        let n = rng.gen_range(100..600);
        let centers: Vec<f64> = (0..3).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let x = Array2::from_shape_fn((n, d), |(r, _)| centers[r % 3] + rng.gen_range(-1.0..1.0));
        let cfg = EmConfig { components: rng.gen_range(1..6), seed: i, ..EmConfig::default() };
        let (_, report) = gmm_fit(x.view(), &cfg).unwrap();
        fits += 1;
        if report.log_likelihood.windows(2).any(|w| w[1] < w[0] - 1e-8) {
            problems.push(format!("fit {i}: log-likelihood decreased"));
        }
    }
    let (utts, _) = synth_corpus(&SynthSpec::new(2, 10, (1.0, 2.0), 8)).unwrap();
    let frames = stack_features(&utts, &FeatureConfig::default()).unwrap();
    let (_, report) = gmm_fit(frames.view(), &EmConfig::default()).unwrap();
    fits += 1;
    if report.log_likelihood.windows(2).any(|w| w[1] < w[0] - 1e-8) {
        problems.push("MFCC fit: log-likelihood decreased".into());
    }

    let x = Array2::from_shape_fn((200, 3), |_| rng.gen_range(-2.0..5.0));
    let (g, _) = gmm_fit(x.view(), &EmConfig { components: 1, ..EmConfig::default() }).unwrap();
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    let var = x.var_axis(ndarray::Axis(0), 0.0);
    let closed_err = (0..3)
        .map(|j| (g.means[[0, j]] - mean[j]).abs().max((g.variances[[0, j]] - var[j]).abs()))
        .fold(0.0, f64::max);
    if closed_err > 1e-9 {
        problems.push(format!("single Gaussian off closed form by {closed_err:e}"));
    }

    let std_normal = DiagGmm::new(array![1.0], array![[0.0]], array![[1.0]]).unwrap();
    let at_mean = gmm_score(&std_normal, array![[0.0]].view()).unwrap();
    let expected = -0.5 * (2.0 * std::f64::consts::PI).ln();
    if (at_mean - expected).abs() > 1e-6 {
        problems.push(format!("standard normal at mean {at_mean}"));
    }
    let detail = format!(
        "{fits} EM fits monotone, closed-form error {closed_err:.1e}, standard normal at mean {at_mean:.6}"
    );
    let pass = verdict(8, "baseline correctness", problems.is_empty(), &detail, start, 60.0);
    assert!(pass, "{problems:?}");
}

const PIPELINE: &str = r#"
workdir = "work"
[paths]
target_manifest = "data/target.jsonl"
pool_manifest = "data/pool.jsonl"
[synth]
utterances_per_domain = 10
target_utterances = 10
duration_range_s = [1.0, 2.0]
seed = 7
[train]
max_epochs = 5
patience = 5
[gmm]
components = 4
[selection]
budgets = ["25%", "30s"]
"#;

fn run_pipeline(dir: &Path) -> Result<(), String> {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, PIPELINE).unwrap();
    let steps: &[&[&str]] = &[
        &["synth"],
        &["train", "--dataset", "target"],
        &["train", "--dataset", "pool"],
        &["score"],
        &["select", "--budget", "25%"],
        &["select", "--budget", "30s"],
        &["baseline"],
        &["filter"],
        &["filter", "--method", "cl"],
        &["report"],
    ];
    for step in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_clrsel"))
            .arg("--config")
            .arg(&cfg)
            .args(*step)
            .env_remove("CLRSEL_WORKDIR")
            .output()
            .unwrap();
        if !out.status.success() {
            return Err(format!("{step:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn files_under(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_9_end_to_end_determinism() {
    let _g = serial();
    let start = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ran = run_pipeline(a.path()).and_then(|_| run_pipeline(b.path()));
    let (mut compared, mut differing) = (0, Vec::new());
    if ran.is_ok() {
        let files = files_under(&a.path().join("work"));
        for f in &files {
            compared += 1;
            if std::fs::read(a.path().join("work").join(f)).ok() != std::fs::read(b.path().join("work").join(f)).ok() {
                differing.push(f.display().to_string());
            }
        }
    }
    let required = ["scores/clr.tsv", "scores/ll.tsv", "selections/clr-25p.ids", "selections/ll-30s.json"];
    let have_required = required.iter().all(|r| a.path().join("work").join(r).exists());
    let ok = ran.is_ok() && differing.is_empty() && have_required;
    let detail = match &ran {
        Ok(()) => format!("two full pipeline runs, {compared} output files compared, {} differ", differing.len()),
        Err(e) => format!("pipeline failed: {e}"),
    };
    let pass = verdict(9, "end-to-end determinism", ok, &detail, start, 1200.0);
    assert!(pass, "{differing:?}");
}
