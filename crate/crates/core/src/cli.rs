//! Experiment specs, execution, and on-disk outputs.
//!
//! A spec file is TOML:
//!
//! ```toml
//! out_dir = "out"
//! seeds = [7, 8, 9]
//!
//! [train]              # base training config shared by every run
//! steps = 300
//! task.difficulty = "collapse-prone"
//!
//! [[run]]              # optional; each entry overrides [train]
//! algo = "grpo"
//! prompts_per_step = 32
//! rollouts_per_prompt = 8
//!
//! [sweep]              # optional; grid over scheduler / shaping params
//! window = [5, 10, 20, 40]
//! kl_target = [0.005, 0.01, 0.02]
//! ```
//!
//! Every output path is a function of the experiment spec, the run label and the seed.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{LabError, Result};
use crate::oracle;
use crate::trainer::{self, Algo, MetricsRecord, RunOutput, TrainConfig, CSV_SCHEMA_VERSION};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    pub window: Vec<usize>,
    pub kl_target: Vec<f64>,
    pub gamma: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl SweepAxes {
    pub fn is_empty(&self) -> bool {
        self.window.is_empty() && self.kl_target.is_empty() && self.gamma.is_empty() && self.lambda.is_empty()
    }

    /// Cartesian product of the non-empty axes, as (cell suffix, patch).
    fn cells(&self) -> Vec<(String, Vec<(&'static str, f64)>)> {
        let mut cells: Vec<(String, Vec<(&'static str, f64)>)> = vec![(String::new(), Vec::new())];
        let axes: [(&'static str, Vec<f64>); 4] = [
            ("window", self.window.iter().map(|&n| n as f64).collect()),
            ("kl_target", self.kl_target.clone()),
            ("gamma", self.gamma.clone()),
            ("lambda", self.lambda.clone()),
        ];
        for (name, values) in axes {
            if values.is_empty() {
                continue;
            }
            cells = cells
                .into_iter()
                .flat_map(|(suffix, patch)| {
                    values.iter().map(move |&v| {
                        let mut p = patch.clone();
                        p.push((name, v));
                        (format!("{suffix}_{name}{v}"), p)
                    })
                })
                .collect();
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub runs: Vec<TrainConfig>,
    pub sweep: SweepAxes,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    out_dir: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    #[serde(default)]
    train: Table,
    #[serde(default)]
    run: Vec<Table>,
    #[serde(default)]
    sweep: SweepAxes,
}

fn merge(base: &mut Table, patch: &Table) {
    for (k, v) in patch {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(p)) => merge(b, p),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn to_config(table: Table, path: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| LabError::config(format!("{path}: {}", e.message())))?;
    cfg.validate()
        .map_err(|e| LabError::config(format!("{path}: {}", strip_kind(&e))))?;
    Ok(cfg)
}

fn strip_kind(e: &LabError) -> String {
    match e {
        LabError::Config(m) | LabError::Usage(m) | LabError::Parse(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Refuses comparisons whose runs do not share a rollout budget.
pub fn check_budget_parity(runs: &[TrainConfig]) -> Result<()> {
    if let Some(first) = runs.first() {
        for r in &runs[1..] {
            if r.rollouts_per_step() != first.rollouts_per_step() {
                return Err(LabError::config(format!(
                    "rollout budget mismatch: {} uses {} rollouts/step ({} x {}), {} uses {} ({} x {})",
                    first.label(),
                    first.rollouts_per_step(),
                    first.prompts_per_step,
                    first.rollouts_per_prompt,
                    r.label(),
                    r.rollouts_per_step(),
                    r.prompts_per_step,
                    r.rollouts_per_prompt
                )));
            }
        }
    }
    Ok(())
}

pub fn parse_config_str(text: &str) -> Result<ExperimentSpec> {
    let raw: RawSpec = toml::from_str(text).map_err(|e| LabError::config(e.to_string().trim().to_string()))?;
    let mut runs = Vec::new();
    if raw.run.is_empty() {
        runs.push(to_config(raw.train.clone(), "train")?);
    } else {
        for (i, patch) in raw.run.iter().enumerate() {
            let mut t = raw.train.clone();
            merge(&mut t, patch);
            runs.push(to_config(t, &format!("run[{i}]"))?);
        }
    }
    check_budget_parity(&runs)?;
    let mut labels: Vec<String> = runs.iter().map(TrainConfig::label).collect();
    labels.sort();
    if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
        return Err(LabError::config(format!(
            "duplicate run label {:?}; set distinct `name`s",
            w[0]
        )));
    }
    let seeds = raw.seeds.unwrap_or_else(|| vec![runs[0].seed]);
    if seeds.is_empty() {
        return Err(LabError::config("seeds must not be empty"));
    }
    for &n in &raw.sweep.window {
        if n < 1 {
            return Err(LabError::config("sweep.window values must be >= 1"));
        }
    }
    Ok(ExperimentSpec {
        out_dir: raw.out_dir.unwrap_or_else(|| PathBuf::from("out")),
        seeds,
        runs,
        sweep: raw.sweep,
    })
}

pub fn parse_config(path: &Path) -> Result<ExperimentSpec> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    parse_config_str(&text)
}

/// Command-line overrides applied on top of a parsed spec.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub steps: Option<usize>,
}

impl ExperimentSpec {
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(n) = o.steps {
            for r in &mut self.runs {
                r.steps = n;
            }
        }
        for r in &self.runs {
            r.validate()?;
        }
        Ok(())
    }

    /// Expands a single-run spec into the five-algorithm comparison at the
    /// same rollout budget. Group methods use 8 rollouts per prompt when the
    /// budget allows it.
    pub fn expand_comparison(&mut self) -> Result<()> {
        if self.runs.len() > 1 {
            return Ok(());
        }
        let base = self.runs[0].clone();
        let budget = base.rollouts_per_step();
        let group = [8, 4, 2].into_iter().find(|g| budget.is_multiple_of(*g)).ok_or_else(|| {
            LabError::config(format!("budget {budget} cannot be split into groups of >= 2"))
        })?;
        self.runs = Algo::ALL
            .iter()
            .map(|&algo| {
                let (ppp, g) = if algo.is_group() { (budget / group, group) } else { (budget, 1) };
                TrainConfig {
                    name: None,
                    algo,
                    prompts_per_step: ppp,
                    rollouts_per_prompt: g,
                    ..base.clone()
                }
            })
            .collect();
        for r in &self.runs {
            r.validate()?;
        }
        check_budget_parity(&self.runs)
    }
}

pub fn metrics_file_name(label: &str, seed: u64) -> String {
    format!("metrics_{label}_seed{seed}.csv")
}

pub fn checkpoint_file_name(label: &str, seed: u64) -> String {
    format!("checkpoint_{label}_seed{seed}.txt")
}

/// Per-run summary emitted into `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub algo: Algo,
    pub seed: u64,
    pub rollouts_per_step: usize,
    pub steps: usize,
    pub metrics_file: String,
    pub initial_entropy: f64,
    pub final_entropy: f64,
    pub final_train_acc: f64,
    pub final_val_acc: f64,
    pub final_val_acc_sampled: f64,
    pub best_val_acc: f64,
    pub target_acc: f64,
    /// First step whose validation accuracy reached `target_acc`.
    pub steps_to_target: Option<usize>,
}

pub fn steps_to_target(metrics: &[MetricsRecord], target: f64) -> Option<usize> {
    metrics.iter().find(|m| m.val_acc >= target).map(|m| m.step)
}

fn summarize(cfg: &TrainConfig, out: &RunOutput) -> RunSummary {
    let m = &out.metrics;
    let last = m.last().expect("at least one step");
    RunSummary {
        name: cfg.label(),
        algo: cfg.algo,
        seed: cfg.seed,
        rollouts_per_step: cfg.rollouts_per_step(),
        steps: m.len(),
        metrics_file: metrics_file_name(&cfg.label(), cfg.seed),
        initial_entropy: m[0].mean_entropy,
        final_entropy: last.mean_entropy,
        final_train_acc: last.train_acc,
        final_val_acc: last.val_acc,
        final_val_acc_sampled: out.final_val_sampled,
        best_val_acc: m.iter().map(|r| r.val_acc).fold(0.0, f64::max),
        target_acc: cfg.target_acc,
        steps_to_target: steps_to_target(m, cfg.target_acc),
    }
}

/// Steps-to-target per algorithm, averaged over seeds that reached it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoEfficiency {
    pub name: String,
    pub algo: Algo,
    pub seeds_reaching_target: usize,
    pub seeds: usize,
    pub mean_steps_to_target: Option<f64>,
    pub mean_final_val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub csv_schema_version: u32,
    pub rollouts_per_step: usize,
    pub runs: Vec<RunSummary>,
    pub efficiency: Vec<AlgoEfficiency>,
    /// MSSR steps-to-target divided by GRPO's, when both reached it.
    pub mssr_to_grpo_step_ratio: Option<f64>,
}

fn efficiency(runs: &[RunSummary]) -> (Vec<AlgoEfficiency>, Option<f64>) {
    let mut names: Vec<(String, Algo)> = Vec::new();
    for r in runs {
        if !names.iter().any(|(n, _)| *n == r.name) {
            names.push((r.name.clone(), r.algo));
        }
    }
    let eff: Vec<AlgoEfficiency> = names
        .into_iter()
        .map(|(name, algo)| {
            let mine: Vec<&RunSummary> = runs.iter().filter(|r| r.name == name).collect();
            let reached: Vec<f64> = mine.iter().filter_map(|r| r.steps_to_target).map(|s| s as f64).collect();
            AlgoEfficiency {
                name,
                algo,
                seeds_reaching_target: reached.len(),
                seeds: mine.len(),
                mean_steps_to_target: (!reached.is_empty()).then(|| reached.iter().sum::<f64>() / reached.len() as f64),
                mean_final_val_acc: mine.iter().map(|r| r.final_val_acc).sum::<f64>() / mine.len() as f64,
            }
        })
        .collect();
    let find = |a: Algo| eff.iter().find(|e| e.algo == a).and_then(|e| e.mean_steps_to_target);
    let ratio = match (find(Algo::Mssr), find(Algo::Grpo)) {
        (Some(m), Some(g)) if g > 0.0 => Some(m / g),
        _ => None,
    };
    (eff, ratio)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| LabError::io(path, e))
}

/// Runs one (config, seed) cell and writes its CSV and checkpoint. On a
/// numerical abort the batch dump is persisted before the error returns.
fn run_cell(cfg: &TrainConfig, out_dir: &Path) -> Result<RunSummary> {
    let label = cfg.label();
    match trainer::run(cfg) {
        Ok(out) => {
            write(&out_dir.join(metrics_file_name(&label, cfg.seed)), &trainer::metrics_csv(&out.metrics))?;
            write(&out_dir.join(checkpoint_file_name(&label, cfg.seed)), &out.checkpoint.to_text())?;
            Ok(summarize(cfg, &out))
        }
        Err(e @ LabError::Numerical { .. }) => {
            if let LabError::Numerical { dump, .. } = &e {
                write(&out_dir.join(format!("diagnostics_{label}_seed{}.json", cfg.seed)), dump)?;
            }
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn run_cells(cells: Vec<TrainConfig>, out_dir: &Path) -> Result<Vec<RunSummary>> {
    fs::create_dir_all(out_dir).map_err(|e| LabError::io(out_dir, e))?;
    let results: Vec<Result<RunSummary>> = cells.par_iter().map(|c| run_cell(c, out_dir)).collect();
    results.into_iter().collect()
}

/// Runs every (config, seed) pair and writes `summary.json`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentSummary> {
    check_budget_parity(&spec.runs)?;
    let cells: Vec<TrainConfig> = spec
        .runs
        .iter()
        .flat_map(|r| {
            spec.seeds.iter().map(move |&seed| TrainConfig { seed, ..r.clone() })
        })
        .collect();
    let runs = run_cells(cells, &spec.out_dir)?;
    let (efficiency, ratio) = efficiency(&runs);
    let summary = ExperimentSummary {
        csv_schema_version: CSV_SCHEMA_VERSION,
        rollouts_per_step: spec.runs[0].rollouts_per_step(),
        runs,
        efficiency,
        mssr_to_grpo_step_ratio: ratio,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&spec.out_dir.join("summary.json"), &(json + "\n"))?;
    Ok(summary)
}

/// One row of the sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: String,
    pub seed: u64,
    pub window: usize,
    pub kl_target: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub final_val_acc: f64,
    pub best_val_acc: f64,
    pub final_entropy: f64,
    pub metrics_file: String,
}

/// Grid of runs over the sweep axes (applied to the first run config).
/// Writes one CSV per cell plus `sweep_summary.csv`, sorted by final
/// validation accuracy (descending, ties by cell name then seed).
pub fn sweep(spec: &ExperimentSpec) -> Result<Vec<SweepRow>> {
    if spec.sweep.is_empty() {
        return Err(LabError::config("sweep needs at least one non-empty axis in [sweep]"));
    }
    let base = &spec.runs[0];
    let mut cells = Vec::new();
    for (suffix, patch) in spec.sweep.cells() {
        let mut cfg = base.clone();
        for (axis, v) in patch {
            match axis {
                "window" => cfg.window = v as usize,
                "kl_target" => cfg.kl_target = v,
                "gamma" => cfg.gamma = v,
                "lambda" => cfg.lambda = v,
                _ => unreachable!("unknown sweep axis"),
            }
        }
        cfg.name = Some(format!("{}{suffix}", base.label()));
        cfg.validate()?;
        for &seed in &spec.seeds {
            cells.push(TrainConfig { seed, ..cfg.clone() });
        }
    }
    let summaries = run_cells(cells.clone(), &spec.out_dir)?;
    let mut rows: Vec<SweepRow> = cells
        .iter()
        .zip(&summaries)
        .map(|(c, s)| SweepRow {
            cell: s.name.clone(),
            seed: s.seed,
            window: c.window,
            kl_target: c.kl_target,
            gamma: c.gamma,
            lambda: c.lambda,
            final_val_acc: s.final_val_acc,
            best_val_acc: s.best_val_acc,
            final_entropy: s.final_entropy,
            metrics_file: s.metrics_file.clone(),
        })
        .collect();
    rows.sort_by(|a, b| {
        b.final_val_acc
            .total_cmp(&a.final_val_acc)
            .then_with(|| a.cell.cmp(&b.cell))
            .then_with(|| a.seed.cmp(&b.seed))
    });
    let mut table = String::from("cell,seed,window,kl_target,gamma,lambda,final_val_acc,best_val_acc,final_entropy,metrics_file\n");
    for r in &rows {
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.cell, r.seed, r.window, r.kl_target, r.gamma, r.lambda, r.final_val_acc, r.best_val_acc, r.final_entropy, r.metrics_file
        ));
    }
    write(&spec.out_dir.join("sweep_summary.csv"), &table)?;
    Ok(rows)
}

/// Outcome of the built-in oracle and gradient suites.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub gradient_checks: Vec<(String, f64)>,
    pub enumeration_fd_error: f64,
    pub baseline_invariance_error: f64,
    pub fixed_baseline_bias: oracle::BiasReport,
    pub leaky_baseline_bias: oracle::BiasReport,
    pub shaped_bias_max_abs_z: f64,
    pub pass: bool,
}

/// Gradient tolerance for finite-difference agreement.
pub const GRAD_REL_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

pub fn run_checks(seeds: &[u64], samples: usize) -> Result<CheckReport> {
    use crate::env::{self, Difficulty, TaskConfig};
    use crate::policy::{self, PolicyDims};

    let task = TaskConfig {
        vocab_size: 3,
        max_len: 2,
        context_dim: 4,
        num_questions: 2,
        count: 4,
        difficulty: Difficulty::Easy,
        seed: 1,
    };
    let suite = env::make_task_suite(&task)?;
    let dims = PolicyDims {
        vocab_size: 3,
        max_len: 2,
        context_dim: 4,
        num_questions: 2,
        embed_dim: 3,
        hidden_dim: 4,
    };
    let mut gradient_checks = Vec::new();
    for &seed in seeds {
        let params = policy::init_params(dims, 0.7, seed)?;
        let other = policy::init_params(dims, 0.7, seed + 1000)?;
        let p = &suite.prompts[seed as usize % suite.len()];
        let tokens = [seed as usize % 3, (seed as usize + 1) % 3];
        let weights = [0.7, -1.3];

        let g = policy::backprop_weighted_logprob(&params, p, &tokens, &weights)?;
        let fd = oracle::finite_diff_params(
            |q| {
                let (lp, _) = policy::logprobs_and_entropy(q, p, &tokens).unwrap();
                lp.iter().zip(weights).map(|(l, w)| l * w).sum()
            },
            &params,
            FD_STEP,
        );
        gradient_checks.push((format!("weighted_logprob/seed{seed}"), oracle::max_relative_error(&g, &fd)));

        let (_, g) = policy::backprop_kl(&params, &other, p, &tokens)?;
        let fd = oracle::finite_diff_params(|q| policy::backprop_kl(q, &other, p, &tokens).unwrap().0, &params, FD_STEP);
        gradient_checks.push((format!("kl/seed{seed}"), oracle::max_relative_error(&g, &fd)));

        let (_, g) = policy::backprop_entropy(&params, p, &tokens)?;
        let fd = oracle::finite_diff_params(|q| policy::backprop_entropy(q, p, &tokens).unwrap().0, &params, FD_STEP);
        gradient_checks.push((format!("entropy/seed{seed}"), oracle::max_relative_error(&g, &fd)));
    }

    let params = policy::init_params(dims, 0.7, seeds.first().copied().unwrap_or(1))?;
    let (_, exact) = oracle::enumerate_suite(&params, &suite)?;
    let fd = oracle::finite_diff_params(|q| oracle::enumerate_suite(q, &suite).unwrap().0, &params, FD_STEP);
    let enumeration_fd_error = oracle::max_relative_error(&exact, &fd);

    let mut baseline_invariance_error: f64 = 0.0;
    for p in &suite.prompts {
        let g0 = oracle::enumerate_with_baseline(&params, p, 0.0)?.gradient;
        for b in [0.5, 1.0] {
            let gb = oracle::enumerate_with_baseline(&params, p, b)?.gradient;
            let err = g0.iter().zip(&gb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            baseline_invariance_error = baseline_invariance_error.max(err);
        }
    }

    let fixed = oracle::estimator_bias_check(oracle::Estimator::FixedBaseline { baseline: 0.3 }, &params, &suite, samples, 11)?;
    let leaky = oracle::estimator_bias_check(
        oracle::Estimator::LeakyBaseline { baseline: 0.3, leak: 0.5 },
        &params,
        &suite,
        samples,
        11,
    )?;
    let shaped = oracle::estimator_bias_check(
        oracle::Estimator::EntropyShaped { baseline: 0.3, gamma: 0.4, lambda: 2.0 },
        &params,
        &suite,
        samples,
        11,
    )?;

    let pass = gradient_checks.iter().all(|(_, e)| *e < GRAD_REL_TOL)
        && enumeration_fd_error < GRAD_REL_TOL
        && baseline_invariance_error < 1e-12
        && fixed.pass
        && !leaky.pass;
    Ok(CheckReport {
        gradient_checks,
        enumeration_fd_error,
        baseline_invariance_error,
        fixed_baseline_bias: fixed,
        leaky_baseline_bias: leaky,
        shaped_bias_max_abs_z: shaped.max_abs_z,
        pass,
    })
}

/// Process exit code for an error.
pub fn exit_code(e: &LabError) -> i32 {
    match e {
        LabError::Numerical { .. } => 3,
        _ => 2,
    }
}
