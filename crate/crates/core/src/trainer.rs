//! Training loop shared by all five estimators.
//!
//! Every algorithm optimizes the same token-averaged clipped surrogate
//!
//! ```text
//! L = -(1/R) sum_i (1/T) sum_t min(rho_it * A_it, clip(rho_it, 1-eps, 1+eps) * A_it)
//!     + kl_ref_coef      * (1/R) sum_i KL(pi || pi_ref)          (mean over prefixes)
//!     + crossmodal_coef  * (1/R) sum_i KL(pi(.|full) || sg pi_old(.|masked))
//!     - entropy_loss_coef* (1/R) sum_i H(pi)
//! ```
//!
//! and differs only in how the per-token advantages `A_it` are produced.
//! The cross-modal term, when enabled, replaces the reference-policy term.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{self, AdvantageBatch, ShapingParams};
use crate::baseline::BetaTracker;
use crate::env::{self, Prompt, TaskConfig, TaskSuite};
use crate::error::{LabError, Result};
use crate::policy::{self, PolicyDims, PolicyParams, Rollout};
use crate::rng::{self, purpose};
use crate::scheduler::SchedulerState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Grpo,
    Rloo,
    ReinforcePp,
    Mvsr,
    Mssr,
}

impl Algo {
    pub const ALL: [Algo; 5] = [Algo::Grpo, Algo::Rloo, Algo::ReinforcePp, Algo::Mvsr, Algo::Mssr];

    pub fn is_group(self) -> bool {
        matches!(self, Algo::Grpo | Algo::Rloo)
    }

    pub fn uses_beta_baseline(self) -> bool {
        matches!(self, Algo::Mvsr | Algo::Mssr)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algo::Grpo => "grpo",
            Algo::Rloo => "rloo",
            Algo::ReinforcePp => "reinforce_pp",
            Algo::Mvsr => "mvsr",
            Algo::Mssr => "mssr",
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Label used in output file names; defaults to the algorithm name.
    pub name: Option<String>,
    pub algo: Algo,
    pub prompts_per_step: usize,
    pub rollouts_per_prompt: usize,
    pub steps: usize,
    pub epochs_per_batch: usize,
    pub clip_eps: f64,
    pub kl_ref_coef: f64,
    pub entropy_loss_coef: f64,
    pub crossmodal_coef: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub guard_bonus: bool,
    pub normalize_advantages: bool,
    pub eps_std: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub window: usize,
    pub kl_target: f64,
    /// Rollouts per prompt used to score the initial policy for the Beta
    /// prior; 1 is the single-forward-pass initialization.
    pub baseline_init_rollouts: usize,
    pub optimizer: OptimConfig,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub init_scale: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub val_fraction: f64,
    /// Validation accuracy used for steps-to-target reporting.
    pub target_acc: f64,
    /// Fan rollout work out over threads. Results do not depend on it.
    pub parallel: bool,
    pub task: TaskConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            name: None,
            algo: Algo::Mssr,
            prompts_per_step: 256,
            rollouts_per_prompt: 1,
            steps: 300,
            epochs_per_batch: 1,
            clip_eps: 0.2,
            kl_ref_coef: 0.01,
            entropy_loss_coef: 0.0,
            crossmodal_coef: 0.0,
            gamma: 0.4,
            lambda: 2.0,
            guard_bonus: false,
            normalize_advantages: true,
            eps_std: 1e-6,
            eta_min: 0.875,
            eta_max: 0.96,
            window: 20,
            kl_target: 0.01,
            baseline_init_rollouts: 4,
            optimizer: OptimConfig::default(),
            embed_dim: 16,
            hidden_dim: 64,
            init_scale: 0.1,
            seed: 7,
            eval_every: 1,
            val_fraction: 0.2,
            target_acc: 0.35,
            parallel: true,
            task: TaskConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.algo.name().to_string())
    }

    pub fn rollouts_per_step(&self) -> usize {
        self.prompts_per_step * self.rollouts_per_prompt
    }

    pub fn policy_dims(&self) -> PolicyDims {
        PolicyDims {
            vocab_size: self.task.vocab_size,
            max_len: self.task.max_len,
            context_dim: self.task.context_dim,
            num_questions: self.task.num_questions,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
        }
    }

    pub fn shaping(&self) -> ShapingParams {
        ShapingParams {
            gamma: self.gamma,
            lambda: self.lambda,
            guard: self.guard_bonus,
        }
    }

    /// Checks every range and cross-field constraint.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(LabError::config(m));
        self.task.validate()?;
        self.policy_dims().validate()?;
        if self.algo.is_group() && self.rollouts_per_prompt < 2 {
            return err(format!(
                "{} needs rollouts_per_prompt >= 2, got {}",
                self.algo, self.rollouts_per_prompt
            ));
        }
        if !self.algo.is_group() && self.rollouts_per_prompt != 1 {
            return err(format!(
                "{} is group-free and needs rollouts_per_prompt = 1, got {}",
                self.algo, self.rollouts_per_prompt
            ));
        }
        if self.prompts_per_step < 1 || self.rollouts_per_step() < 2 {
            return err("a step needs at least 2 rollouts".into());
        }
        let n_val = (self.task.count as f64 * self.val_fraction).round() as usize;
        let n_train = self.task.count.saturating_sub(n_val);
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) || n_val == 0 || n_train == 0 {
            return err(format!(
                "val_fraction {} must leave both splits non-empty for {} prompts",
                self.val_fraction, self.task.count
            ));
        }
        if self.prompts_per_step > n_train {
            return err(format!(
                "prompts_per_step {} exceeds the {} training prompts",
                self.prompts_per_step, n_train
            ));
        }
        if self.steps < 1 || self.epochs_per_batch < 1 || self.eval_every < 1 {
            return err("steps, epochs_per_batch and eval_every must be >= 1".into());
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return err(format!("clip_eps must lie in (0, 1), got {}", self.clip_eps));
        }
        for (name, v) in [
            ("kl_ref_coef", self.kl_ref_coef),
            ("entropy_loss_coef", self.entropy_loss_coef),
            ("crossmodal_coef", self.crossmodal_coef),
            ("eps_std", self.eps_std),
            ("init_scale", self.init_scale),
            ("optimizer.weight_decay", self.optimizer.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        self.shaping().validate()?;
        SchedulerState::new(self.eta_min, self.eta_max, self.window, self.kl_target)?;
        if !(self.eta_min < 1.0) {
            return err(format!("eta_min must be < 1, got {}", self.eta_min));
        }
        if self.baseline_init_rollouts < 1 {
            return err("baseline_init_rollouts must be >= 1".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return err(format!("optimizer.lr must be > 0, got {}", o.lr));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return err("optimizer betas must lie in [0, 1)".into());
        }
        if !(o.eps > 0.0) {
            return err("optimizer.eps must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.target_acc) {
            return err(format!("target_acc must lie in [0, 1], got {}", self.target_acc));
        }
        Ok(())
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub mean_entropy: f64,
    pub mean_kl_step: f64,
    pub eta: f64,
    pub mean_abs_advantage: f64,
    pub mean_bonus: f64,
    pub loss: f64,
    pub clip_fraction: f64,
}

pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str =
    "step,train_acc,val_acc,mean_entropy,mean_kl_step,eta,mean_abs_advantage,mean_bonus,loss,clip_fraction";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.train_acc,
            self.val_acc,
            self.mean_entropy,
            self.mean_kl_step,
            self.eta,
            self.mean_abs_advantage,
            self.mean_bonus,
            self.loss,
            self.clip_fraction
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// AdamW moment state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One AdamW step: decoupled decay `p *= 1 - lr * wd`, then the
/// bias-corrected moment update.
pub fn adamw_step(state: &mut AdamState, params: &mut [f64], grad: &[f64], cfg: &OptimConfig) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(LabError::usage("AdamW shape mismatch"));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for i in 0..params.len() {
        let g = grad[i];
        params[i] *= decay;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// A sampled batch: rollouts in prompt-major order with their prompts.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub prompts: Vec<Prompt>,
    pub rollouts: Vec<Rollout>,
}

impl RolloutBatch {
    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| f64::from(r.reward)).collect()
    }

    pub fn entropies(&self) -> Vec<Vec<f64>> {
        self.rollouts.iter().map(|r| r.entropies_old.clone()).collect()
    }
}

/// Sample `group` rollouts for each prompt. Each rollout draws from its own
/// stream keyed by `(seed, step, prompt id, index)`.
pub fn collect_rollouts(
    params: &PolicyParams,
    prompts: &[Prompt],
    group: usize,
    seed: u64,
    step: usize,
    parallel: bool,
) -> Result<RolloutBatch> {
    let jobs: Vec<(&Prompt, usize)> = prompts
        .iter()
        .flat_map(|p| (0..group).map(move |g| (p, g)))
        .collect();
    let run = |&(p, g): &(&Prompt, usize)| {
        let mut rng = rng::stream(seed, &[purpose::ROLLOUT, step as u64, p.id as u64, g as u64]);
        policy::sample_rollout(params, p, &mut rng)
    };
    let rollouts: Vec<Rollout> = if parallel {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };
    let prompts = jobs.into_iter().map(|(p, _)| p.clone()).collect();
    Ok(RolloutBatch { prompts, rollouts })
}

/// Exact `KL(old || new)` averaged over every visited (prompt, prefix) pair.
pub fn measure_step_kl(old: &PolicyParams, new: &PolicyParams, batch: &RolloutBatch) -> Result<f64> {
    let mut total = 0.0;
    for (p, r) in batch.prompts.iter().zip(&batch.rollouts) {
        total += policy::kl_against(old, p, new, p, &r.tokens, 1.0, None)?;
    }
    Ok(total / batch.rollouts.len() as f64)
}

/// Greedy-decoding accuracy.
pub fn evaluate(params: &PolicyParams, suite: &TaskSuite) -> Result<f64> {
    if suite.is_empty() {
        return Err(LabError::usage("evaluation suite is empty"));
    }
    let mut hits = 0u64;
    for p in &suite.prompts {
        hits += u64::from(env::verify(p, &policy::greedy_response(params, p)?));
    }
    Ok(hits as f64 / suite.len() as f64)
}

/// Sampled-decoding accuracy, one rollout per prompt.
pub fn evaluate_sampled(params: &PolicyParams, suite: &TaskSuite, seed: u64) -> Result<f64> {
    if suite.is_empty() {
        return Err(LabError::usage("evaluation suite is empty"));
    }
    let mut hits = 0u64;
    for p in &suite.prompts {
        let mut rng = rng::stream(seed, &[purpose::EVAL_SAMPLED, p.id as u64]);
        hits += u64::from(policy::sample_rollout(params, p, &mut rng)?.reward);
    }
    Ok(hits as f64 / suite.len() as f64)
}

/// Regularizer weights active in one step objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularizers {
    pub kl_ref_coef: f64,
    pub entropy_loss_coef: f64,
    pub crossmodal_coef: f64,
}

impl Regularizers {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            // The cross-modal anchor replaces the reference-policy term.
            kl_ref_coef: if cfg.crossmodal_coef > 0.0 { 0.0 } else { cfg.kl_ref_coef },
            entropy_loss_coef: cfg.entropy_loss_coef,
            crossmodal_coef: cfg.crossmodal_coef,
        }
    }
}

/// Scalar objective of one training step with all stop-gradient inputs
/// frozen: advantages, sampling-time log-probs, the reference policy and
/// the masked-context anchor (evaluated at the step snapshot).
pub struct StepObjective<'a> {
    pub batch: &'a RolloutBatch,
    pub advantages: &'a AdvantageBatch,
    pub reference: &'a PolicyParams,
    pub snapshot: &'a PolicyParams,
    pub masked: Vec<Prompt>,
    pub clip_eps: f64,
    pub reg: Regularizers,
}

/// Value, gradient, and clip statistics of a [`StepObjective`].
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub clipped_tokens: usize,
    pub total_tokens: usize,
}

/// Gradient weight of one token of `min(rho * A, clip(rho) * A)` with
/// respect to `log pi`: `rho * A` on the unclipped branch, zero when the
/// clip binds.
pub fn surrogate_token(rho: f64, adv: f64, clip_eps: f64) -> (f64, f64, bool) {
    let clipped = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    let value = (rho * adv).min(clipped * adv);
    let binding = (rho > 1.0 + clip_eps && adv > 0.0) || (rho < 1.0 - clip_eps && adv < 0.0);
    let weight = if binding { 0.0 } else { rho * adv };
    (value, weight, binding)
}

impl<'a> StepObjective<'a> {
    pub fn new(
        batch: &'a RolloutBatch,
        advantages: &'a AdvantageBatch,
        reference: &'a PolicyParams,
        snapshot: &'a PolicyParams,
        clip_eps: f64,
        reg: Regularizers,
    ) -> Self {
        let masked = batch.prompts.iter().map(env::mask_image).collect();
        Self {
            batch,
            advantages,
            reference,
            snapshot,
            masked,
            clip_eps,
            reg,
        }
    }

    fn rollout_term(&self, params: &PolicyParams, i: usize, want_grad: bool) -> Result<(f64, Option<Vec<f64>>, usize)> {
        let prompt = &self.batch.prompts[i];
        let rollout = &self.batch.rollouts[i];
        let r = self.batch.rollouts.len() as f64;
        let t_len = rollout.tokens.len() as f64;
        let (logp_new, _) = policy::logprobs_and_entropy(params, prompt, &rollout.tokens)?;
        let mut loss = 0.0;
        let mut weights = Vec::with_capacity(logp_new.len());
        let mut clipped = 0;
        for ((lp_new, lp_old), &adv) in logp_new
            .iter()
            .zip(&rollout.logprobs_old)
            .zip(&self.advantages.shaped[i])
        {
            let rho = (lp_new - lp_old).exp();
            let (value, weight, binding) = surrogate_token(rho, adv, self.clip_eps);
            loss -= value / (r * t_len);
            weights.push(-weight / (r * t_len));
            clipped += usize::from(binding);
        }
        let mut grad = want_grad.then(|| vec![0.0; params.values.len()]);
        if let Some(g) = grad.as_mut() {
            policy::accumulate_weighted_logprob(params, prompt, &rollout.tokens, &weights, g)?;
        }
        if self.reg.kl_ref_coef > 0.0 {
            let c = self.reg.kl_ref_coef / r;
            let kl = policy::kl_against(params, prompt, self.reference, prompt, &rollout.tokens, c, grad.as_deref_mut())?;
            loss += c * kl;
        }
        if self.reg.crossmodal_coef > 0.0 {
            let c = self.reg.crossmodal_coef / r;
            let kl = policy::kl_against(
                params,
                prompt,
                self.snapshot,
                &self.masked[i],
                &rollout.tokens,
                c,
                grad.as_deref_mut(),
            )?;
            loss += c * kl;
        }
        if self.reg.entropy_loss_coef > 0.0 {
            let c = -self.reg.entropy_loss_coef / r;
            let h = policy::accumulate_entropy(params, prompt, &rollout.tokens, c, grad.as_deref_mut())?;
            loss += c * h;
        }
        Ok((loss, grad, clipped))
    }

    /// Loss value only.
    pub fn loss(&self, params: &PolicyParams) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..self.batch.rollouts.len() {
            total += self.rollout_term(params, i, false)?.0;
        }
        Ok(total)
    }

    /// Loss and exact gradient. Per-rollout terms may be computed in
    /// parallel; they are always reduced in rollout order.
    pub fn evaluate(&self, params: &PolicyParams, parallel: bool) -> Result<ObjectiveEval> {
        let n = self.batch.rollouts.len();
        let terms: Vec<(f64, Option<Vec<f64>>, usize)> = if parallel {
            (0..n)
                .into_par_iter()
                .map(|i| self.rollout_term(params, i, true))
                .collect::<Result<_>>()?
        } else {
            (0..n).map(|i| self.rollout_term(params, i, true)).collect::<Result<_>>()?
        };
        let mut loss = 0.0;
        let mut grad = vec![0.0; params.values.len()];
        let mut clipped_tokens = 0;
        for (l, g, c) in terms {
            loss += l;
            clipped_tokens += c;
            for (acc, x) in grad.iter_mut().zip(g.expect("gradient requested")) {
                *acc += x;
            }
        }
        let total_tokens = self.batch.rollouts.iter().map(|r| r.tokens.len()).sum();
        Ok(ObjectiveEval {
            loss,
            grad,
            clipped_tokens,
            total_tokens,
        })
    }
}

#[derive(Serialize)]
struct BatchDump<'a> {
    step: usize,
    detail: &'a str,
    prompt_ids: Vec<usize>,
    tokens: Vec<&'a [usize]>,
    rewards: Vec<u8>,
    logprobs_old: Vec<&'a [f64]>,
    advantages: &'a [Vec<f64>],
}

fn numerical_abort(step: usize, detail: &str, batch: &RolloutBatch, adv: &AdvantageBatch) -> LabError {
    let dump = BatchDump {
        step,
        detail,
        prompt_ids: batch.rollouts.iter().map(|r| r.prompt_id).collect(),
        tokens: batch.rollouts.iter().map(|r| r.tokens.as_slice()).collect(),
        rewards: batch.rollouts.iter().map(|r| r.reward).collect(),
        logprobs_old: batch.rollouts.iter().map(|r| r.logprobs_old.as_slice()).collect(),
        advantages: &adv.shaped,
    };
    LabError::Numerical {
        step,
        detail: detail.to_string(),
        dump: serde_json::to_string_pretty(&dump).unwrap_or_default(),
    }
}

/// Builds the train/validation suites for a config.
pub fn build_suites(cfg: &TrainConfig) -> Result<(TaskSuite, TaskSuite)> {
    let suite = env::make_task_suite(&cfg.task)?;
    env::split(&suite, cfg.val_fraction, cfg.task.seed)
}

/// Per-prompt success estimate of `params` from `k` sampled rollouts each.
pub fn score_prompts(params: &PolicyParams, suite: &TaskSuite, k: usize, seed: u64) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for p in &suite.prompts {
        let mut hits = 0u32;
        for j in 0..k {
            let mut rng = rng::stream(seed, &[purpose::BASELINE_SCORING, p.id as u64, j as u64]);
            hits += u32::from(policy::sample_rollout(params, p, &mut rng)?.reward);
        }
        out.insert(p.id, f64::from(hits) / k as f64);
    }
    Ok(out)
}

/// Full mutable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub train: TaskSuite,
    pub val: TaskSuite,
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub tracker: Option<BetaTracker>,
    pub scheduler: SchedulerState,
    pub opt: AdamState,
    /// Number of completed steps.
    pub step: usize,
    pub last_val_acc: f64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, val) = build_suites(&cfg)?;
        let params = policy::init_params(cfg.policy_dims(), cfg.init_scale, cfg.seed)?;
        let tracker = if cfg.algo.uses_beta_baseline() {
            let v0 = score_prompts(&params, &train, cfg.baseline_init_rollouts, cfg.seed)?;
            Some(BetaTracker::init(&v0, cfg.eta_min)?)
        } else {
            None
        };
        let scheduler = SchedulerState::new(cfg.eta_min, cfg.eta_max, cfg.window, cfg.kl_target)?;
        let opt = AdamState::new(params.values.len());
        let last_val_acc = evaluate(&params, &val)?;
        Ok(Self {
            reference: params.clone(),
            cfg,
            train,
            val,
            params,
            tracker,
            scheduler,
            opt,
            step: 0,
            last_val_acc,
        })
    }

    /// Prompts for the given (1-based) step: a seeded sample without
    /// replacement from the training split.
    pub fn batch_prompts(&self, step: usize) -> Vec<Prompt> {
        let mut rng = rng::stream(self.cfg.seed, &[purpose::BATCH, step as u64]);
        index::sample(&mut rng, self.train.len(), self.cfg.prompts_per_step)
            .into_iter()
            .map(|i| self.train.prompts[i].clone())
            .collect()
    }

    /// Advantages for a sampled batch under the configured estimator.
    pub fn compute_advantages(&self, batch: &RolloutBatch) -> Result<AdvantageBatch> {
        let cfg = &self.cfg;
        let rewards = batch.rewards();
        let len = cfg.task.max_len;
        match cfg.algo {
            Algo::Grpo | Algo::Rloo => {
                let g = cfg.rollouts_per_prompt;
                let mut seq = Vec::with_capacity(rewards.len());
                for group in rewards.chunks(g) {
                    seq.extend(match cfg.algo {
                        Algo::Grpo => advantage::grpo_advantages(group, cfg.eps_std)?,
                        _ => advantage::rloo_advantages(group)?,
                    });
                }
                Ok(AdvantageBatch::broadcast(seq, len))
            }
            Algo::ReinforcePp => {
                advantage::single_rollout_pipeline(&rewards, &batch.entropies(), cfg.normalize_advantages, None, cfg.eps_std)
            }
            Algo::Mvsr | Algo::Mssr => {
                let tracker = self.tracker.as_ref().expect("beta baseline initialized");
                let raw: Vec<f64> = batch
                    .rollouts
                    .iter()
                    .map(|r| Ok(advantage::single_rollout_advantage(r.reward, tracker.mean(r.prompt_id)?)))
                    .collect::<Result<_>>()?;
                let shaping = cfg.shaping();
                let shaping = (cfg.algo == Algo::Mssr).then_some(&shaping);
                advantage::single_rollout_pipeline(&raw, &batch.entropies(), cfg.normalize_advantages, shaping, cfg.eps_std)
            }
        }
    }

    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let step = self.step + 1;
        let snapshot = self.params.clone();
        let prompts = self.batch_prompts(step);
        let batch = collect_rollouts(
            &snapshot,
            &prompts,
            self.cfg.rollouts_per_prompt,
            self.cfg.seed,
            step,
            self.cfg.parallel,
        )?;
        let adv = self.compute_advantages(&batch)?;
        let objective = StepObjective::new(
            &batch,
            &adv,
            &self.reference,
            &snapshot,
            self.cfg.clip_eps,
            Regularizers::from_config(&self.cfg),
        );

        let mut first_loss = None;
        let mut clipped = 0usize;
        let mut tokens = 0usize;
        for _ in 0..self.cfg.epochs_per_batch {
            let eval = objective.evaluate(&self.params, self.cfg.parallel)?;
            if !eval.loss.is_finite() {
                return Err(numerical_abort(step, "non-finite loss", &batch, &adv));
            }
            if eval.grad.iter().any(|g| !g.is_finite()) {
                return Err(numerical_abort(step, "non-finite gradient", &batch, &adv));
            }
            first_loss.get_or_insert(eval.loss);
            clipped += eval.clipped_tokens;
            tokens += eval.total_tokens;
            adamw_step(&mut self.opt, &mut self.params.values, &eval.grad, &self.cfg.optimizer)?;
        }

        let step_kl = measure_step_kl(&snapshot, &self.params, &batch)?;
        if !step_kl.is_finite() {
            return Err(numerical_abort(step, "non-finite step KL", &batch, &adv));
        }
        // The tracker uses the discount computed from KLs through the
        // previous step; this step's KL is only known after the update.
        let eta = self.scheduler.current_eta();
        self.scheduler.record_kl(step_kl)?;
        if let Some(tracker) = self.tracker.as_mut() {
            for r in &batch.rollouts {
                tracker.update(r.prompt_id, r.reward, eta)?;
            }
        }

        if step.is_multiple_of(self.cfg.eval_every) || step == self.cfg.steps {
            self.last_val_acc = evaluate(&self.params, &self.val)?;
        }
        self.step = step;

        let n_tok: usize = batch.rollouts.iter().map(|r| r.entropies_old.len()).sum();
        let mean_entropy = batch.rollouts.iter().flat_map(|r| &r.entropies_old).sum::<f64>() / n_tok as f64;
        Ok(MetricsRecord {
            step,
            train_acc: batch.rewards().iter().sum::<f64>() / batch.rollouts.len() as f64,
            val_acc: self.last_val_acc,
            mean_entropy,
            mean_kl_step: step_kl,
            eta,
            mean_abs_advantage: adv.mean_abs_sequence(),
            mean_bonus: adv.mean_bonus(),
            loss: first_loss.unwrap_or(0.0),
            clip_fraction: clipped as f64 / tokens.max(1) as f64,
        })
    }

    /// Runs until `cfg.steps` steps have completed.
    pub fn run_to_end(&mut self) -> Result<Vec<MetricsRecord>> {
        let mut out = Vec::with_capacity(self.cfg.steps.saturating_sub(self.step));
        while self.step < self.cfg.steps {
            out.push(self.train_step()?);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            last_val_acc: self.last_val_acc,
            params: self.params.clone(),
            tracker: self.tracker.clone(),
            kl_window: self.scheduler.window().collect(),
            opt: self.opt.clone(),
        }
    }

    /// Restores a trainer for `cfg` from a checkpoint taken under the same
    /// config. Suites and the reference policy are re-derived from the seed.
    pub fn resume(cfg: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ckpt.params.dims != cfg.policy_dims() {
            return Err(LabError::config("checkpoint shape does not match config"));
        }
        if ckpt.opt.m.len() != ckpt.params.values.len() || ckpt.opt.v.len() != ckpt.params.values.len() {
            return Err(LabError::parse("optimizer state length does not match params"));
        }
        if cfg.algo.uses_beta_baseline() != ckpt.tracker.is_some() {
            return Err(LabError::config("checkpoint baseline state does not match algorithm"));
        }
        let (train, val) = build_suites(&cfg)?;
        let reference = policy::init_params(cfg.policy_dims(), cfg.init_scale, cfg.seed)?;
        let scheduler =
            SchedulerState::new(cfg.eta_min, cfg.eta_max, cfg.window, cfg.kl_target)?.with_window(ckpt.kl_window)?;
        Ok(Self {
            cfg,
            train,
            val,
            params: ckpt.params,
            reference,
            tracker: ckpt.tracker,
            scheduler,
            opt: ckpt.opt,
            step: ckpt.step,
            last_val_acc: ckpt.last_val_acc,
        })
    }
}

/// Output of [`run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<MetricsRecord>,
    pub checkpoint: Checkpoint,
    pub final_val_sampled: f64,
}

pub fn run(cfg: &TrainConfig) -> Result<RunOutput> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let metrics = trainer.run_to_end()?;
    let final_val_sampled = evaluate_sampled(&trainer.params, &trainer.val, cfg.seed)?;
    Ok(RunOutput {
        metrics,
        checkpoint: trainer.checkpoint(),
        final_val_sampled,
    })
}

/// Everything needed to resume a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub last_val_acc: f64,
    pub params: PolicyParams,
    pub tracker: Option<BetaTracker>,
    pub kl_window: Vec<f64>,
    pub opt: AdamState,
}

const CKPT_HEADER: &str = "# rlvr-checkpoint v1";

impl Checkpoint {
    /// Sectioned text: `[state]`, `[params]`, `[tracker]`, `[scheduler]`,
    /// `[optimizer]`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CKPT_HEADER}").unwrap();
        writeln!(out, "[state]").unwrap();
        writeln!(out, "step={}", self.step).unwrap();
        writeln!(out, "last_val_acc={:?}", self.last_val_acc).unwrap();
        writeln!(out, "[params]").unwrap();
        out.push_str(&policy::params_to_text(&self.params));
        if let Some(t) = &self.tracker {
            writeln!(out, "[tracker]").unwrap();
            out.push_str(&t.to_text());
        }
        writeln!(out, "[scheduler]").unwrap();
        for kl in &self.kl_window {
            writeln!(out, "{kl:?}").unwrap();
        }
        writeln!(out, "[optimizer]").unwrap();
        writeln!(out, "t={}", self.opt.t).unwrap();
        for (m, v) in self.opt.m.iter().zip(&self.opt.v) {
            writeln!(out, "{m:?} {v:?}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CKPT_HEADER) {
            return Err(LabError::parse("missing checkpoint header"));
        }
        let mut sections: BTreeMap<&str, String> = BTreeMap::new();
        let mut current: Option<&str> = None;
        for line in lines {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(name);
                sections.entry(name).or_default();
                continue;
            }
            let name = current.ok_or_else(|| LabError::parse("content before first section"))?;
            let s = sections.get_mut(name).expect("section exists");
            s.push_str(line);
            s.push('\n');
        }
        let section = |name: &str| {
            sections
                .get(name)
                .ok_or_else(|| LabError::parse(format!("checkpoint lacks [{name}]")))
        };
        let kv = |body: &str, key: &str| -> Result<String> {
            body.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .map(str::to_string)
                .ok_or_else(|| LabError::parse(format!("checkpoint lacks {key}")))
        };
        let state = section("state")?;
        let step: usize = kv(state, "step")?.parse().map_err(|_| LabError::parse("bad step"))?;
        let last_val_acc: f64 = kv(state, "last_val_acc")?
            .parse()
            .map_err(|_| LabError::parse("bad last_val_acc"))?;
        let params = policy::params_from_text(section("params")?)?;
        let tracker = sections.get("tracker").map(|t| BetaTracker::from_text(t)).transpose()?;
        let kl_window = section("scheduler")?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|_| LabError::parse("bad KL value")))
            .collect::<Result<_>>()?;
        let opt_body = section("optimizer")?;
        let t: u64 = kv(opt_body, "t")?.parse().map_err(|_| LabError::parse("bad optimizer t"))?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for line in opt_body.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| LabError::parse("bad optimizer line"))?;
            m.push(a.parse::<f64>().map_err(|_| LabError::parse("bad optimizer value"))?);
            v.push(b.parse::<f64>().map_err(|_| LabError::parse("bad optimizer value"))?);
        }
        Ok(Self {
            step,
            last_val_acc,
            params,
            tracker,
            kl_window,
            opt: AdamState { m, v, t },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(algo: Algo) -> TrainConfig {
        let group = algo.is_group();
        TrainConfig {
            algo,
            prompts_per_step: if group { 4 } else { 16 },
            rollouts_per_prompt: if group { 4 } else { 1 },
            steps: 6,
            embed_dim: 4,
            hidden_dim: 6,
            task: TaskConfig {
                vocab_size: 4,
                max_len: 3,
                context_dim: 6,
                count: 40,
                ..TaskConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut p = vec![0.3, -1.2, 5.0];
        let mut st = AdamState::new(3);
        adamw_step(&mut st, &mut p, &[0.0; 3], &cfg).unwrap();
        assert_eq!(p, vec![0.3, -1.2, 5.0]);
    }

    #[test]
    fn adamw_first_step_hand_trace() {
        let cfg = OptimConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let g = [0.5, -2.0, 1e-3];
        let mut p = vec![0.0; 3];
        let mut st = AdamState::new(3);
        adamw_step(&mut st, &mut p, &g, &cfg).unwrap();
        // m_hat = g, v_hat = g^2, so the step is -lr * g / (|g| + eps).
        for (pi, gi) in p.iter().zip(g) {
            let expect = -0.1 * gi / (gi.abs() + 1e-8);
            assert!((pi - expect).abs() < 1e-12, "{pi} vs {expect}");
        }
    }

    #[test]
    fn adamw_decay_only() {
        let cfg = OptimConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..OptimConfig::default()
        };
        let mut p = vec![2.0, -4.0];
        let mut st = AdamState::new(2);
        adamw_step(&mut st, &mut p, &[0.0; 2], &cfg).unwrap();
        assert_eq!(p, vec![2.0 * 0.95, -4.0 * 0.95]);
        assert!(adamw_step(&mut st, &mut p, &[0.0; 3], &cfg).is_err());
    }

    #[test]
    fn surrogate_clip_cases() {
        assert_eq!(surrogate_token(1.0, 0.7, 0.2), (0.7, 0.7, false));
        let (v, w, b) = surrogate_token(1.5, 1.0, 0.2);
        assert!((v - 1.2).abs() < 1e-12);
        assert_eq!(w, 0.0);
        assert!(b);
        // Low ratio with negative advantage is clipped too.
        let (v, w, b) = surrogate_token(0.5, -1.0, 0.2);
        assert!((v + 0.8).abs() < 1e-12);
        assert_eq!((w, b), (0.0, true));
        // Low ratio with positive advantage keeps the gradient.
        let (_, w, b) = surrogate_token(0.5, 1.0, 0.2);
        assert_eq!((w, b), (0.5, false));
    }

    #[test]
    fn validation_catches_inconsistencies() {
        let mut c = tiny(Algo::Grpo);
        c.rollouts_per_prompt = 1;
        assert!(c.validate().is_err());
        let mut c = tiny(Algo::Mssr);
        c.rollouts_per_prompt = 2;
        assert!(c.validate().is_err());
        let mut c = tiny(Algo::Mssr);
        c.prompts_per_step = 1000;
        assert!(c.validate().is_err());
        let mut c = tiny(Algo::Mssr);
        c.gamma = -1.0;
        assert!(c.validate().is_err());
        assert!(tiny(Algo::Mssr).validate().is_ok());
    }

    #[test]
    fn evaluate_uniform_and_perfect() {
        let cfg = tiny(Algo::Mvsr);
        let (_, val) = build_suites(&cfg).unwrap();
        let zero = PolicyParams::zeros(cfg.policy_dims()).unwrap();
        // Ties go to token 0.
        let hit_rate = val.prompts.iter().filter(|p| p.answer == 0).count() as f64 / val.len() as f64;
        assert_eq!(evaluate(&zero, &val).unwrap(), hit_rate);
        assert_eq!(evaluate(&zero, &val).unwrap(), evaluate(&zero, &val).unwrap());
    }

    #[test]
    fn step_kl_matches_backprop_kl() {
        let cfg = tiny(Algo::Mvsr);
        let mut t = Trainer::new(cfg).unwrap();
        let old = t.params.clone();
        let prompts = t.batch_prompts(1);
        let batch = collect_rollouts(&old, &prompts, 1, 3, 1, false).unwrap();
        assert_eq!(measure_step_kl(&old, &old, &batch).unwrap(), 0.0);
        t.train_step().unwrap();
        let kl = measure_step_kl(&old, &t.params, &batch).unwrap();
        assert!(kl > 0.0);
        let mut total = 0.0;
        for (p, r) in batch.prompts.iter().zip(&batch.rollouts) {
            total += policy::backprop_kl(&old, &t.params, p, &r.tokens).unwrap().0;
        }
        assert!((kl - total / batch.rollouts.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn first_epoch_has_unit_ratio() {
        let mut t = Trainer::new(tiny(Algo::Mssr)).unwrap();
        let m = t.train_step().unwrap();
        assert_eq!(m.clip_fraction, 0.0);
    }

    #[test]
    fn multi_epoch_engages_clipping() {
        let mut cfg = tiny(Algo::ReinforcePp);
        cfg.epochs_per_batch = 8;
        cfg.optimizer.lr = 0.2;
        let mut t = Trainer::new(cfg).unwrap();
        let m = t.train_step().unwrap();
        assert!(m.clip_fraction > 0.0);
    }

    #[test]
    fn checkpoint_text_round_trip() {
        let mut t = Trainer::new(tiny(Algo::Mssr)).unwrap();
        t.train_step().unwrap();
        t.train_step().unwrap();
        let ck = t.checkpoint();
        assert_eq!(Checkpoint::from_text(&ck.to_text()).unwrap(), ck);
    }

    #[test]
    fn metrics_ranges() {
        let cfg = tiny(Algo::Mssr);
        let ln_v = (cfg.task.vocab_size as f64).ln();
        let out = run(&cfg).unwrap();
        assert_eq!(out.metrics.len(), cfg.steps);
        for m in &out.metrics {
            assert!((0.0..=1.0).contains(&m.train_acc));
            assert!((0.0..=1.0).contains(&m.val_acc));
            assert!(m.mean_entropy >= 0.0 && m.mean_entropy <= ln_v + 1e-12);
            assert!(m.eta >= cfg.eta_min && m.eta <= cfg.eta_max);
            assert!(m.mean_kl_step >= 0.0);
        }
    }
}
