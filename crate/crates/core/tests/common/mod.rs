//! Shared fixtures for integration tests.
#![allow(dead_code)]

use rlvr_lab::advantage::{self, AdvantageBatch, ShapingParams};
use rlvr_lab::env::{self, Difficulty, TaskConfig, TaskSuite};
use rlvr_lab::oracle;
use rlvr_lab::policy::{self, PolicyDims, PolicyParams};
use rlvr_lab::trainer::{self, Regularizers, RolloutBatch, StepObjective};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// V=3, T=2, four prompts.
pub fn mini_task() -> TaskConfig {
    TaskConfig {
        vocab_size: 3,
        max_len: 2,
        context_dim: 4,
        num_questions: 2,
        count: 4,
        difficulty: Difficulty::Easy,
        seed: 3,
    }
}

pub fn mini_suite() -> TaskSuite {
    env::make_task_suite(&mini_task()).unwrap()
}

pub fn mini_dims() -> PolicyDims {
    PolicyDims {
        vocab_size: 3,
        max_len: 2,
        context_dim: 4,
        num_questions: 2,
        embed_dim: 3,
        hidden_dim: 4,
    }
}

pub fn mini_params(seed: u64) -> PolicyParams {
    policy::init_params(mini_dims(), 0.7, seed).unwrap()
}

/// Perturbs every coordinate by `N(0, scale^2)`-ish deterministic noise.
pub fn perturbed(params: &PolicyParams, seed: u64, scale: f64) -> PolicyParams {
    let noise = policy::init_params(params.dims, scale, seed ^ 0x5eed).unwrap();
    let mut out = params.clone();
    for (v, n) in out.values.iter_mut().zip(&noise.values) {
        *v += n;
    }
    // Biases are zero in `init_params`; shift them too.
    for (i, v) in out.values.iter_mut().enumerate() {
        *v += scale * 0.1 * ((i as f64 * 0.37 + seed as f64).sin());
    }
    out
}

/// Full train-step objective on the miniature config with every
/// regularizer switched on. Returns the batch, advantages, reference and
/// snapshot so the caller can build a [`StepObjective`].
pub struct MiniStep {
    pub batch: RolloutBatch,
    pub adv: AdvantageBatch,
    pub reference: PolicyParams,
    pub snapshot: PolicyParams,
    pub reg: Regularizers,
    pub clip_eps: f64,
}

impl MiniStep {
    pub fn new(seed: u64) -> Self {
        let suite = mini_suite();
        let snapshot = mini_params(seed);
        let reference = mini_params(seed + 100);
        let batch = trainer::collect_rollouts(&snapshot, &suite.prompts, 2, seed, 1, false).unwrap();
        let raw: Vec<f64> = batch
            .rollouts
            .iter()
            .enumerate()
            .map(|(i, r)| f64::from(r.reward) - 0.3 - 0.1 * i as f64)
            .collect();
        let shaping = ShapingParams {
            gamma: 0.4,
            lambda: 0.3,
            guard: false,
        };
        let adv = advantage::single_rollout_pipeline(&raw, &batch.entropies(), true, Some(&shaping), 1e-6).unwrap();
        Self {
            batch,
            adv,
            reference,
            snapshot,
            reg: Regularizers {
                kl_ref_coef: 0.05,
                entropy_loss_coef: 0.03,
                crossmodal_coef: 0.07,
            },
            clip_eps: 0.2,
        }
    }

    pub fn objective(&self) -> StepObjective<'_> {
        StepObjective::new(&self.batch, &self.adv, &self.reference, &self.snapshot, self.clip_eps, self.reg)
    }
}

/// Max relative error between the analytic step-loss gradient and central
/// differences, at `params`.
pub fn step_loss_grad_error(step: &MiniStep, params: &PolicyParams) -> f64 {
    let obj = step.objective();
    let analytic = obj.evaluate(params, false).unwrap().grad;
    let fd = oracle::finite_diff_params(|q| obj.loss(q).unwrap(), params, FD_STEP);
    oracle::max_relative_error(&analytic, &fd)
}

/// Smallest distance of any token ratio from the clip boundaries.
pub fn min_clip_margin(step: &MiniStep, params: &PolicyParams) -> f64 {
    let mut margin = f64::INFINITY;
    for (p, r) in step.batch.prompts.iter().zip(&step.batch.rollouts) {
        let (lp, _) = policy::logprobs_and_entropy(params, p, &r.tokens).unwrap();
        for (new, old) in lp.iter().zip(&r.logprobs_old) {
            let rho = (new - old).exp();
            margin = margin
                .min((rho - (1.0 + step.clip_eps)).abs())
                .min((rho - (1.0 - step.clip_eps)).abs());
        }
    }
    margin
}

/// Gradient errors (weighted log-prob, KL, entropy) for one seed.
pub fn primitive_grad_errors(seed: u64) -> [(String, f64); 3] {
    let suite = mini_suite();
    let params = mini_params(seed);
    let other = mini_params(seed + 1000);
    let p = &suite.prompts[seed as usize % suite.len()];
    let tokens = [seed as usize % 3, (seed as usize + 2) % 3];
    let weights = [0.7, -1.3];

    let g = policy::backprop_weighted_logprob(&params, p, &tokens, &weights).unwrap();
    let fd = oracle::finite_diff_params(
        |q| {
            let (lp, _) = policy::logprobs_and_entropy(q, p, &tokens).unwrap();
            lp.iter().zip(weights).map(|(l, w)| l * w).sum()
        },
        &params,
        FD_STEP,
    );
    let e1 = oracle::max_relative_error(&g, &fd);

    let (_, g) = policy::backprop_kl(&params, &other, p, &tokens).unwrap();
    let fd = oracle::finite_diff_params(|q| policy::backprop_kl(q, &other, p, &tokens).unwrap().0, &params, FD_STEP);
    let e2 = oracle::max_relative_error(&g, &fd);

    let (_, g) = policy::backprop_entropy(&params, p, &tokens).unwrap();
    let fd = oracle::finite_diff_params(|q| policy::backprop_entropy(q, p, &tokens).unwrap().0, &params, FD_STEP);
    let e3 = oracle::max_relative_error(&g, &fd);

    [
        ("weighted_logprob".into(), e1),
        ("kl".into(), e2),
        ("entropy".into(), e3),
    ]
}

/// Mean of the last `n` entries of a metric column.
pub fn tail_mean(values: &[f64], n: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(n)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}
