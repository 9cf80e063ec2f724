//! Brute-force ground truth on miniature instances.
//!
//! For `V^T` small enough every response can be enumerated, which gives the
//! exact expected reward `J = sum_o pi(o) r(o)` and the exact policy
//! gradient `sum_o pi(o) r(o) grad log pi(o)`. These serve as oracles for
//! the sampled estimators and for the hand-written backprop.

use rand::Rng;
use serde::Serialize;

use crate::advantage::ShapingParams;
use crate::env::{self, Prompt, TaskSuite};
use crate::error::{LabError, Result};
use crate::policy::{self, PolicyParams};
use crate::rng::{self, purpose};

/// Largest outcome space the oracle will enumerate.
pub const MAX_OUTCOMES: usize = 100_000;

#[derive(Debug, Clone, Serialize)]
pub struct EnumerationReport {
    pub expected_reward: f64,
    pub gradient: Vec<f64>,
    pub outcome_count: usize,
    pub probabilities: Vec<f64>,
    pub rewards: Vec<u8>,
}

fn outcome_count(params: &PolicyParams) -> Result<usize> {
    let v = params.dims.vocab_size;
    let t = params.dims.max_len;
    let count = (0..t).try_fold(1usize, |acc, _| acc.checked_mul(v).filter(|&n| n <= MAX_OUTCOMES));
    count.ok_or_else(|| {
        LabError::usage(format!(
            "V^T = {v}^{t} exceeds the enumeration limit of {MAX_OUTCOMES}; \
             use a miniature config (e.g. V=3, T=2 or V=2, T=3)"
        ))
    })
}

/// The `index`-th sequence in lexicographic order, first token most significant.
fn decode(mut index: usize, v: usize, t: usize) -> Vec<usize> {
    let mut seq = vec![0; t];
    for slot in seq.iter_mut().rev() {
        *slot = index % v;
        index /= v;
    }
    seq
}

/// All outcomes with their probabilities, rewards, and the gradient of
/// `sum_o pi(o) (r(o) - b) log pi(o)` with `pi(o) (r(o) - b)` frozen.
pub fn enumerate_with_baseline(params: &PolicyParams, prompt: &Prompt, baseline: f64) -> Result<EnumerationReport> {
    let n = outcome_count(params)?;
    let (v, t) = (params.dims.vocab_size, params.dims.max_len);
    let mut probabilities = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    let mut gradient = vec![0.0; params.values.len()];
    let mut expected_reward = 0.0;
    for i in 0..n {
        let seq = decode(i, v, t);
        let (lp, _) = policy::logprobs_and_entropy(params, prompt, &seq)?;
        let prob = lp.iter().sum::<f64>().exp();
        let r = env::verify(prompt, &seq);
        let w = prob * (f64::from(r) - baseline);
        if w != 0.0 {
            policy::accumulate_weighted_logprob(params, prompt, &seq, &vec![w; t], &mut gradient)?;
        }
        expected_reward += prob * f64::from(r);
        probabilities.push(prob);
        rewards.push(r);
    }
    Ok(EnumerationReport {
        expected_reward,
        gradient,
        outcome_count: n,
        probabilities,
        rewards,
    })
}

pub fn enumerate(params: &PolicyParams, prompt: &Prompt) -> Result<EnumerationReport> {
    enumerate_with_baseline(params, prompt, 0.0)
}

pub fn enumerate_expected_reward(params: &PolicyParams, prompt: &Prompt) -> Result<f64> {
    Ok(enumerate(params, prompt)?.expected_reward)
}

pub fn enumerate_policy_gradient(params: &PolicyParams, prompt: &Prompt) -> Result<Vec<f64>> {
    Ok(enumerate(params, prompt)?.gradient)
}

/// Suite-averaged exact `J` and `grad J`.
pub fn enumerate_suite(params: &PolicyParams, suite: &TaskSuite) -> Result<(f64, Vec<f64>)> {
    if suite.is_empty() {
        return Err(LabError::usage("cannot enumerate an empty suite"));
    }
    let n = suite.len() as f64;
    let mut j = 0.0;
    let mut grad = vec![0.0; params.values.len()];
    for p in &suite.prompts {
        let rep = enumerate(params, p)?;
        j += rep.expected_reward / n;
        for (g, x) in grad.iter_mut().zip(rep.gradient) {
            *g += x / n;
        }
    }
    Ok((j, grad))
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Floor on the denominator of [`max_relative_error`]; coordinates whose
/// true gradient is below it are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, REL_ERR_FLOOR)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

/// Finite-difference gradient of a scalar function of policy parameters.
pub fn finite_diff_params<F>(f: F, params: &PolicyParams, h: f64) -> Vec<f64>
where
    F: Fn(&PolicyParams) -> f64,
{
    let mut scratch = params.clone();
    finite_diff_grad(
        |x| {
            scratch.values.copy_from_slice(x);
            f(&scratch)
        },
        &params.values,
        h,
    )
}

/// Single-rollout gradient estimators checked against enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimator {
    /// `(r - b) grad log pi(o)` with a constant `b`: unbiased.
    FixedBaseline { baseline: f64 },
    /// Baseline `(1 - leak) b + leak r` that peeks at the current reward;
    /// the estimate shrinks to `(1 - leak) grad J`. Negative control.
    LeakyBaseline { baseline: f64, leak: f64 },
    /// Fixed baseline plus the entropy bonus on each token. Not an unbiased
    /// estimator of `grad J`; the report documents its deviation.
    EntropyShaped { baseline: f64, gamma: f64, lambda: f64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct BiasReport {
    pub estimator: Estimator,
    pub samples: usize,
    pub seed: u64,
    pub exact_gradient: Vec<f64>,
    pub mean_estimate: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub z_scores: Vec<f64>,
    pub max_abs_z: f64,
    /// Coordinates with non-zero sample variance.
    pub tested_coordinates: usize,
    /// Probability that an unbiased estimator still trips `|z| >= 3` on at
    /// least one tested coordinate, treating coordinates as independent.
    pub expected_false_alarm_rate: f64,
    pub pass: bool,
}

/// Threshold on per-coordinate z-scores.
pub const Z_THRESHOLD: f64 = 3.0;

/// Two-sided normal tail mass beyond 3 sigma.
const TAIL_3_SIGMA: f64 = 0.002_699_796_063_260_2;

pub fn estimator_bias_check(
    estimator: Estimator,
    params: &PolicyParams,
    suite: &TaskSuite,
    samples: usize,
    seed: u64,
) -> Result<BiasReport> {
    if samples < 2 {
        return Err(LabError::usage("bias check needs at least 2 samples"));
    }
    let (_, exact) = enumerate_suite(params, suite)?;
    let dim = params.values.len();
    let t = params.dims.max_len;
    let mut sum = vec![0.0; dim];
    let mut sum_sq = vec![0.0; dim];
    let mut rng = rng::stream(seed, &[purpose::ORACLE]);
    let mut g = vec![0.0; dim];
    for _ in 0..samples {
        let prompt = &suite.prompts[rng.random_range(0..suite.len())];
        let rollout = policy::sample_rollout(params, prompt, &mut rng)?;
        let r = f64::from(rollout.reward);
        let weights: Vec<f64> = match estimator {
            Estimator::FixedBaseline { baseline } => vec![r - baseline; t],
            Estimator::LeakyBaseline { baseline, leak } => {
                vec![r - ((1.0 - leak) * baseline + leak * r); t]
            }
            Estimator::EntropyShaped { baseline, gamma, lambda } => {
                let shaping = ShapingParams {
                    gamma,
                    lambda,
                    guard: false,
                };
                let a = r - baseline;
                rollout.entropies_old.iter().map(|&h| a + shaping.bonus(a, h)).collect()
            }
        };
        g.iter_mut().for_each(|x| *x = 0.0);
        policy::accumulate_weighted_logprob(params, prompt, &rollout.tokens, &weights, &mut g)?;
        for i in 0..dim {
            sum[i] += g[i];
            sum_sq[i] += g[i] * g[i];
        }
    }
    let n = samples as f64;
    let mut mean_estimate = Vec::with_capacity(dim);
    let mut standard_errors = Vec::with_capacity(dim);
    let mut z_scores = Vec::with_capacity(dim);
    let mut tested = 0usize;
    for i in 0..dim {
        let m = sum[i] / n;
        let var = ((sum_sq[i] - n * m * m) / (n - 1.0)).max(0.0);
        let se = (var / n).sqrt();
        let diff = m - exact[i];
        let z = if se > 0.0 {
            tested += 1;
            diff / se
        } else if diff.abs() <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        };
        mean_estimate.push(m);
        standard_errors.push(se);
        z_scores.push(z);
    }
    let max_abs_z = z_scores.iter().map(|z| z.abs()).fold(0.0, f64::max);
    Ok(BiasReport {
        estimator,
        samples,
        seed,
        exact_gradient: exact,
        mean_estimate,
        standard_errors,
        z_scores,
        max_abs_z,
        tested_coordinates: tested,
        expected_false_alarm_rate: 1.0 - (1.0 - TAIL_3_SIGMA).powi(tested as i32),
        pass: max_abs_z < Z_THRESHOLD,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyDims;

    fn dims(v: usize, t: usize) -> PolicyDims {
        PolicyDims {
            vocab_size: v,
            max_len: t,
            context_dim: 2,
            num_questions: 1,
            embed_dim: 2,
            hidden_dim: 3,
        }
    }

    fn prompt(answer: usize) -> Prompt {
        Prompt {
            id: 0,
            context: vec![0.4, -0.7],
            question_id: 0,
            answer,
        }
    }

    #[test]
    fn uniform_binary_single_step() {
        let p = PolicyParams::zeros(dims(2, 1)).unwrap();
        assert!((enumerate_expected_reward(&p, &prompt(1)).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn deterministic_correct_policy() {
        let d = dims(3, 2);
        let mut p = PolicyParams::zeros(d).unwrap();
        let n = p.values.len();
        // Output bias is the last V entries.
        p.values[n - 3..].copy_from_slice(&[-1e3, 0.0, -1e3]);
        assert!((enumerate_expected_reward(&p, &prompt(1)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_softmax_last_step() {
        let d = dims(3, 2);
        let mut p = PolicyParams::zeros(d).unwrap();
        let n = p.values.len();
        p.values[n - 3..].copy_from_slice(&[0.0, 0.0, 2f64.ln()]);
        assert!((enumerate_expected_reward(&p, &prompt(2)).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn refuses_large_spaces() {
        let p = PolicyParams::zeros(dims(20, 4)).unwrap();
        let err = enumerate(&p, &prompt(0)).unwrap_err();
        assert!(err.to_string().contains("enumeration limit"));
    }

    #[test]
    fn probabilities_normalize() {
        let p = policy::init_params(dims(3, 2), 0.8, 5).unwrap();
        let rep = enumerate(&p, &prompt(1)).unwrap();
        assert_eq!(rep.outcome_count, 9);
        assert!((rep.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert!((0.0..=1.0).contains(&rep.expected_reward));
    }

    #[test]
    fn zero_rewards_zero_gradient() {
        let mut p = policy::init_params(dims(2, 3), 0.8, 5).unwrap();
        p.values.iter_mut().for_each(|x| *x *= 1.0);
        // Answer outside the vocabulary is never hit.
        let g = enumerate_policy_gradient(&p, &prompt(7)).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn quadratic_fd_and_order() {
        let f = |x: &[f64]| 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + x[1];
        let g = finite_diff_grad(f, &[0.5, -1.0], 1e-4);
        assert!((g[0] - 5.0).abs() < 1e-8);
        assert!((g[1] - 0.0).abs() < 1e-8);

        let cubic = |x: &[f64]| x[0].sin();
        let exact = 0.3f64.cos();
        let e1 = (finite_diff_grad(cubic, &[0.3], 1e-2)[0] - exact).abs();
        let e2 = (finite_diff_grad(cubic, &[0.3], 5e-3)[0] - exact).abs();
        let ratio = e1 / e2;
        assert!((ratio - 4.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn zero_samples_rejected() {
        let p = PolicyParams::zeros(dims(3, 2)).unwrap();
        let suite = TaskSuite {
            prompts: vec![prompt(1)],
            vocab_size: 3,
            max_len: 2,
            context_dim: 2,
            num_questions: 1,
        };
        assert!(estimator_bias_check(Estimator::FixedBaseline { baseline: 0.0 }, &p, &suite, 0, 1).is_err());
    }
}
