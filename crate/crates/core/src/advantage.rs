//! Advantage estimators.
//!
//! Group methods (GRPO, RLOO) normalize within the rollouts of one prompt.
//! Group-free methods compute one scalar per rollout, normalize across the
//! whole batch, broadcast the result to every token, and (for MSSR) add the
//! entropy bonus `psi_t = min(|A_t| / gamma, lambda * H_t)`.

use crate::error::{LabError, Result};

/// Per-rollout and per-token advantages for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    /// One value per rollout.
    pub sequence: Vec<f64>,
    /// `shaped[i][t]`: the weight applied to token `t` of rollout `i`.
    pub shaped: Vec<Vec<f64>>,
    /// `bonus[i][t]`: the entropy bonus that was added (zero when unshaped).
    pub bonus: Vec<Vec<f64>>,
    pub shaping_applied: bool,
}

impl AdvantageBatch {
    /// Broadcast sequence advantages to `len` tokens without shaping.
    pub fn broadcast(sequence: Vec<f64>, len: usize) -> Self {
        let shaped = sequence.iter().map(|&a| vec![a; len]).collect();
        let bonus = sequence.iter().map(|_| vec![0.0; len]).collect();
        Self {
            sequence,
            shaped,
            bonus,
            shaping_applied: false,
        }
    }

    pub fn mean_abs_sequence(&self) -> f64 {
        mean(self.sequence.iter().map(|a| a.abs()))
    }

    pub fn mean_bonus(&self) -> f64 {
        mean(self.bonus.iter().flatten().copied())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn population_mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn all_equal(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] == w[1])
}

/// `(x - mean) / max(std, eps_std)` with population std; constant input
/// maps to zeros.
fn standardize(values: &[f64], eps_std: f64) -> Vec<f64> {
    if all_equal(values) {
        return vec![0.0; values.len()];
    }
    let (m, sd) = population_mean_std(values);
    values.iter().map(|v| (v - m) / sd.max(eps_std)).collect()
}

/// Group-normalized advantages for the `G` rollouts of one prompt.
pub fn grpo_advantages(rewards: &[f64], eps_std: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(LabError::usage(format!(
            "GRPO needs a group of at least 2 rollouts, got {}",
            rewards.len()
        )));
    }
    Ok(standardize(rewards, eps_std))
}

/// Leave-one-out advantages: `r_i - mean_{j != i} r_j`.
pub fn rloo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(LabError::usage(format!("RLOO needs a group of at least 2 rollouts, got {g}")));
    }
    let total: f64 = rewards.iter().sum();
    Ok(rewards
        .iter()
        .map(|&r| r - (total - r) / (g - 1) as f64)
        .collect())
}

/// Batch-wide standardization.
pub fn batch_normalize(values: &[f64], eps_std: f64) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(LabError::usage(format!(
            "batch normalization needs at least 2 values, got {}",
            values.len()
        )));
    }
    Ok(standardize(values, eps_std))
}

/// `A = r - v_prev` for one rollout.
pub fn single_rollout_advantage(reward: u8, baseline_prev: f64) -> f64 {
    f64::from(reward) - baseline_prev
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapingParams {
    pub gamma: f64,
    pub lambda: f64,
    /// Caps the bonus at `|A_t|` so a negative advantage can at most reach zero.
    pub guard: bool,
}

impl ShapingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(LabError::config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LabError::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// The bonus for one token. `entropy` is a recorded sampling-time value,
    /// so it is a constant for differentiation purposes.
    pub fn bonus(&self, advantage: f64, entropy: f64) -> f64 {
        let psi = (advantage.abs() / self.gamma).min(self.lambda * entropy);
        if self.guard {
            psi.min(advantage.abs())
        } else {
            psi
        }
    }
}

/// Entropy-shaped advantages `A_t + psi_t` and the bonuses `psi_t`.
pub fn entropy_shape(
    advantages: &[f64],
    entropies: &[f64],
    shaping: &ShapingParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    shaping.validate()?;
    if advantages.len() != entropies.len() {
        return Err(LabError::usage(format!(
            "advantage length {} != entropy length {}",
            advantages.len(),
            entropies.len()
        )));
    }
    if let Some(h) = entropies.iter().find(|h| !(**h >= 0.0)) {
        return Err(LabError::usage(format!("entropies must be >= 0, got {h}")));
    }
    let bonus: Vec<f64> = advantages
        .iter()
        .zip(entropies)
        .map(|(&a, &h)| shaping.bonus(a, h))
        .collect();
    let shaped = advantages.iter().zip(&bonus).map(|(a, b)| a + b).collect();
    Ok((shaped, bonus))
}

/// Group-free pipeline: normalize sequence advantages across the batch
/// (optionally), broadcast per token, then shape with sampling-time entropies
/// (optionally).
pub fn single_rollout_pipeline(
    raw: &[f64],
    entropies: &[Vec<f64>],
    normalize: bool,
    shaping: Option<&ShapingParams>,
    eps_std: f64,
) -> Result<AdvantageBatch> {
    if raw.len() != entropies.len() {
        return Err(LabError::usage("one entropy row per rollout required"));
    }
    let sequence = if normalize {
        batch_normalize(raw, eps_std)?
    } else {
        raw.to_vec()
    };
    let Some(shaping) = shaping else {
        let len = entropies.first().map_or(0, Vec::len);
        return Ok(AdvantageBatch::broadcast(sequence, len));
    };
    let mut shaped = Vec::with_capacity(sequence.len());
    let mut bonus = Vec::with_capacity(sequence.len());
    for (&a, h) in sequence.iter().zip(entropies) {
        let (s, b) = entropy_shape(&vec![a; h.len()], h, shaping)?;
        shaped.push(s);
        bonus.push(b);
    }
    Ok(AdvantageBatch {
        sequence,
        shaped,
        bonus,
        shaping_applied: true,
    })
}
