//! Per-prompt Beta baseline for Bernoulli rewards.
//!
//! Each prompt carries pseudo-counts `(alpha, beta)` whose ratio
//! `alpha / (alpha + beta)` is the baseline. Updates discount both counts by
//! `eta` before adding the new observation, so older outcomes fade as the
//! policy moves.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaState {
    pub alpha: f64,
    pub beta: f64,
    /// Mean before the most recent update.
    pub prev_mean: f64,
}

impl BetaState {
    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BetaTracker {
    states: BTreeMap<usize, BetaState>,
}

impl BetaTracker {
    /// Initializes every prompt from its pre-training success estimate
    /// `v0 ∈ [0, 1]`: `alpha0 = v0 / (1 - eta_min)`, `beta0 = (1 - v0) / (1 - eta_min)`.
    pub fn init(initial_rewards: &BTreeMap<usize, f64>, eta_min: f64) -> Result<Self> {
        if !(eta_min > 0.0 && eta_min < 1.0) {
            return Err(LabError::config(format!("eta_min must lie in (0, 1), got {eta_min}")));
        }
        let scale = 1.0 - eta_min;
        let mut states = BTreeMap::new();
        for (&id, &v0) in initial_rewards {
            if !(0.0..=1.0).contains(&v0) {
                return Err(LabError::usage(format!(
                    "initial reward estimate for prompt {id} is {v0}, outside [0, 1]"
                )));
            }
            states.insert(
                id,
                BetaState {
                    alpha: v0 / scale,
                    beta: (1.0 - v0) / scale,
                    prev_mean: v0,
                },
            );
        }
        Ok(Self { states })
    }

    fn get(&self, id: usize) -> Result<&BetaState> {
        self.states
            .get(&id)
            .ok_or_else(|| LabError::usage(format!("prompt {id} has no baseline state")))
    }

    pub fn state(&self, id: usize) -> Result<BetaState> {
        self.get(id).copied()
    }

    pub fn mean(&self, id: usize) -> Result<f64> {
        Ok(self.get(id)?.mean())
    }

    pub fn previous_mean(&self, id: usize) -> Result<f64> {
        Ok(self.get(id)?.prev_mean)
    }

    /// `alpha <- eta * alpha + r`, `beta <- eta * beta + (1 - r)`.
    pub fn update(&mut self, id: usize, reward: u8, eta: f64) -> Result<()> {
        if reward > 1 {
            return Err(LabError::usage(format!("reward must be 0 or 1, got {reward}")));
        }
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(LabError::usage(format!("eta must lie in (0, 1], got {eta}")));
        }
        let s = self
            .states
            .get_mut(&id)
            .ok_or_else(|| LabError::usage(format!("prompt {id} has no baseline state")))?;
        let r = f64::from(reward);
        s.prev_mean = s.mean();
        s.alpha = eta * s.alpha + r;
        s.beta = eta * s.beta + (1.0 - r);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &BetaState)> {
        self.states.iter().map(|(&k, v)| (k, v))
    }

    /// One `id alpha beta prev_mean` line per prompt.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, s) in &self.states {
            writeln!(out, "{id} {:?} {:?} {:?}", s.alpha, s.beta, s.prev_mean).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut states = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || LabError::parse(format!("bad tracker line {line:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            let id: usize = f[0].parse().map_err(|_| bad())?;
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            states.insert(
                id,
                BetaState {
                    alpha: num(f[1])?,
                    beta: num(f[2])?,
                    prev_mean: num(f[3])?,
                },
            );
        }
        Ok(Self { states })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(v0: f64, eta_min: f64) -> BetaTracker {
        BetaTracker::init(&BTreeMap::from([(0, v0)]), eta_min).unwrap()
    }

    fn with_state(alpha: f64, beta: f64) -> BetaTracker {
        let mut t = single(0.5, 0.5);
        t.states.insert(
            0,
            BetaState {
                alpha,
                beta,
                prev_mean: 0.0,
            },
        );
        t
    }

    #[test]
    fn init_values() {
        let t = single(0.5, 0.875);
        let s = t.state(0).unwrap();
        assert_eq!((s.alpha, s.beta), (4.0, 4.0));
        assert_eq!(s.alpha + s.beta, 1.0 / (1.0 - 0.875));
        assert_eq!(t.previous_mean(0).unwrap(), 0.5);

        let t = single(1.0, 0.875);
        let s = t.state(0).unwrap();
        assert_eq!((s.alpha, s.beta), (8.0, 0.0));
        assert_eq!(t.mean(0).unwrap(), 1.0);

        assert_eq!(single(0.0, 0.875).mean(0).unwrap(), 0.0);
    }

    #[test]
    fn init_rejects_bad_eta() {
        let m = BTreeMap::from([(0, 0.5)]);
        assert!(BetaTracker::init(&m, 0.0).is_err());
        assert!(BetaTracker::init(&m, 1.0).is_err());
        assert!(BetaTracker::init(&m, 1.5).is_err());
    }

    #[test]
    fn mean_values() {
        assert_eq!(with_state(4.0, 4.0).mean(0).unwrap(), 0.5);
        assert!((with_state(2.8, 2.7).mean(0).unwrap() - 0.509091).abs() < 1e-6);
        assert!(single(0.5, 0.5).mean(9).is_err());
        assert!(single(0.5, 0.5).previous_mean(9).is_err());
    }

    #[test]
    fn update_hand_trace() {
        let mut t = with_state(2.0, 3.0);
        t.update(0, 1, 0.9).unwrap();
        let s = t.state(0).unwrap();
        assert!((s.alpha - 2.8).abs() < 1e-12);
        assert!((s.beta - 2.7).abs() < 1e-12);
        assert!((s.prev_mean - 0.4).abs() < 1e-12);
        assert!(t.update(0, 2, 0.9).is_err());
        assert!(t.update(7, 1, 0.9).is_err());
    }

    #[test]
    fn previous_mean_lags_one_update() {
        let mut t = single(0.5, 0.875);
        t.update(0, 1, 0.9).unwrap();
        assert_eq!(t.previous_mean(0).unwrap(), 0.5);
        assert!(t.mean(0).unwrap() > 0.5);
    }

    #[test]
    fn undiscounted_accumulation() {
        let mut t = single(0.25, 0.875);
        let (a0, b0) = (2.0, 6.0);
        let stream = [1u8, 0, 0, 1, 1, 1, 0, 1, 0, 0, 1];
        for &r in &stream {
            t.update(0, r, 1.0).unwrap();
        }
        let sum: f64 = stream.iter().map(|&r| f64::from(r)).sum();
        let expect = (a0 + sum) / (a0 + b0 + stream.len() as f64);
        assert!((t.mean(0).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn updates_are_isolated() {
        let mut t = BetaTracker::init(&BTreeMap::from([(0, 0.5), (1, 0.25)]), 0.875).unwrap();
        let before = t.state(1).unwrap();
        t.update(0, 1, 0.9).unwrap();
        assert_eq!(t.state(1).unwrap(), before);
    }

    #[test]
    fn text_round_trip() {
        let mut t = BetaTracker::init(&BTreeMap::from([(0, 0.5), (5, 0.75)]), 0.875).unwrap();
        t.update(5, 0, 0.91).unwrap();
        assert_eq!(BetaTracker::from_text(&t.to_text()).unwrap(), t);
        assert!(BetaTracker::from_text("1 2 3").is_err());
    }

    proptest! {
        #[test]
        fn counts_stay_bounded(
            v0 in 0.0f64..=1.0,
            steps in prop::collection::vec((0u8..=1, 0.875f64..=0.96), 1..300),
        ) {
            let eta_min = 0.875;
            let eta_max = 0.96;
            let mut t = single(v0, eta_min);
            let bound = (1.0 / (1.0 - eta_min)).max(1.0 / (1.0 - eta_max)) + 1.0;
            for (r, eta) in steps {
                let before = t.mean(0).unwrap();
                t.update(0, r, eta).unwrap();
                let s = t.state(0).unwrap();
                prop_assert!(s.alpha + s.beta > 0.0);
                prop_assert!(s.alpha + s.beta <= bound);
                let m = t.mean(0).unwrap();
                prop_assert!((0.0..=1.0).contains(&m));
                prop_assert!((0.0..=1.0).contains(&s.prev_mean));
                prop_assert!((f64::from(r) - s.prev_mean).abs() <= 1.0);
                if before > 0.0 && before < 1.0 {
                    if r == 1 { prop_assert!(m > before); } else { prop_assert!(m < before); }
                }
            }
        }

        #[test]
        fn unit_pseudo_count_tracks_success_rate(stream in prop::collection::vec(0u8..=1, 1..200)) {
            // eta = 1 with a unit pseudo-count split evenly: mean is the
            // Laplace-smoothed running success rate.
            let mut t = with_state(0.5, 0.5);
            let mut hits = 0.0;
            for (n, &r) in stream.iter().enumerate() {
                t.update(0, r, 1.0).unwrap();
                hits += f64::from(r);
                let oracle = (0.5 + hits) / (1.0 + (n + 1) as f64);
                prop_assert!((t.mean(0).unwrap() - oracle).abs() < 1e-12);
            }
        }
    }
}
