//! Adaptive discount factor driven by a sliding window of policy-change KL.
//!
//! With `kl_bar` the mean of the window:
//!
//! * `kl_bar > kl_target`: `tau = min(kl_bar / kl_target, 1)`,
//!   `eta = eta_max - tau * (eta_max - eta_min)` (linear decay);
//! * otherwise: `tau = kl_bar / kl_target`,
//!   `eta = eta_min + tau * (eta_max - eta_min)` (linear growth).
//!
//! Before any KL is recorded `eta` is the midpoint of the range.

use std::collections::VecDeque;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerState {
    window: VecDeque<f64>,
    capacity: usize,
    pub eta_min: f64,
    pub eta_max: f64,
    pub kl_target: f64,
    current_eta: f64,
}

impl SchedulerState {
    pub fn new(eta_min: f64, eta_max: f64, window: usize, kl_target: f64) -> Result<Self> {
        // eta_min == eta_max is accepted: a constant discount.
        if !(eta_min > 0.0 && eta_min <= eta_max && eta_max <= 1.0) {
            return Err(LabError::config(format!(
                "need 0 < eta_min <= eta_max <= 1, got eta_min={eta_min}, eta_max={eta_max}"
            )));
        }
        if window < 1 {
            return Err(LabError::config("window size N must be >= 1"));
        }
        if !(kl_target > 0.0 && kl_target.is_finite()) {
            return Err(LabError::config(format!("kl_target must be > 0, got {kl_target}")));
        }
        Ok(Self {
            window: VecDeque::with_capacity(window + 1),
            capacity: window,
            eta_min,
            eta_max,
            kl_target,
            current_eta: 0.5 * (eta_min + eta_max),
        })
    }

    pub fn window_size(&self) -> usize {
        self.capacity
    }

    pub fn window(&self) -> impl Iterator<Item = f64> + '_ {
        self.window.iter().copied()
    }

    /// Mean KL over the window, or `None` before the first record.
    pub fn mean_kl(&self) -> Option<f64> {
        if self.window.is_empty() {
            None
        } else {
            Some(self.window.iter().sum::<f64>() / self.window.len() as f64)
        }
    }

    pub fn current_eta(&self) -> f64 {
        self.current_eta
    }

    pub fn record_kl(&mut self, kl: f64) -> Result<()> {
        if !(kl >= 0.0 && kl.is_finite()) {
            return Err(LabError::usage(format!("KL must be finite and >= 0, got {kl}")));
        }
        self.window.push_back(kl);
        while self.window.len() > self.capacity {
            self.window.pop_front();
        }
        if let Some(mean) = self.mean_kl() {
            self.current_eta = eta_for(mean, self.kl_target, self.eta_min, self.eta_max);
        }
        Ok(())
    }

    /// Rebuilds a scheduler from a saved window (checkpoint resume).
    pub fn with_window(mut self, window: impl IntoIterator<Item = f64>) -> Result<Self> {
        for kl in window {
            self.record_kl(kl)?;
        }
        Ok(self)
    }
}

/// Discount factor for a given window mean.
pub fn eta_for(mean_kl: f64, kl_target: f64, eta_min: f64, eta_max: f64) -> f64 {
    let span = eta_max - eta_min;
    if mean_kl > kl_target {
        let tau = (mean_kl / kl_target).min(1.0);
        eta_max - tau * span
    } else {
        let tau = mean_kl / kl_target;
        eta_min + tau * span
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_scheduler() -> SchedulerState {
        SchedulerState::new(0.875, 0.96, 20, 0.01).unwrap()
    }

    #[test]
    fn initial_eta_is_midpoint() {
        let s = default_scheduler();
        assert!((s.current_eta() - 0.9175).abs() < 1e-12);
        assert_eq!(s.window_size(), 20);
        assert_eq!(s.kl_target, 0.01);
        assert!(s.mean_kl().is_none());
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(SchedulerState::new(0.0, 0.9, 20, 0.01).is_err());
        assert!(SchedulerState::new(0.95, 0.9, 20, 0.01).is_err());
        assert!(SchedulerState::new(0.8, 1.1, 20, 0.01).is_err());
        assert!(SchedulerState::new(0.8, 0.9, 0, 0.01).is_err());
        assert!(SchedulerState::new(0.8, 0.9, 20, 0.0).is_err());
        assert!(default_scheduler().record_kl(-1e-3).is_err());
        assert!(default_scheduler().record_kl(f64::NAN).is_err());
    }

    #[test]
    fn hand_evaluations() {
        assert!((eta_for(0.02, 0.01, 0.875, 0.96) - 0.875).abs() < 1e-12);
        assert!((eta_for(0.005, 0.01, 0.875, 0.96) - 0.9175).abs() < 1e-12);
        assert_eq!(eta_for(0.0, 0.01, 0.875, 0.96), 0.875);
        // Boundary goes to the growth branch.
        assert!((eta_for(0.01, 0.01, 0.875, 0.96) - 0.96).abs() < 1e-12);
    }

    #[test]
    fn degenerate_range_is_constant() {
        let mut s = SchedulerState::new(0.9, 0.9, 5, 0.01).unwrap();
        for kl in [0.0, 0.5, 0.001, 0.01] {
            s.record_kl(kl).unwrap();
            assert_eq!(s.current_eta(), 0.9);
        }
    }

    #[test]
    fn window_eviction() {
        let mut s = default_scheduler();
        for _ in 0..20 {
            s.record_kl(0.01).unwrap();
        }
        let before: Vec<f64> = s.window().collect();
        s.record_kl(0.01).unwrap();
        assert_eq!(s.window().collect::<Vec<_>>(), before);

        let mut s = default_scheduler();
        for i in 0..23 {
            s.record_kl(i as f64).unwrap();
        }
        assert_eq!(s.window().collect::<Vec<_>>(), (3..23).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn recompute_is_idempotent() {
        let mut s = default_scheduler();
        s.record_kl(0.004).unwrap();
        let a = s.current_eta();
        let b = s.current_eta();
        assert_eq!(a, b);
        assert_eq!(eta_for(s.mean_kl().unwrap(), 0.01, 0.875, 0.96), a);
    }

    proptest! {
        #[test]
        fn eta_stays_in_range(kls in prop::collection::vec(0.0f64..0.1, 1..100)) {
            let mut s = default_scheduler();
            for kl in kls {
                s.record_kl(kl).unwrap();
                prop_assert!(s.current_eta() >= 0.875 && s.current_eta() <= 0.96);
            }
        }

        #[test]
        fn growth_is_monotone(a in 0.0f64..=0.01, b in 0.0f64..=0.01) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(eta_for(lo, 0.01, 0.875, 0.96) <= eta_for(hi, 0.01, 0.875, 0.96));
        }

        #[test]
        fn decay_branch_is_eta_min(excess in 1e-12f64..10.0) {
            prop_assert_eq!(eta_for(0.01 + excess, 0.01, 0.875, 0.96), 0.875);
        }
    }
}
