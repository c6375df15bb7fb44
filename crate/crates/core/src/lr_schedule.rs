//! Cyclical learning-rate schedule with per-cycle amplitude halving.
//!
//! The rate oscillates triangularly between `base_lr` and a peak that starts at
//! `max_lr`. Each completed cycle halves the distance between peak and base.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("base_lr ({base}) must be positive and below max_lr ({max})")]
    InvalidRange { base: f64, max: f64 },
    #[error("step_size must be at least 1 epoch")]
    ZeroStep,
}

/// Triangular cyclical schedule, indexed by zero-based epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CyclicalSchedule {
    pub base_lr: f64,
    pub max_lr: f64,
    /// Epochs per half-cycle.
    pub step_size: usize,
}

impl Default for CyclicalSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-5,
            max_lr: 1e-3,
            step_size: 4,
        }
    }
}

impl CyclicalSchedule {
    pub fn new(base_lr: f64, max_lr: f64, step_size: usize) -> Result<Self, ScheduleError> {
        let schedule = Self {
            base_lr,
            max_lr,
            step_size,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(self.base_lr > 0.0 && self.base_lr < self.max_lr && self.max_lr.is_finite()) {
            return Err(ScheduleError::InvalidRange {
                base: self.base_lr,
                max: self.max_lr,
            });
        }
        if self.step_size == 0 {
            return Err(ScheduleError::ZeroStep);
        }
        Ok(())
    }

    /// One-based cycle index containing `epoch`.
    pub fn cycle(&self, epoch: usize) -> usize {
        epoch / (2 * self.step_size) + 1
    }

    /// Amplitude multiplier for a cycle: 1, 1/2, 1/4, ...
    pub fn scale(cycle: usize) -> f64 {
        let exponent = cycle.saturating_sub(1).min(i32::MAX as usize) as i32;
        0.5f64.powi(exponent)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let cycle = self.cycle(epoch);
        let step = self.step_size as f64;
        let x = (epoch as f64 / step - 2.0 * cycle as f64 + 1.0).abs();
        let ramp = (1.0 - x).max(0.0);
        self.base_lr + (self.max_lr - self.base_lr) * ramp * Self::scale(cycle)
    }

    /// `(epoch, lr)` pairs for epochs `0..epochs`.
    pub fn curve(&self, epochs: usize) -> Vec<(usize, f64)> {
        (0..epochs).map(|e| (e, self.lr_at(e))).collect()
    }

    pub fn to_csv(&self, epochs: usize) -> String {
        let mut out = String::from("epoch,lr\n");
        for (epoch, lr) in self.curve(epochs) {
            out.push_str(&format!("{epoch},{lr:.16e}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn starts_at_base() {
        let s = CyclicalSchedule::default();
        assert_eq!(s.lr_at(0), 1e-5);
    }

    #[test]
    fn first_three_peaks_halve() {
        let s = CyclicalSchedule::default();
        assert_eq!(s.lr_at(4), 1e-3);
        assert!((s.lr_at(12) - 5.05e-4).abs() <= 4.0 * f64::EPSILON * 5.05e-4);
        assert!((s.lr_at(20) - 2.575e-4).abs() <= 4.0 * f64::EPSILON * 2.575e-4);
    }

    #[test]
    fn rejects_inverted_range() {
        assert!(CyclicalSchedule::new(1e-3, 1e-5, 4).is_err());
        assert_eq!(
            CyclicalSchedule::new(1e-5, 1e-3, 0),
            Err(ScheduleError::ZeroStep)
        );
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let csv = CyclicalSchedule::default().to_csv(3);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "epoch,lr");
        let lr: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(lr, 1e-5);
    }

    proptest! {
        #[test]
        fn stays_within_bounds(epoch in 0usize..10_000, step in 1usize..20) {
            let s = CyclicalSchedule::new(1e-5, 1e-3, step).unwrap();
            let lr = s.lr_at(epoch);
            prop_assert!(lr >= s.base_lr && lr <= s.max_lr);
        }

        #[test]
        fn cycle_boundaries_return_to_base(c in 0usize..200, step in 1usize..20) {
            let s = CyclicalSchedule::new(1e-5, 1e-3, step).unwrap();
            prop_assert_eq!(s.lr_at(2 * step * c), s.base_lr);
        }

        #[test]
        fn peak_amplitude_halves_exactly(c in 1usize..40, step in 1usize..20) {
            let s = CyclicalSchedule::new(1e-5, 1e-3, step).unwrap();
            let peak = s.lr_at((2 * c - 1) * step);
            let expected = (s.max_lr - s.base_lr) * 0.5f64.powi(c as i32 - 1);
            prop_assert!(((peak - s.base_lr) - expected).abs() <= 4.0 * f64::EPSILON * s.max_lr);
        }
    }
}
