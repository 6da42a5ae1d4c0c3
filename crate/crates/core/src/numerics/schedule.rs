//! Step-indexed scalar schedules for learning rate, temperatures, and
//! momentum coefficients.

use crate::error::{Error, Result};

/// Linear warmup from zero to `base`, then a half-cosine from `base` to
/// `final_value` over the remaining steps. Works for decreasing (learning
/// rate) and increasing (momentum) schedules alike.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub final_value: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(base: f64, final_value: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(Error::Numeric(format!(
                "schedule warmup {warmup_steps} exceeds total {total_steps}"
            )));
        }
        Ok(CosineSchedule {
            base,
            final_value,
            warmup_steps,
            total_steps,
        })
    }

    /// Value at `step`, valid for 0 <= step <= total_steps.
    pub fn at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Numeric(format!(
                "schedule queried at step {step} past total {}",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.base * step as f64 / self.warmup_steps as f64);
        }
        let span = self.total_steps - self.warmup_steps;
        let progress = if span == 0 {
            1.0
        } else {
            (step - self.warmup_steps) as f64 / span as f64
        };
        Ok(self.final_value
            + 0.5 * (self.base - self.final_value) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Linear ramp from `start` to `end` over `ramp_steps`, then flat at `end`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearRamp {
    pub start: f64,
    pub end: f64,
    pub ramp_steps: u64,
}

impl LinearRamp {
    pub fn new(start: f64, end: f64, ramp_steps: u64) -> Self {
        LinearRamp { start, end, ramp_steps }
    }

    pub fn at(&self, step: u64) -> f64 {
        if self.ramp_steps == 0 || step >= self.ramp_steps {
            return self.end;
        }
        self.start + (self.end - self.start) * step as f64 / self.ramp_steps as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_hits_endpoints_and_midpoint() {
        let s = CosineSchedule::new(1.0, 0.1, 10, 110).unwrap();
        assert_eq!(s.at(0).unwrap(), 0.0);
        assert!((s.at(5).unwrap() - 0.5).abs() < 1e-12);
        assert!((s.at(10).unwrap() - 1.0).abs() < 1e-12);
        // cosine midpoint = average of base and final
        assert!((s.at(60).unwrap() - 0.55).abs() < 1e-12);
        assert!((s.at(110).unwrap() - 0.1).abs() < 1e-12);
        assert!(s.at(111).is_err());
    }

    #[test]
    fn cosine_supports_increasing_schedules() {
        let s = CosineSchedule::new(0.992, 1.0, 0, 100).unwrap();
        assert!((s.at(0).unwrap() - 0.992).abs() < 1e-12);
        assert!((s.at(100).unwrap() - 1.0).abs() < 1e-12);
        // monotone nondecreasing
        let mut prev = 0.0;
        for step in 0..=100 {
            let v = s.at(step).unwrap();
            assert!(v >= prev - 1e-15);
            prev = v;
        }
    }

    #[test]
    fn cosine_rejects_warmup_past_total() {
        assert!(CosineSchedule::new(1.0, 0.0, 11, 10).is_err());
    }

    #[test]
    fn zero_warmup_starts_at_base() {
        let s = CosineSchedule::new(0.003, 0.0001, 0, 50).unwrap();
        assert!((s.at(0).unwrap() - 0.003).abs() < 1e-12);
    }

    #[test]
    fn ramp_endpoints_and_saturation() {
        let ramp = LinearRamp::new(0.04, 0.07, 100);
        assert!((ramp.at(0) - 0.04).abs() < 1e-12);
        assert!((ramp.at(50) - 0.055).abs() < 1e-12);
        assert!((ramp.at(100) - 0.07).abs() < 1e-12);
        assert!((ramp.at(5000) - 0.07).abs() < 1e-12);
        // degenerate ramp is flat at the end value
        assert_eq!(LinearRamp::new(0.5, 0.9, 0).at(0), 0.9);
    }
}
