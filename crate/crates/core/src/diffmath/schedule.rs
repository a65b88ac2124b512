use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponential (geometric) decay from `start` to `end` over `total` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub total: usize,
}

impl LrSchedule {
    pub fn new(start: f64, end: f64, total: usize) -> Result<Self> {
        let s = Self { start, end, total };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.end > 0.0) || !self.start.is_finite() || !self.end.is_finite() {
            return Err(Error::InvalidSchedule(format!(
                "rates must be positive and finite, got start={} end={}",
                self.start, self.end
            )));
        }
        Ok(())
    }

    /// `start * (end/start)^(step/total)`; steps past `total` stay at `end`.
    pub fn rate_at(&self, step: usize) -> Result<f64> {
        self.validate()?;
        if self.total == 0 {
            return Ok(self.end);
        }
        let u = step.min(self.total) as f64 / self.total as f64;
        if u == 0.0 {
            return Ok(self.start);
        }
        if u == 1.0 {
            return Ok(self.end);
        }
        Ok(self.start * (self.end / self.start).powf(u))
    }
}
