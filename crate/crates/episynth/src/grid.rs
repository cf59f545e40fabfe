use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Evenly spaced time grid. Index `k` stands for the interval
/// `[origin + k*step, origin + (k+1)*step)`; times are in days.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub origin: f64,
    pub step: f64,
    pub len: usize,
}

impl TimeGrid {
    pub fn new(origin: f64, step: f64, len: usize) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::Config(format!("time grid step {step} must be > 0")));
        }
        if len == 0 {
            return Err(Error::Config("time grid must have at least one interval".into()));
        }
        Ok(Self { origin, step, len })
    }

    /// Start of interval `k`.
    pub fn time(&self, k: usize) -> f64 {
        self.origin + k as f64 * self.step
    }

    pub fn end(&self) -> f64 {
        self.time(self.len)
    }

    /// Index of the interval containing `day`, if inside the grid.
    pub fn index_of(&self, day: f64) -> Option<usize> {
        if day < self.origin || day >= self.end() {
            return None;
        }
        let k = ((day - self.origin) / self.step).floor() as usize;
        Some(k.min(self.len - 1))
    }
}
