use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed-interval cache schedule: full computes at `0, N, 2N, ...` below `T`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct CacheSchedule {
    total_steps: usize,
    interval: usize,
    compute_steps: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawSchedule {
    total_steps: usize,
    interval: usize,
}

impl TryFrom<RawSchedule> for CacheSchedule {
    type Error = Error;

    fn try_from(raw: RawSchedule) -> Result<Self> {
        CacheSchedule::new(raw.total_steps, raw.interval)
    }
}

impl From<CacheSchedule> for RawSchedule {
    fn from(s: CacheSchedule) -> Self {
        RawSchedule {
            total_steps: s.total_steps,
            interval: s.interval,
        }
    }
}

impl CacheSchedule {
    pub fn new(total_steps: usize, interval: usize) -> Result<Self> {
        if total_steps < 1 {
            return Err(Error::InvalidSchedule("total steps must be >= 1".into()));
        }
        if interval < 1 || interval > total_steps {
            return Err(Error::InvalidSchedule(format!(
                "interval {interval} outside 1..={total_steps}"
            )));
        }
        Ok(CacheSchedule {
            total_steps,
            interval,
            compute_steps: (0..total_steps).step_by(interval).collect(),
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn compute_steps(&self) -> &[usize] {
        &self.compute_steps
    }

    pub fn is_compute(&self, step: usize) -> bool {
        step % self.interval == 0
    }

    /// Latest compute step at or before `step`.
    pub fn anchor(&self, step: usize) -> usize {
        step - step % self.interval
    }

    /// `T / ceil(T / N)`: block-level compute reduction.
    pub fn speedup(&self) -> f64 {
        self.total_steps as f64 / self.compute_steps.len() as f64
    }
}

pub fn make_schedule(total_steps: usize, interval: usize) -> Result<CacheSchedule> {
    CacheSchedule::new(total_steps, interval)
}
