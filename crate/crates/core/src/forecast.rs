//! Temporal predictors for cached feature components.
//!
//! - [`EmaState`]: exponential moving average over full-compute steps.
//! - [`reuse_predict`]: hold the last cached value.
//! - [`History`] + [`taylor_predict`]: exact polynomial extrapolation through
//!   the most recent `order + 1` cached samples.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::FeatureMatrix;

/// What an EMA forecaster emits for a skipped step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmaPrediction {
    /// The smoothed state itself.
    #[default]
    State,
    /// The latest observation advanced along the EMA-implied velocity.
    ///
    /// For an input that grows by `g` per update the state settles
    /// `beta / (1 - beta) * g` behind the latest value, so
    /// `(1 - beta) / beta * (latest - state)` recovers `g`. The prediction
    /// `h` intervals ahead is `latest + h * g_hat`.
    Trend,
}

impl fmt::Display for EmaPrediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmaPrediction::State => "state",
            EmaPrediction::Trend => "trend",
        })
    }
}

impl FromStr for EmaPrediction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "state" => Ok(EmaPrediction::State),
            "trend" => Ok(EmaPrediction::Trend),
            other => Err(Error::InvalidConfig(format!(
                "unknown EMA prediction {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmaState {
    beta: f64,
    state: Option<FeatureMatrix>,
    latest: Option<FeatureMatrix>,
    last_step: Option<usize>,
}

impl EmaState {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidBeta(beta));
        }
        Ok(EmaState {
            beta,
            state: None,
            latest: None,
            last_step: None,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn is_initialized(&self) -> bool {
        self.state.is_some()
    }

    pub fn last_step(&self) -> Option<usize> {
        self.last_step
    }

    pub fn state(&self) -> Option<&FeatureMatrix> {
        self.state.as_ref()
    }

    /// `state <- beta * state + (1 - beta) * f`; the first update copies `f`.
    pub fn update(&mut self, f: &FeatureMatrix, step: usize) -> Result<()> {
        if let Some(last) = self.last_step {
            if step <= last {
                return Err(Error::NonMonotoneStep {
                    step: step as i64,
                    last: last as i64,
                });
            }
        }
        let next = match &self.state {
            None => f.clone(),
            Some(s) => s.lincomb(self.beta, f, 1.0 - self.beta)?,
        };
        self.state = Some(next);
        self.latest = Some(f.clone());
        self.last_step = Some(step);
        Ok(())
    }

    /// The smoothed state.
    pub fn predict(&self) -> Result<FeatureMatrix> {
        self.state.clone().ok_or(Error::Uninitialized)
    }

    /// Prediction `intervals_ahead` update-intervals past the last update.
    pub fn predict_with(&self, rule: EmaPrediction, intervals_ahead: f64) -> Result<FeatureMatrix> {
        let state = self.state.as_ref().ok_or(Error::Uninitialized)?;
        match rule {
            EmaPrediction::State => Ok(state.clone()),
            EmaPrediction::Trend => {
                let latest = self.latest.as_ref().ok_or(Error::Uninitialized)?;
                let gain = intervals_ahead * (1.0 - self.beta) / self.beta;
                latest.lincomb(1.0 + gain, state, -gain)
            }
        }
    }
}

pub fn reuse_predict(cached: &FeatureMatrix) -> FeatureMatrix {
    cached.clone()
}

/// Sliding window of `(step, features)` samples for polynomial extrapolation.
#[derive(Clone, Debug)]
pub struct History {
    order: usize,
    samples: VecDeque<(usize, FeatureMatrix)>,
}

impl History {
    pub fn new(order: usize) -> Self {
        History {
            order,
            samples: VecDeque::with_capacity(order + 1),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn capacity(&self) -> usize {
        self.order + 1
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn last_step(&self) -> Option<usize> {
        self.samples.back().map(|(s, _)| *s)
    }

    pub fn samples(&self) -> impl Iterator<Item = &(usize, FeatureMatrix)> {
        self.samples.iter()
    }

    /// Appends a sample, evicting the oldest once the window is full.
    pub fn push(&mut self, step: usize, f: FeatureMatrix) -> Result<()> {
        if let Some((last, first)) = self.samples.back() {
            if step <= *last {
                return Err(Error::NonMonotoneStep {
                    step: step as i64,
                    last: *last as i64,
                });
            }
            crate::linalg::check_same_shape(first, &f)?;
        }
        if self.samples.len() == self.capacity() {
            self.samples.pop_front();
        }
        self.samples.push_back((step, f));
        Ok(())
    }
}

/// Evaluates the unique polynomial of degree `len - 1` through the history
/// (elementwise, Lagrange form) at `target_step`.
pub fn taylor_predict(h: &History, target_step: usize) -> Result<FeatureMatrix> {
    let last = h.last_step().ok_or(Error::EmptyHistory)?;
    if target_step <= last {
        return Err(Error::NonMonotoneStep {
            step: target_step as i64,
            last: last as i64,
        });
    }
    let weights = lagrange_weights(
        &h.samples.iter().map(|(s, _)| *s as f64).collect::<Vec<_>>(),
        target_step as f64,
    );
    let mut iter = h.samples.iter().zip(&weights);
    let ((_, f0), w0) = iter.next().expect("history is nonempty");
    let mut acc = f0.scale(*w0);
    for ((_, f), w) in iter {
        acc = acc.lincomb(1.0, f, *w)?;
    }
    Ok(acc)
}

/// `w_i = prod_{j != i} (x - x_j) / (x_i - x_j)`.
fn lagrange_weights(nodes: &[f64], x: f64) -> Vec<f64> {
    nodes
        .iter()
        .enumerate()
        .map(|(i, &xi)| {
            nodes
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &xj)| (x - xj) / (xi - xj))
                .product()
        })
        .collect()
}
