//! Planted synthetic trajectories.
//!
//! Each block's features are `F_t = P_t + E_t` with orthogonal row spaces:
//!
//! - `P_t = Q_t diag(s * g_t) V_P^T`. `V_P` (`D x k*`) and the spectrum `s`
//!   depend only on `basis_seed`, so "prompts" that share it share their
//!   right singular vectors. `Q_t = Q_0 cos(w t) + Q_1 sin(w t)` rotates the
//!   left factor at `drift_rate` radians per step, and `g_t = 1 + drift_rate
//!   * t / 2` adds a slow magnitude drift.
//! - `E_t = c * g_t * sum_j sin(2 pi f t + phi_j) b_j w_j^T` with `w_j` drawn
//!   from the orthogonal complement of `V_P` and orthonormal `b_j` orthogonal
//!   to both `Q_0` and `Q_1`. The amplitude `c` is solved for so that the
//!   principal energy fraction averaged over steps equals `energy_split`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Provenance, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::linalg::FeatureMatrix;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub tokens: usize,
    pub channels: usize,
    pub steps: usize,
    pub blocks: usize,
    pub planted_rank: usize,
    /// Rank of the oscillating residual.
    pub residual_rank: usize,
    /// Target mean fraction of energy in the planted principal subspace.
    pub energy_split: f64,
    /// Per-step rotation angle of the principal left factor, radians.
    pub drift_rate: f64,
    /// Residual phase cycles per step.
    pub oscillation_freq: f64,
    /// Ratio between consecutive planted singular values.
    pub spectrum_decay: f64,
    /// Seed of the prompt-specific parts (left factors, residual).
    pub seed: u64,
    /// Seed of the planted right basis and spectrum, shared across prompts.
    pub basis_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tokens: 64,
            channels: 64,
            steps: 50,
            blocks: 4,
            planted_rank: 8,
            residual_rank: 16,
            energy_split: 0.9,
            drift_rate: 0.05,
            oscillation_freq: 0.45,
            spectrum_decay: 0.85,
            seed: 0,
            basis_seed: 1000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.tokens == 0 || self.channels == 0 || self.blocks == 0 {
            return bad("tokens, channels and blocks must be >= 1".into());
        }
        if self.steps < 2 {
            return bad(format!("steps must be >= 2, got {}", self.steps));
        }
        if self.planted_rank == 0 || self.planted_rank >= self.tokens.min(self.channels) {
            return bad(format!(
                "planted rank {} must be in 1..{}",
                self.planted_rank,
                self.tokens.min(self.channels)
            ));
        }
        if 2 * self.planted_rank + self.residual_rank > self.tokens {
            return bad(format!(
                "left factors need 2 * planted_rank + residual_rank <= tokens ({} > {})",
                2 * self.planted_rank + self.residual_rank,
                self.tokens
            ));
        }
        if self.residual_rank == 0 || self.planted_rank + self.residual_rank > self.channels {
            return bad(format!(
                "residual rank {} must be in 1..={}",
                self.residual_rank,
                self.channels - self.planted_rank
            ));
        }
        if !(self.energy_split > 0.0 && self.energy_split < 1.0) {
            return bad(format!("energy split {} outside (0, 1)", self.energy_split));
        }
        if !(self.spectrum_decay > 0.0 && self.spectrum_decay <= 1.0) {
            return bad(format!(
                "spectrum decay {} outside (0, 1]",
                self.spectrum_decay
            ));
        }
        if !self.drift_rate.is_finite() || !self.oscillation_freq.is_finite() {
            return bad("drift rate and oscillation frequency must be finite".into());
        }
        Ok(())
    }

    /// Planted singular values `decay^i`, `i < planted_rank`.
    pub fn planted_spectrum(&self) -> Vec<f64> {
        (0..self.planted_rank)
            .map(|i| self.spectrum_decay.powi(i as i32))
            .collect()
    }
}

/// Shared right basis of one block: planted columns then residual columns.
pub(crate) struct PlantedBasis {
    pub principal: DMatrix<f64>,
    pub residual: DMatrix<f64>,
}

pub(crate) fn planted_basis(cfg: &SynthConfig, block: usize) -> PlantedBasis {
    let mut g = rng::seeded(rng::derive_seed(cfg.basis_seed, block as u64));
    let all = rng::orthonormal(&mut g, cfg.channels, cfg.planted_rank + cfg.residual_rank);
    PlantedBasis {
        principal: all.columns(0, cfg.planted_rank).into_owned(),
        residual: all
            .columns(cfg.planted_rank, cfg.residual_rank)
            .into_owned(),
    }
}

struct BlockParts {
    principal: Vec<DMatrix<f64>>,
    residual_unit: Vec<DMatrix<f64>>,
}

fn block_parts(cfg: &SynthConfig, block: usize) -> BlockParts {
    let basis = planted_basis(cfg, block);
    let k = cfg.planted_rank;
    let mut g = rng::seeded(rng::derive_seed(cfg.seed, 0x5eed_0000 + block as u64));

    let q = rng::orthonormal(&mut g, cfg.tokens, 2 * k + cfg.residual_rank);
    let (q0, q1) = (q.columns(0, k).into_owned(), q.columns(k, k).into_owned());
    let b = q.columns(2 * k, cfg.residual_rank).into_owned();
    let phases: Vec<f64> = (0..cfg.residual_rank)
        .map(|_| g.random_range(0.0..std::f64::consts::TAU))
        .collect();

    let spectrum = cfg.planted_spectrum();
    let mut principal = Vec::with_capacity(cfg.steps);
    let mut residual_unit = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        let tf = t as f64;
        let angle = cfg.drift_rate * tf;
        let growth = 1.0 + 0.5 * cfg.drift_rate * tf;
        let mut left = &q0 * angle.cos() + &q1 * angle.sin();
        for (j, s) in spectrum.iter().enumerate() {
            left.column_mut(j).scale_mut(s * growth);
        }
        principal.push(left * basis.principal.transpose());

        let mut coeffs = b.clone();
        for (j, phi) in phases.iter().enumerate() {
            let wave = growth * (std::f64::consts::TAU * cfg.oscillation_freq * tf + phi).sin();
            coeffs.column_mut(j).scale_mut(wave);
        }
        residual_unit.push(coeffs * basis.residual.transpose());
    }
    BlockParts {
        principal,
        residual_unit,
    }
}

/// Mean over steps of `|P|^2 / (|P|^2 + c^2 |E1|^2)`.
fn mean_principal_fraction(p2: &[f64], e2: &[f64], c: f64) -> f64 {
    let n = p2.len() as f64;
    p2.iter()
        .zip(e2)
        .map(|(p, e)| {
            let total = p + c * c * e;
            if total > 0.0 {
                p / total
            } else {
                1.0
            }
        })
        .sum::<f64>()
        / n
}

/// Solves for the residual amplitude hitting `target` (monotone in `c`).
fn calibrate_amplitude(p2: &[f64], e2: &[f64], target: f64) -> Result<f64> {
    if e2.iter().all(|&e| e == 0.0) {
        return Err(Error::InvalidConfig(
            "residual vanishes at every step; energy split is unreachable".into(),
        ));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while mean_principal_fraction(p2, e2, hi) > target {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::InvalidConfig(format!(
                "energy split {target} is unreachable"
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_principal_fraction(p2, e2, mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for block in 0..cfg.blocks {
        let parts = block_parts(cfg, block);
        let p2: Vec<f64> = parts.principal.iter().map(|m| m.norm_squared()).collect();
        let e2: Vec<f64> = parts
            .residual_unit
            .iter()
            .map(|m| m.norm_squared())
            .collect();
        let c = calibrate_amplitude(&p2, &e2, cfg.energy_split)?;
        let steps = parts
            .principal
            .into_iter()
            .zip(parts.residual_unit)
            .map(|(p, e)| FeatureMatrix::new(p + e * c))
            .collect::<Result<Vec<_>>>()?;
        blocks.push(steps);
    }
    TrajectoryRecord::new(blocks, Provenance::Synth(cfg.clone()))
}
