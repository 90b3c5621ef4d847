//! A tiny fixed-weight denoiser iterated under the ancestral update
//!
//! ```text
//! x_{t-1} = (x_t - (1 - a_t) / sqrt(1 - abar_t) * eps(x_t, t)) / sqrt(a_t) + sigma_t z_t
//! ```
//!
//! `eps` is an `L`-block residual network with random weights: each block
//! adds `gain * tanh(W_tok h W_ch)` to its input. The network is untrained;
//! its only job is to produce temporally coherent block activations.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Provenance, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::linalg::FeatureMatrix;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub tokens: usize,
    pub channels: usize,
    pub blocks: usize,
    pub steps: usize,
    /// `abar` at the first (least noisy) timestep.
    pub alpha_bar_start: f64,
    /// `abar` at timestep `T`.
    pub alpha_bar_end: f64,
    /// Scale on the DDPM posterior standard deviation; 0 gives a
    /// deterministic sampler.
    pub noise_scale: f64,
    /// Residual branch gain inside each block.
    pub block_gain: f64,
    /// Seed of the network weights ("the model").
    pub weight_seed: u64,
    /// Seed of the initial latent and per-step noise ("the prompt").
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            tokens: 64,
            channels: 64,
            blocks: 4,
            steps: 50,
            alpha_bar_start: 0.9999,
            alpha_bar_end: 0.01,
            noise_scale: 1.0,
            block_gain: 0.5,
            weight_seed: 7,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.tokens == 0 || self.channels == 0 || self.blocks == 0 || self.steps == 0 {
            return bad("tokens, channels, blocks and steps must be >= 1".into());
        }
        let (a0, a1) = (self.alpha_bar_start, self.alpha_bar_end);
        if !(a0 > 0.0 && a0 <= 1.0 && a1 > 0.0 && a1 <= 1.0) {
            return bad(format!("alpha_bar endpoints {a0}, {a1} outside (0, 1]"));
        }
        if self.steps > 1 && a1 >= a0 {
            return bad(format!("alpha_bar must decrease: start {a0}, end {a1}"));
        }
        if self.noise_scale.is_nan() || self.noise_scale < 0.0 || !self.block_gain.is_finite() {
            return bad("noise scale must be >= 0 and block gain finite".into());
        }
        Ok(())
    }

    /// `abar_t` for `t = 1..=T` (index `t - 1`), linear from start to end.
    pub fn alpha_bars(&self) -> Vec<f64> {
        let t = self.steps;
        if t == 1 {
            return vec![self.alpha_bar_start];
        }
        (0..t)
            .map(|i| {
                let frac = i as f64 / (t - 1) as f64;
                self.alpha_bar_start + frac * (self.alpha_bar_end - self.alpha_bar_start)
            })
            .collect()
    }

    /// Per-step `a_t = abar_t / abar_{t-1}` (with `abar_0 = 1`).
    pub fn alphas(&self) -> Vec<f64> {
        let bars = self.alpha_bars();
        let mut prev = 1.0;
        bars.iter()
            .map(|&b| {
                let a = b / prev;
                prev = b;
                a
            })
            .collect()
    }
}

/// `sqrt(abar) x0 + sqrt(1 - abar) eps`.
pub fn forward_noise(
    x0: &FeatureMatrix,
    eps: &FeatureMatrix,
    alpha_bar: f64,
) -> Result<FeatureMatrix> {
    x0.lincomb(alpha_bar.sqrt(), eps, (1.0 - alpha_bar).sqrt())
}

struct Block {
    token_mix: DMatrix<f64>,
    channel_mix: DMatrix<f64>,
}

/// The network, schedule and prompt noise of one configuration.
pub struct ToyDenoiser {
    cfg: DenoiserConfig,
    blocks: Vec<Block>,
    time_embedding: Vec<Vec<f64>>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    x_init: FeatureMatrix,
    noise: Vec<FeatureMatrix>,
}

impl ToyDenoiser {
    pub fn new(cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let (n, d) = (cfg.tokens, cfg.channels);

        let mut wg = rng::seeded(rng::derive_seed(cfg.weight_seed, 0x77));
        let blocks = (0..cfg.blocks)
            .map(|_| Block {
                token_mix: rng::gaussian(&mut wg, n, n) / (n as f64).sqrt(),
                channel_mix: rng::gaussian(&mut wg, d, d) / (d as f64).sqrt(),
            })
            .collect();

        // Sinusoidal embedding of the step index, one row per reverse step.
        let time_embedding = (0..cfg.steps)
            .map(|s| {
                (0..d)
                    .map(|c| {
                        let freq = (-((c / 2) as f64) * 2.0 / d as f64 * 4.0f64.ln()).exp();
                        let arg = s as f64 * freq * 0.1;
                        0.5 * if c % 2 == 0 { arg.sin() } else { arg.cos() }
                    })
                    .collect()
            })
            .collect();

        let mut pg = rng::seeded(rng::derive_seed(cfg.seed, 0x11));
        let x_init = rng::gaussian_features(&mut pg, n, d);
        let noise = (0..cfg.steps)
            .map(|_| rng::gaussian_features(&mut pg, n, d))
            .collect();

        Ok(ToyDenoiser {
            cfg: cfg.clone(),
            blocks,
            time_embedding,
            alphas: cfg.alphas(),
            alpha_bars: cfg.alpha_bars(),
            x_init,
            noise,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn num_steps(&self) -> usize {
        self.cfg.steps
    }

    pub fn num_blocks(&self) -> usize {
        self.cfg.blocks
    }

    /// `x_T`.
    pub fn initial_latent(&self) -> &FeatureMatrix {
        &self.x_init
    }

    /// Block outputs at reverse step `step` (step 0 is timestep `T`).
    pub fn block_outputs(&self, x: &FeatureMatrix, step: usize) -> Vec<FeatureMatrix> {
        let emb = &self.time_embedding[step];
        let mut h = x.as_matrix().clone();
        for mut row in h.row_iter_mut() {
            for (v, e) in row.iter_mut().zip(emb) {
                *v += e;
            }
        }
        let mut outs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mixed = &block.token_mix * &h * &block.channel_mix;
            h += mixed.map(|v| self.cfg.block_gain * v.tanh());
            outs.push(FeatureMatrix::wrap(h.clone()));
        }
        outs
    }

    /// Noise prediction from the last block output, scaled to unit RMS.
    pub fn epsilon(&self, last_block: &FeatureMatrix) -> FeatureMatrix {
        let m = last_block.as_matrix();
        let rms = (m.norm_squared() / m.len() as f64).sqrt();
        if rms > 0.0 {
            FeatureMatrix::wrap(m / rms)
        } else {
            last_block.clone()
        }
    }

    /// One reverse update at `step`, given the predicted noise.
    pub fn reverse_step(
        &self,
        x: &FeatureMatrix,
        eps: &FeatureMatrix,
        step: usize,
    ) -> Result<FeatureMatrix> {
        let t = self.cfg.steps - step; // timestep index 1..=T
        let a = self.alphas[t - 1];
        let abar = self.alpha_bars[t - 1];
        let coef = (1.0 - a) / (1.0 - abar).sqrt();
        let mean = x.lincomb(1.0 / a.sqrt(), eps, -coef / a.sqrt())?;
        let sigma = self.sigma(t);
        if sigma == 0.0 {
            return Ok(mean);
        }
        mean.lincomb(1.0, &self.noise[step], sigma)
    }

    /// Posterior standard deviation at timestep `t`, times `noise_scale`.
    fn sigma(&self, t: usize) -> f64 {
        if self.cfg.noise_scale == 0.0 || t == 1 {
            return 0.0;
        }
        let a = self.alphas[t - 1];
        let abar = self.alpha_bars[t - 1];
        let abar_prev = self.alpha_bars[t - 2];
        let var = (1.0 - abar_prev) / (1.0 - abar) * (1.0 - a);
        self.cfg.noise_scale * var.max(0.0).sqrt()
    }

    /// Uncached sampling from `x_start`.
    pub fn run_from(&self, x_start: &FeatureMatrix) -> Result<DenoiserRun> {
        let mut blocks: Vec<Vec<FeatureMatrix>> =
            vec![Vec::with_capacity(self.cfg.steps); self.cfg.blocks];
        let mut x = x_start.clone();
        for step in 0..self.cfg.steps {
            let outs = self.block_outputs(&x, step);
            let eps = self.epsilon(outs.last().expect("at least one block"));
            for (l, f) in outs.into_iter().enumerate() {
                blocks[l].push(f);
            }
            x = self.reverse_step(&x, &eps, step)?;
        }
        if !x.is_finite() {
            return Err(Error::InvalidConfig("sampler diverged".into()));
        }
        Ok(DenoiserRun {
            record: TrajectoryRecord::new(blocks, Provenance::ToyDenoiser(self.cfg.clone()))?,
            initial_latent: x_start.clone(),
            final_latent: x,
        })
    }

    pub fn run(&self) -> Result<DenoiserRun> {
        self.run_from(&self.x_init)
    }
}

#[derive(Clone, Debug)]
pub struct DenoiserRun {
    pub record: TrajectoryRecord,
    pub initial_latent: FeatureMatrix,
    pub final_latent: FeatureMatrix,
}

pub fn toy_denoiser_run(cfg: &DenoiserConfig) -> Result<(TrajectoryRecord, FeatureMatrix)> {
    let run = ToyDenoiser::new(cfg)?.run()?;
    Ok((run.record, run.final_latent))
}
