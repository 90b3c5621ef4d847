//! Ground-truth feature trajectories.
//!
//! Two sources produce a [`TrajectoryRecord`]: a planted synthetic generator
//! with a known principal subspace and oscillatory residual, and a small
//! fixed-weight iterative denoiser.

mod analysis;
mod denoiser;
mod file;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::FeatureMatrix;

pub use analysis::{pca_trace, smoothness_stats, PathStats, SmoothnessStats, TraceComponent};
pub use denoiser::{forward_noise, toy_denoiser_run, DenoiserConfig, DenoiserRun, ToyDenoiser};
pub use file::{load_trajectory, save_trajectory, TRAJECTORY_FORMAT_VERSION, TRAJECTORY_MAGIC};
pub use synth::{synth_generate, SynthConfig};

/// Where a record came from; serialised to the JSON sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum Provenance {
    Synth(SynthConfig),
    ToyDenoiser(DenoiserConfig),
    Unknown,
}

/// Per-block feature sequences over steps `0..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    blocks: Vec<Vec<FeatureMatrix>>,
    pub provenance: Provenance,
}

impl TrajectoryRecord {
    /// Every block must hold the same number of steps and every matrix the
    /// same shape.
    pub fn new(blocks: Vec<Vec<FeatureMatrix>>, provenance: Provenance) -> Result<Self> {
        let first = blocks
            .first()
            .and_then(|b| b.first())
            .ok_or(Error::InvalidConfig(
                "trajectory has no blocks or steps".into(),
            ))?;
        let shape = first.shape();
        let steps = blocks[0].len();
        for (l, block) in blocks.iter().enumerate() {
            if block.len() != steps {
                return Err(Error::InvalidConfig(format!(
                    "block {l} has {} steps, block 0 has {steps}",
                    block.len()
                )));
            }
            for (s, f) in block.iter().enumerate() {
                if f.shape() != shape {
                    return Err(Error::ShapeDrift {
                        block: l,
                        step: s,
                        expected: format!("{}x{}", shape.0, shape.1),
                        actual: format!("{}x{}", f.rows(), f.cols()),
                    });
                }
            }
        }
        Ok(TrajectoryRecord { blocks, provenance })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_steps(&self) -> usize {
        self.blocks[0].len()
    }

    /// `(N, D)` shared by every entry.
    pub fn feature_shape(&self) -> (usize, usize) {
        self.blocks[0][0].shape()
    }

    pub fn block(&self, block: usize) -> Result<&[FeatureMatrix]> {
        self.blocks
            .get(block)
            .map(Vec::as_slice)
            .ok_or(Error::OutOfRange {
                what: "block",
                index: block,
                len: self.blocks.len(),
            })
    }

    pub fn feature(&self, block: usize, step: usize) -> Result<&FeatureMatrix> {
        let b = self.block(block)?;
        b.get(step).ok_or(Error::OutOfRange {
            what: "step",
            index: step,
            len: b.len(),
        })
    }

    pub fn blocks(&self) -> &[Vec<FeatureMatrix>] {
        &self.blocks
    }
}
