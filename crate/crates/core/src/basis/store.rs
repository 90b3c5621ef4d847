use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{build_reference_basis, load_basis, save_basis, SpectralBasis, StepId};
use crate::error::{Error, Result};
use crate::io::write_json;
use crate::linalg::FeatureMatrix;
use crate::schedule::CacheSchedule;
use crate::trajectory::TrajectoryRecord;

/// Whether a block keeps one basis per full-compute step or one for the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisMode {
    #[default]
    PerStep,
    Global,
}

impl fmt::Display for BasisMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BasisMode::PerStep => "per-step",
            BasisMode::Global => "global",
        })
    }
}

impl FromStr for BasisMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-step" | "per_step" => Ok(BasisMode::PerStep),
            "global" => Ok(BasisMode::Global),
            other => Err(Error::InvalidConfig(format!(
                "unknown basis mode {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub block: i32,
    pub step: StepId,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: BasisMode,
    pub tau: f64,
    pub source_id: String,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Bases keyed by `(block, step)`. Values are immutable and shared.
#[derive(Clone, Debug, Default)]
pub struct BasisStore {
    mode: BasisMode,
    bases: BTreeMap<(i32, StepId), Arc<SpectralBasis>>,
}

impl BasisStore {
    pub fn new(mode: BasisMode) -> Self {
        BasisStore {
            mode,
            bases: BTreeMap::new(),
        }
    }

    pub fn mode(&self) -> BasisMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    pub fn insert(&mut self, basis: SpectralBasis) {
        self.bases
            .insert((basis.block_id, basis.step_id), Arc::new(basis));
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<SpectralBasis>> {
        self.bases.values()
    }

    /// The basis serving `block` at compute step `step` under this store's mode.
    pub fn lookup(&self, block: usize, step: usize) -> Result<Arc<SpectralBasis>> {
        let key = match self.mode {
            BasisMode::PerStep => StepId::Step(step as u32),
            BasisMode::Global => StepId::Global,
        };
        self.bases
            .get(&(block as i32, key))
            .cloned()
            .ok_or_else(|| Error::MissingBasis {
                block,
                step: key.to_string(),
            })
    }

    /// One-time decomposition of a reference trajectory.
    ///
    /// Per-step mode stores one basis per block and compute step. Global mode
    /// stacks the block's compute-step features (scaled by `1/sqrt(count)` so
    /// singular values stay on the per-step scale) and stores one basis per
    /// block.
    pub fn build(
        reference: &TrajectoryRecord,
        schedule: &CacheSchedule,
        tau: f64,
        mode: BasisMode,
        source_id: &str,
    ) -> Result<Self> {
        let mut store = BasisStore::new(mode);
        for block in 0..reference.num_blocks() {
            match mode {
                BasisMode::PerStep => {
                    for &step in schedule.compute_steps() {
                        let f = reference.feature(block, step)?;
                        store.insert(build_reference_basis(
                            f,
                            tau,
                            block as i32,
                            StepId::Step(step as u32),
                            source_id,
                        )?);
                    }
                }
                BasisMode::Global => {
                    let feats = schedule
                        .compute_steps()
                        .iter()
                        .map(|&s| reference.feature(block, s))
                        .collect::<Result<Vec<_>>>()?;
                    let stacked = stack_rows(&feats);
                    store.insert(build_reference_basis(
                        &stacked,
                        tau,
                        block as i32,
                        StepId::Global,
                        source_id,
                    )?);
                }
            }
        }
        Ok(store)
    }

    pub fn file_name(block: i32, step: StepId) -> String {
        match step {
            StepId::Step(s) => format!("block{block:02}_step{s:04}.svdc"),
            StepId::Global => format!("block{block:02}_global.svdc"),
        }
    }

    /// Writes every basis plus `manifest.json` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<Manifest> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.bases.len());
        for ((block, step), basis) in &self.bases {
            let file = Self::file_name(*block, *step);
            save_basis(basis, &dir.join(&file))?;
            entries.push(ManifestEntry {
                block: *block,
                step: *step,
                file,
            });
        }
        let first = self.bases.values().next();
        let manifest = Manifest {
            mode: self.mode,
            tau: first.map(|b| b.tau).unwrap_or(f64::NAN),
            source_id: first.map(|b| b.source_id.clone()).unwrap_or_default(),
            entries,
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = std::fs::read(&manifest_path)?;
        let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| Error::Malformed {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?;
        let mut store = BasisStore::new(manifest.mode);
        for entry in &manifest.entries {
            let basis = load_basis(&dir.join(&entry.file))?;
            if basis.block_id != entry.block || basis.step_id != entry.step {
                return Err(Error::Malformed {
                    path: dir.join(&entry.file),
                    reason: format!(
                        "manifest lists block {} step {}, file holds block {} step {}",
                        entry.block, entry.step, basis.block_id, basis.step_id
                    ),
                });
            }
            store.insert(basis);
        }
        Ok(store)
    }
}

fn stack_rows(feats: &[&FeatureMatrix]) -> FeatureMatrix {
    let cols = feats[0].cols();
    let rows: usize = feats.iter().map(|f| f.rows()).sum();
    let scale = 1.0 / (feats.len() as f64).sqrt();
    let mut m = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for f in feats {
        m.rows_mut(at, f.rows()).copy_from(&(f.as_matrix() * scale));
        at += f.rows();
    }
    FeatureMatrix::wrap(m)
}
