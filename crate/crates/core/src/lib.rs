//! Subspace-aware feature caching for iterative denoisers.
//!
//! Block features are split by a reusable right-singular basis into a
//! principal part, forecast with an exponential moving average, and a
//! residual that is reused between full computes.

pub mod basis;
pub mod engine;
pub mod error;
pub mod forecast;
pub(crate) mod io;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod schedule;
pub mod trajectory;

#[cfg(test)]
mod testutil;

pub use basis::{
    basis_similarity, build_reference_basis, load_basis, save_basis, split, BasisMode,
    BasisSimilarity, BasisStore, Manifest, SpectralBasis, StepId, SubspaceSplit,
};
pub use engine::{
    ablation_grid, run_cached, run_cached_closed_loop, write_report, BasisSource, GridCell, Rule,
    RunReport, StepRow, Strategy, StrategyConfig,
};
pub use error::{Error, Result};
pub use forecast::{reuse_predict, taylor_predict, EmaPrediction, EmaState, History};
pub use linalg::{relative_error, select_rank, thin_svd, truncate, FeatureMatrix, SvdFactors};
pub use metrics::{energy_fraction, run_summary, similarity, RunSummary, SimilarityScore};
pub use schedule::{make_schedule, CacheSchedule};
pub use trajectory::{
    load_trajectory, save_trajectory, synth_generate, toy_denoiser_run, DenoiserConfig,
    SynthConfig, ToyDenoiser, TrajectoryRecord,
};
