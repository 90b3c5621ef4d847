//! The caching state machine.
//!
//! At every full-compute step each block's true features are split against
//! that step's basis and the principal and residual forecasters observe their
//! parts. At skipped steps the forecasters emit predictions that are summed
//! and scored against the true features.
//!
//! [`run_cached`] replays a recorded trajectory (open loop).
//! [`run_cached_closed_loop`] drives the toy denoiser and feeds predicted
//! block outputs back into sampling so errors propagate.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{split, BasisMode, BasisStore, SpectralBasis};
use crate::error::{Error, Result};
use crate::forecast::{taylor_predict, EmaPrediction, EmaState, History};
use crate::io::{atomic_write, write_json};
use crate::linalg::{self, FeatureMatrix};
use crate::metrics::{self, RunSummary};
use crate::schedule::CacheSchedule;
use crate::trajectory::{ToyDenoiser, TrajectoryRecord};

/// How one component is produced at a skipped step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rule {
    Ema,
    Reuse,
    /// Polynomial extrapolation through the last `order + 1` computes.
    Taylor(usize),
    /// The true component (an upper bound, not a cache).
    Recompute,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Ema => f.write_str("ema"),
            Rule::Reuse => f.write_str("reuse"),
            Rule::Taylor(order) => write!(f, "taylor{order}"),
            Rule::Recompute => f.write_str("recompute"),
        }
    }
}

impl FromStr for Rule {
    type Err = Error;

    /// `ema`, `reuse`, `recompute`, `taylor` (order 1) or `taylorN`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ema" => Ok(Rule::Ema),
            "reuse" => Ok(Rule::Reuse),
            "recompute" => Ok(Rule::Recompute),
            "taylor" => Ok(Rule::Taylor(1)),
            _ => s
                .strip_prefix("taylor")
                .and_then(|o| o.parse().ok())
                .map(Rule::Taylor)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown rule {s:?}"))),
        }
    }
}

/// Either separate rules for the principal and residual parts, or one rule
/// for the whole feature matrix.
///
/// Written `principal+residual` (e.g. `ema+reuse`) or `whole:rule`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    Split { principal: Rule, residual: Rule },
    Whole(Rule),
}

impl Strategy {
    pub const DEFAULT: Strategy = Strategy::Split {
        principal: Rule::Ema,
        residual: Rule::Reuse,
    };

    pub fn split(principal: Rule, residual: Rule) -> Self {
        Strategy::Split {
            principal,
            residual,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Split {
                principal,
                residual,
            } => write!(f, "{principal}+{residual}"),
            Strategy::Whole(r) => write!(f, "whole:{r}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rule) = s.strip_prefix("whole:") {
            return Ok(Strategy::Whole(rule.parse()?));
        }
        let (p, r) = s.split_once('+').ok_or_else(|| {
            Error::InvalidConfig(format!("strategy {s:?} is neither a+b nor whole:a"))
        })?;
        Ok(Strategy::split(p.parse()?, r.parse()?))
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub tau: f64,
    pub beta: f64,
    pub basis_mode: BasisMode,
    pub ema_prediction: EmaPrediction,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            strategy: Strategy::DEFAULT,
            tau: 0.85,
            beta: 0.9,
            basis_mode: BasisMode::PerStep,
            ema_prediction: EmaPrediction::default(),
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidTau(self.tau));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidBeta(self.beta));
        }
        Ok(())
    }

    pub fn with_strategy(&self, strategy: Strategy) -> Self {
        StrategyConfig {
            strategy,
            ..self.clone()
        }
    }

    pub fn with_tau(&self, tau: f64) -> Self {
        StrategyConfig {
            tau,
            ..self.clone()
        }
    }
}

/// Where per-block bases come from.
#[derive(Clone, Copy)]
pub enum BasisSource<'a> {
    /// A prepared store, e.g. loaded from disk.
    Store(&'a BasisStore),
    /// Decompose the reference trajectory on the fly: the replayed record
    /// in open loop, the uncached sampling run in closed loop.
    Reference,
}

/// One `(block, step)` outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub block: usize,
    pub step: usize,
    pub is_compute: bool,
    /// `||F_hat - F||_F / ||F||_F`; the absolute error if `F` is zero.
    pub rel_error: f64,
    /// Similarity product between `F_hat` and `F`.
    pub similarity: f64,
    /// Energy share of the true features inside the active principal
    /// subspace; absent for whole-feature strategies.
    pub principal_energy_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: StrategyConfig,
    pub schedule: CacheSchedule,
    pub total_steps: usize,
    pub compute_steps: Vec<usize>,
    pub num_blocks: usize,
    /// Per block: true-feature reads (full computes) and predicted steps.
    pub compute_count: usize,
    pub predicted_count: usize,
    /// Closed loop only: `||x_0 - x_0^ref|| / ||x_0^ref||`.
    pub final_latent_error: Option<f64>,
    pub rows: Vec<StepRow>,
}

impl RunReport {
    pub fn summary(&self) -> Result<RunSummary> {
        metrics::run_summary(self)
    }

    fn new(config: &StrategyConfig, schedule: &CacheSchedule, num_blocks: usize) -> Self {
        RunReport {
            config: config.clone(),
            schedule: schedule.clone(),
            total_steps: schedule.total_steps(),
            compute_steps: schedule.compute_steps().to_vec(),
            num_blocks,
            compute_count: schedule.compute_steps().len(),
            predicted_count: schedule.total_steps() - schedule.compute_steps().len(),
            final_latent_error: None,
            rows: Vec::with_capacity(num_blocks * schedule.total_steps()),
        }
    }
}

#[derive(Serialize)]
struct ReportJson<'a> {
    strategy: String,
    config: &'a StrategyConfig,
    total_steps: usize,
    interval: usize,
    compute_steps: &'a [usize],
    num_blocks: usize,
    compute_count: usize,
    predicted_count: usize,
    final_latent_error: Option<f64>,
    summary: RunSummary,
}

#[derive(Serialize)]
struct CsvRow {
    block: usize,
    step: usize,
    is_compute: u8,
    rel_error: f64,
    similarity: f64,
    principal_energy_fraction: Option<f64>,
}

/// Writes `<stem>.json` (summary and echoes) and `<stem>.csv` (per-step
/// rows) into `dir`.
pub fn write_report(report: &RunReport, dir: &Path, stem: &str) -> Result<()> {
    let json = ReportJson {
        strategy: report.config.strategy.to_string(),
        config: &report.config,
        total_steps: report.total_steps,
        interval: report.schedule.interval(),
        compute_steps: &report.compute_steps,
        num_blocks: report.num_blocks,
        compute_count: report.compute_count,
        predicted_count: report.predicted_count,
        final_latent_error: report.final_latent_error,
        summary: report.summary()?,
    };
    write_json(&dir.join(format!("{stem}.json")), &json)?;
    atomic_write(&dir.join(format!("{stem}.csv")), &report_csv(report)?)
}

pub fn report_csv(report: &RunReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &report.rows {
        w.serialize(CsvRow {
            block: r.block,
            step: r.step,
            is_compute: r.is_compute as u8,
            rel_error: r.rel_error,
            similarity: r.similarity,
            principal_energy_fraction: r.principal_energy_fraction,
        })?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

enum Forecaster {
    Ema(EmaState, EmaPrediction),
    Reuse(Option<FeatureMatrix>),
    Taylor(History),
    Recompute,
}

impl Forecaster {
    fn new(rule: Rule, cfg: &StrategyConfig) -> Result<Self> {
        Ok(match rule {
            Rule::Ema => Forecaster::Ema(EmaState::new(cfg.beta)?, cfg.ema_prediction),
            Rule::Reuse => Forecaster::Reuse(None),
            Rule::Taylor(order) => Forecaster::Taylor(History::new(order)),
            Rule::Recompute => Forecaster::Recompute,
        })
    }

    fn observe(&mut self, f: &FeatureMatrix, step: usize) -> Result<()> {
        match self {
            Forecaster::Ema(s, _) => s.update(f, step),
            Forecaster::Reuse(c) => {
                *c = Some(f.clone());
                Ok(())
            }
            Forecaster::Taylor(h) => h.push(step, f.clone()),
            Forecaster::Recompute => Ok(()),
        }
    }

    /// `None` means "use the true component".
    fn predict(
        &self,
        step: usize,
        anchor: usize,
        interval: usize,
    ) -> Result<Option<FeatureMatrix>> {
        Ok(match self {
            Forecaster::Ema(s, rule) => {
                let ahead = (step - anchor) as f64 / interval as f64;
                Some(s.predict_with(*rule, ahead)?)
            }
            Forecaster::Reuse(c) => Some(c.clone().ok_or(Error::Uninitialized)?),
            Forecaster::Taylor(h) => Some(taylor_predict(h, step)?),
            Forecaster::Recompute => None,
        })
    }
}

/// Basis and rank that were active at the last compute step.
struct Anchor {
    step: usize,
    basis: Option<(Arc<SpectralBasis>, usize)>,
}

/// The per-block cache: forecasters plus the active split.
struct BlockCache {
    block: usize,
    strategy: Strategy,
    principal: Forecaster,
    residual: Option<Forecaster>,
    anchor: Option<Anchor>,
}

impl BlockCache {
    fn new(block: usize, cfg: &StrategyConfig) -> Result<Self> {
        let (principal, residual) = match cfg.strategy {
            Strategy::Split {
                principal,
                residual,
            } => (
                Forecaster::new(principal, cfg)?,
                Some(Forecaster::new(residual, cfg)?),
            ),
            Strategy::Whole(r) => (Forecaster::new(r, cfg)?, None),
        };
        Ok(BlockCache {
            block,
            strategy: cfg.strategy,
            principal,
            residual,
            anchor: None,
        })
    }

    /// Full compute: refresh the split and forecaster states.
    fn compute(
        &mut self,
        f: &FeatureMatrix,
        step: usize,
        bases: &Bases,
        tau: f64,
    ) -> Result<StepRow> {
        let mut pef = None;
        let basis = match &mut self.residual {
            None => {
                self.principal.observe(f, step)?;
                None
            }
            Some(residual) => {
                let basis = bases.lookup(self.block, step)?;
                let k = linalg::select_rank(&basis.sigma, tau)?;
                let parts = split(f, &basis, Some(k))?;
                self.principal.observe(&parts.principal, step)?;
                residual.observe(&parts.residual, step)?;
                pef = Some(parts.principal_energy_fraction);
                Some((basis, k))
            }
        };
        self.anchor = Some(Anchor { step, basis });
        Ok(StepRow {
            block: self.block,
            step,
            is_compute: true,
            rel_error: 0.0,
            similarity: 1.0,
            principal_energy_fraction: pef,
        })
    }

    /// Skipped step. `truth` is used only by `recompute` rules and for
    /// scoring.
    fn predict(
        &self,
        truth: &FeatureMatrix,
        step: usize,
        interval: usize,
    ) -> Result<(FeatureMatrix, StepRow)> {
        let anchor = self.anchor.as_ref().ok_or(Error::Uninitialized)?;
        let (pred, pef) = match (&self.residual, &anchor.basis) {
            (None, _) => {
                let p = self.principal.predict(step, anchor.step, interval)?;
                (p.unwrap_or_else(|| truth.clone()), None)
            }
            (Some(residual), Some((basis, k))) => {
                let parts = split(truth, basis, Some(*k))?;
                let pef = Some(parts.principal_energy_fraction);
                if self.strategy == Strategy::split(Rule::Recompute, Rule::Recompute) {
                    (truth.clone(), pef)
                } else {
                    let p = self
                        .principal
                        .predict(step, anchor.step, interval)?
                        .unwrap_or(parts.principal);
                    let r = residual
                        .predict(step, anchor.step, interval)?
                        .unwrap_or(parts.residual);
                    (p.add(&r)?, pef)
                }
            }
            (Some(_), None) => unreachable!("split strategies always record a basis"),
        };
        let row = StepRow {
            block: self.block,
            step,
            is_compute: false,
            rel_error: error_against(&pred, truth)?,
            similarity: metrics::feature_similarity(&pred, truth)?.product,
            principal_energy_fraction: pef,
        };
        Ok((pred, row))
    }
}

fn error_against(pred: &FeatureMatrix, truth: &FeatureMatrix) -> Result<f64> {
    match linalg::relative_error(pred, truth) {
        Err(Error::ZeroReference) => Ok(linalg::frobenius_norm(pred)),
        other => other,
    }
}

enum Bases<'a> {
    Borrowed(&'a BasisStore),
    Owned(BasisStore),
    /// Whole-feature strategies never split.
    Unused,
}

impl Bases<'_> {
    fn lookup(&self, block: usize, step: usize) -> Result<Arc<SpectralBasis>> {
        match self {
            Bases::Borrowed(s) => s.lookup(block, step),
            Bases::Owned(s) => s.lookup(block, step),
            Bases::Unused => Err(Error::MissingBasis {
                block,
                step: step.to_string(),
            }),
        }
    }
}

fn resolve_bases<'a>(
    source: BasisSource<'a>,
    reference: &TrajectoryRecord,
    schedule: &CacheSchedule,
    cfg: &StrategyConfig,
) -> Result<Bases<'a>> {
    if matches!(cfg.strategy, Strategy::Whole(_)) {
        return Ok(Bases::Unused);
    }
    Ok(match source {
        BasisSource::Store(s) => Bases::Borrowed(s),
        BasisSource::Reference => Bases::Owned(BasisStore::build(
            reference,
            schedule,
            cfg.tau,
            cfg.basis_mode,
            "reference",
        )?),
    })
}

fn check_schedule(rec: &TrajectoryRecord, schedule: &CacheSchedule) -> Result<()> {
    if rec.num_steps() != schedule.total_steps() {
        return Err(Error::InvalidSchedule(format!(
            "schedule covers {} steps, trajectory has {}",
            schedule.total_steps(),
            rec.num_steps()
        )));
    }
    Ok(())
}

/// Open-loop run over recorded true features.
pub fn run_cached(
    rec: &TrajectoryRecord,
    schedule: &CacheSchedule,
    cfg: &StrategyConfig,
    source: BasisSource<'_>,
) -> Result<RunReport> {
    cfg.validate()?;
    check_schedule(rec, schedule)?;
    let bases = resolve_bases(source, rec, schedule, cfg)?;
    run_with_bases(rec, schedule, cfg, &bases)
}

fn run_with_bases(
    rec: &TrajectoryRecord,
    schedule: &CacheSchedule,
    cfg: &StrategyConfig,
    bases: &Bases<'_>,
) -> Result<RunReport> {
    let mut report = RunReport::new(cfg, schedule, rec.num_blocks());
    for block in 0..rec.num_blocks() {
        let mut cache = BlockCache::new(block, cfg)?;
        let mut reads = 0;
        for step in 0..schedule.total_steps() {
            let truth = rec.feature(block, step)?;
            let row = if schedule.is_compute(step) {
                reads += 1;
                cache.compute(truth, step, bases, cfg.tau)?
            } else {
                cache.predict(truth, step, schedule.interval())?.1
            };
            report.rows.push(row);
        }
        debug_assert_eq!(reads, report.compute_count);
    }
    Ok(report)
}

/// Closed-loop run: predicted block outputs replace the network's at skipped
/// steps, so the noise estimate and every later latent see the cache error.
///
/// Rows are scored against the network evaluated at the cached run's own
/// latent. `final_latent_error` compares against an uncached run from the
/// same initial latent.
pub fn run_cached_closed_loop(
    model: &ToyDenoiser,
    schedule: &CacheSchedule,
    cfg: &StrategyConfig,
    source: BasisSource<'_>,
) -> Result<RunReport> {
    cfg.validate()?;
    let reference = model.run()?;
    check_schedule(&reference.record, schedule)?;
    let bases = resolve_bases(source, &reference.record, schedule, cfg)?;

    let mut report = RunReport::new(cfg, schedule, model.num_blocks());
    let mut caches = (0..model.num_blocks())
        .map(|l| BlockCache::new(l, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<Vec<StepRow>> =
        vec![Vec::with_capacity(schedule.total_steps()); model.num_blocks()];
    let mut x = model.initial_latent().clone();
    for step in 0..schedule.total_steps() {
        let truth = model.block_outputs(&x, step);
        let outs = if schedule.is_compute(step) {
            for (cache, f) in caches.iter_mut().zip(&truth) {
                rows[cache.block].push(cache.compute(f, step, &bases, cfg.tau)?);
            }
            truth
        } else {
            let mut outs = Vec::with_capacity(truth.len());
            for (cache, f) in caches.iter().zip(&truth) {
                let (pred, row) = cache.predict(f, step, schedule.interval())?;
                rows[cache.block].push(row);
                outs.push(pred);
            }
            outs
        };
        let eps = model.epsilon(outs.last().expect("at least one block"));
        x = model.reverse_step(&x, &eps, step)?;
    }
    report.rows = rows.into_iter().flatten().collect();
    report.final_latent_error = Some(error_against(&x, &reference.final_latent)?);
    Ok(report)
}

/// One cell of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub tau: f64,
    pub strategy: Strategy,
    pub report: RunReport,
}

/// Open-loop runs over `taus x strategies`, in that nesting order. Cells run
/// in parallel; the output order is fixed.
pub fn ablation_grid(
    rec: &TrajectoryRecord,
    schedule: &CacheSchedule,
    base: &StrategyConfig,
    taus: &[f64],
    strategies: &[Strategy],
    source: BasisSource<'_>,
) -> Result<Vec<GridCell>> {
    if taus.is_empty() || strategies.is_empty() {
        return Err(Error::InvalidConfig(
            "ablation grid needs at least one tau and one strategy".into(),
        ));
    }
    check_schedule(rec, schedule)?;
    // Bases do not depend on tau (the rank is chosen per run), so one store
    // serves every cell.
    let owned;
    let store = match source {
        BasisSource::Store(s) => s,
        BasisSource::Reference => {
            owned = BasisStore::build(rec, schedule, base.tau, base.basis_mode, "reference")?;
            &owned
        }
    };
    let cells: Vec<(f64, Strategy)> = taus
        .iter()
        .flat_map(|&t| strategies.iter().map(move |&s| (t, s)))
        .collect();
    cells
        .into_par_iter()
        .map(|(tau, strategy)| {
            let cfg = StrategyConfig {
                tau,
                strategy,
                ..base.clone()
            };
            cfg.validate()?;
            let bases = match strategy {
                Strategy::Whole(_) => Bases::Unused,
                Strategy::Split { .. } => Bases::Borrowed(store),
            };
            let report = run_with_bases(rec, schedule, &cfg, &bases)?;
            Ok(GridCell {
                tau,
                strategy,
                report,
            })
        })
        .collect()
}
