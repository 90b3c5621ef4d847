use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use svdcache_core::basis::{basis_similarity, build_reference_basis, BasisStore, StepId};
use svdcache_core::engine::{
    run_cached, run_cached_closed_loop, write_report, BasisSource, RunReport,
};
use svdcache_core::trajectory::{pca_trace, smoothness_stats, TraceComponent};
use svdcache_core::{
    load_trajectory, make_schedule, save_trajectory, synth_generate, CacheSchedule, DenoiserConfig,
    Strategy, StrategyConfig, SynthConfig, ToyDenoiser, TrajectoryRecord,
};

use crate::config::{ExperimentConfig, SourceKind};
use crate::CliError;

fn synth_cfg(cfg: &ExperimentConfig, seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        ..cfg.synth.clone()
    }
}

fn denoiser_cfg(cfg: &ExperimentConfig, seed: u64) -> DenoiserConfig {
    DenoiserConfig {
        seed,
        ..cfg.denoiser.clone()
    }
}

/// The ground-truth trajectory for one seed. File sources ignore the seed.
pub fn trajectory_for(cfg: &ExperimentConfig, seed: u64) -> Result<TrajectoryRecord, CliError> {
    Ok(match cfg.source.kind {
        SourceKind::Synth => synth_generate(&synth_cfg(cfg, seed))?,
        SourceKind::ToyDenoiser => ToyDenoiser::new(&denoiser_cfg(cfg, seed))?.run()?.record,
        SourceKind::File => load_trajectory(cfg.source.path.as_deref().expect("validated"))?,
    })
}

fn source_id(cfg: &ExperimentConfig, seed: u64) -> String {
    match cfg.source.kind {
        SourceKind::Synth => format!("synth:seed={seed}"),
        SourceKind::ToyDenoiser => format!("toy-denoiser:seed={seed}"),
        SourceKind::File => format!(
            "file:{}",
            cfg.source.path.as_deref().expect("validated").display()
        ),
    }
}

fn schedule_for(steps: usize, interval: usize) -> Result<CacheSchedule, CliError> {
    Ok(make_schedule(steps, interval)?)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let tmp = path.with_extension("csv.tmp");
    fs::write(&tmp, bytes)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// One-time decomposition of the first seed's trajectory into `<out>/bases`.
pub fn cmd_decompose(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, CliError> {
    let seed = cfg.seeds[0];
    let rec = trajectory_for(cfg, seed)?;
    let schedule = schedule_for(rec.num_steps(), cfg.schedule.interval)?;
    let store = BasisStore::build(
        &rec,
        &schedule,
        cfg.strategy.tau,
        cfg.strategy.basis_mode,
        &source_id(cfg, seed),
    )?;
    let dir = out.join("bases");
    store.save_dir(&dir)?;
    println!(
        "wrote {} bases ({} mode) to {}",
        store.len(),
        cfg.strategy.basis_mode,
        dir.display()
    );
    Ok(dir)
}

/// Writes one trajectory container per seed.
pub fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    create_dir(out)?;
    let records = cfg
        .seeds
        .par_iter()
        .map(|&s| trajectory_for(cfg, s).map(|r| (s, r)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut paths = Vec::new();
    for (seed, rec) in records {
        let path = out.join(format!("trajectory_seed{seed}.svct"));
        save_trajectory(&rec, &path)?;
        let (n, d) = rec.feature_shape();
        println!(
            "seed {seed}: {} blocks x {} steps of {n}x{d} -> {}",
            rec.num_blocks(),
            rec.num_steps(),
            path.display()
        );
        paths.push(path);
    }
    Ok(paths)
}

fn load_store(cfg: &ExperimentConfig) -> Result<Option<BasisStore>, CliError> {
    cfg.basis
        .dir
        .as_deref()
        .map(BasisStore::load_dir)
        .transpose()
        .map_err(Into::into)
}

fn run_one(
    cfg: &ExperimentConfig,
    strategy: &StrategyConfig,
    interval: usize,
    seed: u64,
    store: Option<&BasisStore>,
) -> Result<RunReport, CliError> {
    let source = store.map_or(BasisSource::Reference, BasisSource::Store);
    if cfg.source.closed_loop {
        let model = ToyDenoiser::new(&denoiser_cfg(cfg, seed))?;
        let schedule = schedule_for(model.num_steps(), interval)?;
        return Ok(run_cached_closed_loop(&model, &schedule, strategy, source)?);
    }
    let rec = trajectory_for(cfg, seed)?;
    let schedule = schedule_for(rec.num_steps(), interval)?;
    Ok(run_cached(&rec, &schedule, strategy, source)?)
}

/// One cached run per seed; writes `run_seed<S>.json` and `.csv`.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RunReport>, CliError> {
    create_dir(out)?;
    let store = load_store(cfg)?;
    let reports = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            run_one(
                cfg,
                &cfg.strategy,
                cfg.schedule.interval,
                seed,
                store.as_ref(),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    for (seed, report) in cfg.seeds.iter().zip(&reports) {
        write_report(report, out, &format!("run_seed{seed}"))?;
        let s = report.summary()?;
        let mut line = format!(
            "seed {seed}: {} N={} mean_err={:.6} max_err={:.6} mean_sim={:.6} speedup={:.2}x",
            report.config.strategy,
            report.schedule.interval(),
            s.mean_rel_error,
            s.max_rel_error,
            s.mean_similarity,
            s.theoretical_speedup
        );
        if let Some(e) = report.final_latent_error {
            let _ = write!(line, " final_latent_err={e:.6}");
        }
        println!("{line}");
    }
    Ok(reports)
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareRow {
    pub rank: usize,
    pub strategy: String,
    pub interval: usize,
    pub tau: f64,
    pub seeds: usize,
    pub mean_rel_error: f64,
    pub max_rel_error: f64,
    pub mean_similarity: f64,
    pub final_latent_error: Option<f64>,
    pub compute_steps: usize,
    pub speedup: f64,
}

/// Seed-averaged comparison over strategies x intervals x taus, sorted by
/// mean error; writes `comparison.csv`.
pub fn cmd_compare(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<CompareRow>, CliError> {
    create_dir(out)?;
    let store = load_store(cfg)?;
    let strategies: Vec<Strategy> = if cfg.compare.strategies.is_empty() {
        vec![cfg.strategy.strategy]
    } else {
        cfg.compare.strategies.clone()
    };
    let intervals = if cfg.compare.intervals.is_empty() {
        vec![cfg.schedule.interval]
    } else {
        cfg.compare.intervals.clone()
    };
    let taus = if cfg.compare.taus.is_empty() {
        vec![cfg.strategy.tau]
    } else {
        cfg.compare.taus.clone()
    };
    let mut cells = Vec::new();
    for &strategy in &strategies {
        for &interval in &intervals {
            for &tau in &taus {
                cells.push((strategy, interval, tau));
            }
        }
    }
    let mut rows = cells
        .par_iter()
        .map(|&(strategy, interval, tau)| {
            let sc = StrategyConfig {
                strategy,
                tau,
                ..cfg.strategy.clone()
            };
            sc.validate()?;
            let reports = cfg
                .seeds
                .iter()
                .map(|&seed| run_one(cfg, &sc, interval, seed, store.as_ref()))
                .collect::<Result<Vec<_>, _>>()?;
            aggregate(strategy, interval, tau, &reports)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    rows.sort_by(|a, b| a.mean_rel_error.total_cmp(&b.mean_rel_error));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    write_csv(&out.join("comparison.csv"), &rows)?;
    println!(
        "{:>4}  {:<18} {:>3} {:>6} {:>12} {:>10} {:>8}",
        "rank", "strategy", "N", "tau", "mean_err", "mean_sim", "speedup"
    );
    for r in &rows {
        println!(
            "{:>4}  {:<18} {:>3} {:>6.3} {:>12.6} {:>10.6} {:>7.2}x",
            r.rank, r.strategy, r.interval, r.tau, r.mean_rel_error, r.mean_similarity, r.speedup
        );
    }
    Ok(rows)
}

fn aggregate(
    strategy: Strategy,
    interval: usize,
    tau: f64,
    reports: &[RunReport],
) -> Result<CompareRow, CliError> {
    let n = reports.len() as f64;
    let mut row = CompareRow {
        rank: 0,
        strategy: strategy.to_string(),
        interval,
        tau,
        seeds: reports.len(),
        mean_rel_error: 0.0,
        max_rel_error: 0.0,
        mean_similarity: 0.0,
        final_latent_error: None,
        compute_steps: reports[0].compute_steps.len(),
        speedup: 0.0,
    };
    let mut latent = 0.0;
    for r in reports {
        let s = r.summary()?;
        row.mean_rel_error += s.mean_rel_error / n;
        row.max_rel_error = row.max_rel_error.max(s.max_rel_error);
        row.mean_similarity += s.mean_similarity / n;
        row.speedup = s.theoretical_speedup;
        if let Some(e) = r.final_latent_error {
            latent += e / n;
            row.final_latent_error = Some(latent);
        }
    }
    Ok(row)
}

#[derive(Serialize)]
struct TraceRow {
    step: usize,
    x: f64,
    y: f64,
}

#[derive(Serialize)]
struct SmoothnessRow {
    seed: u64,
    block: usize,
    principal_step_change: f64,
    residual_step_change: f64,
    principal_path_ratio: f64,
    residual_path_ratio: f64,
    whole_step_change: f64,
    whole_path_ratio: f64,
}

#[derive(Serialize)]
pub struct SimilarityRow {
    pub block: usize,
    pub seed_a: u64,
    pub seed_b: u64,
    pub sigma: f64,
    pub summary: f64,
}

#[derive(Debug, Default)]
pub struct AnalyzeOutput {
    pub trace_files: Vec<PathBuf>,
    pub smoothness_file: Option<PathBuf>,
    pub similarity_file: Option<PathBuf>,
    pub min_similarity: Option<f64>,
}

/// PCA traces, step-0 basis similarity across seeds, and smoothness
/// statistics. Every basis is built from step 0 of its own trajectory.
pub fn cmd_analyze(cfg: &ExperimentConfig, out: &Path) -> Result<AnalyzeOutput, CliError> {
    create_dir(out)?;
    let records = cfg
        .seeds
        .par_iter()
        .map(|&s| trajectory_for(cfg, s))
        .collect::<Result<Vec<_>, _>>()?;
    let num_blocks = records[0].num_blocks();
    let blocks: Vec<usize> = if cfg.analyze.blocks.is_empty() {
        (0..num_blocks).collect()
    } else {
        cfg.analyze.blocks.clone()
    };
    let tau = cfg.strategy.tau;
    let step0 = |rec: &TrajectoryRecord, block: usize| -> Result<_, CliError> {
        Ok(build_reference_basis(
            rec.feature(block, 0)?,
            tau,
            block as i32,
            StepId::Step(0),
            "",
        )?)
    };

    let mut output = AnalyzeOutput::default();
    let first = &records[0];
    for &block in &blocks {
        let basis = step0(first, block)?;
        for component in TraceComponent::ALL {
            let pts = pca_trace(first, block, Some(&basis), None, component)?;
            let rows: Vec<TraceRow> = pts
                .iter()
                .enumerate()
                .map(|(step, p)| TraceRow {
                    step,
                    x: p[0],
                    y: p[1],
                })
                .collect();
            let path = out.join(format!("pca_block{block:02}_{}.csv", component.name()));
            write_csv(&path, &rows)?;
            output.trace_files.push(path);
        }
    }

    let mut smooth = Vec::new();
    for (&seed, rec) in cfg.seeds.iter().zip(&records) {
        for &block in &blocks {
            let s = smoothness_stats(rec, block, &step0(rec, block)?, None)?;
            smooth.push(SmoothnessRow {
                seed,
                block,
                principal_step_change: s.principal.step_change,
                residual_step_change: s.residual.step_change,
                principal_path_ratio: s.principal.path_ratio,
                residual_path_ratio: s.residual.path_ratio,
                whole_step_change: s.whole.step_change,
                whole_path_ratio: s.whole.path_ratio,
            });
        }
    }
    let path = out.join("smoothness.csv");
    write_csv(&path, &smooth)?;
    output.smoothness_file = Some(path);

    if records.len() < 2 {
        eprintln!("note: basis similarity needs at least two seeds; skipped");
    } else {
        let mut sims = Vec::new();
        for &block in &blocks {
            let bases = records
                .iter()
                .map(|r| step0(r, block))
                .collect::<Result<Vec<_>, _>>()?;
            for i in 0..bases.len() {
                for j in i + 1..bases.len() {
                    let s = basis_similarity(&bases[i], &bases[j])?;
                    sims.push(SimilarityRow {
                        block,
                        seed_a: cfg.seeds[i],
                        seed_b: cfg.seeds[j],
                        sigma: s.sigma,
                        summary: s.summary,
                    });
                }
            }
        }
        output.min_similarity = sims.iter().map(|s| s.summary).reduce(f64::min);
        let path = out.join("basis_similarity.csv");
        write_csv(&path, &sims)?;
        output.similarity_file = Some(path);
    }
    println!(
        "wrote {} trace files, smoothness table{}",
        output.trace_files.len(),
        match output.min_similarity {
            Some(m) => format!(", basis similarity table (min summary {m:.4})"),
            None => String::new(),
        }
    );
    Ok(output)
}
