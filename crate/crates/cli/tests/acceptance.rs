//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use svdcache_cli::commands::cmd_run;
use svdcache_cli::config::ExperimentConfig;
use svdcache_core::basis::{principal_from_left_factors, reconstruct_left_factors};
use svdcache_core::linalg::{frobenius_inner, frobenius_norm, project_onto_basis};
use svdcache_core::trajectory::smoothness_stats;
use svdcache_core::{
    basis_similarity, build_reference_basis, load_basis, load_trajectory, make_schedule, rng,
    run_cached, run_cached_closed_loop, save_basis, save_trajectory, split, synth_generate,
    thin_svd, truncate, BasisSource, DenoiserConfig, EmaState, Error, FeatureMatrix, Rule, StepId,
    Strategy, StrategyConfig, SynthConfig, ToyDenoiser,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn matrix(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
    rng::gaussian_features(&mut rng::seeded(seed), rows, cols)
}

fn verdict(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    if took < limit {
        Ok(())
    } else {
        Err(format!(
            "took {:.1}s, limit {}s",
            took.as_secs_f64(),
            limit.as_secs()
        ))
    }
}

fn eckart_young() -> Outcome {
    let start = Instant::now();
    let cases: Vec<(usize, usize, u64)> = (0..100)
        .flat_map(|s| [(64, 32, s), (128, 256, 1_000 + s)])
        .collect();
    let worst = cases
        .par_iter()
        .map(|&(r, c, seed)| {
            let f = matrix(r, c, seed);
            let svd = thin_svd(&f).map_err(|e| e.to_string())?;
            let total = frobenius_norm(&f).powi(2);
            let mut worst = 0.0f64;
            for k in 1..=svd.rank() {
                let fk = truncate(&svd, k).map_err(|e| e.to_string())?;
                let err = frobenius_norm(&f.sub(&fk).unwrap()).powi(2);
                let tail: f64 = svd.sigma[k..].iter().map(|s| s * s).sum();
                worst = worst.max((err - tail).abs() / total);
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>, String>>()?
        .into_iter()
        .fold(0.0, f64::max);
    within(Duration::from_secs(30), start)?;
    verdict(
        worst <= 1e-8,
        format!("worst |err - tail| / |F|^2 = {worst:.2e} (limit 1e-8)"),
    )
}

fn split_exactness() -> Outcome {
    let start = Instant::now();
    let mut worst_sum = 0.0f64;
    let mut worst_inner = 0.0f64;
    for seed in 0..100u64 {
        let (r, c) = if seed % 2 == 0 { (64, 32) } else { (48, 96) };
        let f = matrix(r, c, seed);
        // Half the bases come from F itself, half from an unrelated matrix.
        let reference = if seed % 4 < 2 {
            f.clone()
        } else {
            matrix(r / 2 + 3, c, seed + 50_000)
        };
        let basis = build_reference_basis(&reference, 0.85, 0, StepId::Step(0), "")
            .map_err(|e| e.to_string())?;
        let norm = frobenius_norm(&f);
        for k in 1..=basis.rank() {
            let s = split(&f, &basis, Some(k)).map_err(|e| e.to_string())?;
            let back = s.principal.add(&s.residual).unwrap();
            worst_sum = worst_sum.max(frobenius_norm(&back.sub(&f).unwrap()) / norm);
            worst_inner = worst_inner
                .max(frobenius_inner(&s.principal, &s.residual).unwrap().abs() / (norm * norm));
        }
    }
    within(Duration::from_secs(30), start)?;
    verdict(
        worst_sum <= 1e-10 && worst_inner <= 1e-8,
        format!("worst sum defect {worst_sum:.2e} (limit 1e-10), worst inner {worst_inner:.2e} (limit 1e-8)"),
    )
}

fn sigma_cancellation() -> Outcome {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..100u64 {
        let f = matrix(64, 32, seed);
        let basis =
            build_reference_basis(&matrix(40, 32, seed + 9_000), 0.85, 0, StepId::Step(0), "")
                .map_err(|e| e.to_string())?;
        let u = reconstruct_left_factors(&f, &basis).map_err(|e| e.to_string())?;
        for k in 1..=basis.rank() {
            if basis.sigma[k - 1] < 1e-6 * basis.sigma[0] {
                break;
            }
            let via_u = principal_from_left_factors(&u, &basis, k).map_err(|e| e.to_string())?;
            let direct = project_onto_basis(&f, &basis.leading(k).unwrap()).unwrap();
            worst =
                worst.max(frobenius_norm(&via_u.sub(&direct).unwrap()) / frobenius_norm(&direct));
            checked += 1;
        }
    }
    verdict(
        worst <= 1e-6,
        format!("{checked} (case, k) pairs, worst relative gap {worst:.2e} (limit 1e-6)"),
    )
}

fn ema_closed_form() -> Outcome {
    let mut worst = 0.0f64;
    for beta in [0.5, 0.9, 0.99] {
        for len in 1..=50usize {
            let inputs: Vec<FeatureMatrix> = (0..len)
                .map(|i| matrix(6, 5, (len * 100 + i) as u64))
                .collect();
            let mut ema = EmaState::new(beta).unwrap();
            for (t, f) in inputs.iter().enumerate() {
                ema.update(f, t).unwrap();
            }
            // state_n = beta^(n-1) F_0 + sum_{j>=1} (1 - beta) beta^(n-1-j) F_j
            let n = len as i32;
            let mut oracle = inputs[0].scale(beta.powi(n - 1));
            for (j, f) in inputs.iter().enumerate().skip(1) {
                oracle = oracle
                    .lincomb(1.0, f, (1.0 - beta) * beta.powi(n - 1 - j as i32))
                    .unwrap();
            }
            let got = ema.state().unwrap();
            worst = worst.max(frobenius_norm(&got.sub(&oracle).unwrap()) / frobenius_norm(&oracle));
        }
    }
    verdict(
        worst <= 1e-12,
        format!("worst relative gap {worst:.2e} (limit 1e-12)"),
    )
}

fn schedule_arithmetic() -> Outcome {
    let a = make_schedule(50, 5).map_err(|e| e.to_string())?;
    let b = make_schedule(50, 6).map_err(|e| e.to_string())?;
    let ok = a.compute_steps().len() == 10
        && a.speedup() == 5.0
        && b.compute_steps().len() == 9
        && b.speedup() == 50.0 / 9.0
        && format!("{:.2}", b.speedup()) == "5.56";
    verdict(
        ok,
        format!(
            "N=5: {} computes, {:.2}x; N=6: {} computes, {:.2}x",
            a.compute_steps().len(),
            a.speedup(),
            b.compute_steps().len(),
            b.speedup()
        ),
    )
}

/// Mean relative error per (seed, config) on the default suite at N=5.
fn suite_errors(configs: &[StrategyConfig]) -> Result<Vec<Vec<f64>>, String> {
    (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let rec = synth_generate(&SynthConfig {
                seed,
                ..SynthConfig::default()
            })
            .map_err(|e| e.to_string())?;
            let schedule = make_schedule(rec.num_steps(), 5).unwrap();
            configs
                .iter()
                .map(|cfg| {
                    run_cached(&rec, &schedule, cfg, BasisSource::Reference)
                        .and_then(|r| r.summary())
                        .map(|s| s.mean_rel_error)
                        .map_err(|e| e.to_string())
                })
                .collect()
        })
        .collect()
}

fn strategy_ordering() -> Outcome {
    let start = Instant::now();
    let base = StrategyConfig::default();
    let configs: Vec<StrategyConfig> = [
        (Rule::Ema, Rule::Reuse),
        (Rule::Reuse, Rule::Reuse),
        (Rule::Ema, Rule::Ema),
    ]
    .into_iter()
    .map(|(p, r)| base.with_strategy(Strategy::split(p, r)))
    .collect();
    let per_seed = suite_errors(&configs)?;
    within(Duration::from_secs(120), start)?;
    let seeds_ok = per_seed
        .iter()
        .filter(|e| e[0] < e[1] && e[0] < e[2])
        .count();
    let mean = |i: usize| per_seed.iter().map(|e| e[i]).sum::<f64>() / per_seed.len() as f64;
    let (split_ema, reuse, ema) = (mean(0), mean(1), mean(2));
    verdict(
        seeds_ok >= 9 && split_ema <= 0.95 * reuse && split_ema <= 0.95 * ema,
        format!(
            "mean error ema+reuse {split_ema:.4}, reuse+reuse {reuse:.4}, ema+ema {ema:.4}; \
             ordering holds on {seeds_ok}/10 seeds (need 9 and 5% margins)"
        ),
    )
}

fn tau_sweep() -> Outcome {
    let taus = [0.5, 0.7, 0.85, 0.95, 0.99];
    let base = StrategyConfig::default();
    let configs: Vec<StrategyConfig> = taus.iter().map(|&t| base.with_tau(t)).collect();
    let per_seed = suite_errors(&configs)?;
    let curve: Vec<f64> = (0..taus.len())
        .map(|i| per_seed.iter().map(|e| e[i]).sum::<f64>() / per_seed.len() as f64)
        .collect();
    let argmin = (0..curve.len())
        .min_by(|&a, &b| curve[a].total_cmp(&curve[b]))
        .unwrap();
    let text: Vec<String> = taus
        .iter()
        .zip(&curve)
        .map(|(t, e)| format!("{t}:{e:.4}"))
        .collect();
    verdict(
        argmin != 0 && argmin != taus.len() - 1,
        format!(
            "curve [{}], minimum at tau={}",
            text.join(" "),
            taus[argmin]
        ),
    )
}

fn basis_stability() -> Outcome {
    let records: Vec<_> = (0..5u64)
        .map(|seed| {
            synth_generate(&SynthConfig {
                seed,
                ..SynthConfig::default()
            })
            .unwrap()
        })
        .collect();
    let mut worst = f64::INFINITY;
    for block in 0..records[0].num_blocks() {
        let bases: Vec<_> = records
            .iter()
            .map(|r| {
                build_reference_basis(
                    r.feature(block, 0).unwrap(),
                    0.85,
                    block as i32,
                    StepId::Step(0),
                    "",
                )
            })
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        for i in 0..bases.len() {
            for j in i + 1..bases.len() {
                worst = worst.min(
                    basis_similarity(&bases[i], &bases[j])
                        .map_err(|e| e.to_string())?
                        .summary,
                );
            }
        }
    }
    verdict(
        worst > 0.8,
        format!("lowest pairwise summary {worst:.4} over 5 prompts (need > 0.8)"),
    )
}

fn subspace_smoothness() -> Outcome {
    let mut ratio_ok = 0;
    let mut total = 0;
    let (mut principal_change, mut residual_change) = (0.0, 0.0);
    for seed in 0..10u64 {
        let rec = synth_generate(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        for block in 0..rec.num_blocks() {
            let basis = build_reference_basis(
                rec.feature(block, 0).unwrap(),
                0.85,
                block as i32,
                StepId::Step(0),
                "",
            )
            .map_err(|e| e.to_string())?;
            let s = smoothness_stats(&rec, block, &basis, None).map_err(|e| e.to_string())?;
            total += 1;
            if s.residual.path_ratio > s.principal.path_ratio {
                ratio_ok += 1;
            }
            principal_change += s.principal.step_change;
            residual_change += s.residual.step_change;
        }
    }
    verdict(
        ratio_ok == total && principal_change < residual_change,
        format!(
            "residual path ratio above principal in {ratio_ok}/{total} (seed, block) cases; \
             mean step change principal {:.4} vs residual {:.4}",
            principal_change / total as f64,
            residual_change / total as f64
        ),
    )
}

fn closed_loop() -> Outcome {
    let model = ToyDenoiser::new(&DenoiserConfig::default()).map_err(|e| e.to_string())?;
    let t = model.num_steps();
    let base = StrategyConfig::default();
    let run = |n: usize, cfg: &StrategyConfig| {
        run_cached_closed_loop(
            &model,
            &make_schedule(t, n).unwrap(),
            cfg,
            BasisSource::Reference,
        )
        .map_err(|e| e.to_string())
        .map(|r| {
            r.final_latent_error
                .expect("closed loop reports a latent error")
        })
    };
    let every_step = run(1, &base)?;
    let recompute = run(
        5,
        &base.with_strategy(Strategy::split(Rule::Recompute, Rule::Recompute)),
    )?;
    let split_ema = run(5, &base)?;
    let reuse = run(
        5,
        &base.with_strategy(Strategy::split(Rule::Reuse, Rule::Reuse)),
    )?;
    verdict(
        every_step == 0.0 && recompute == 0.0 && split_ema < reuse,
        format!(
            "N=1 error {every_step:e}, recompute error {recompute:e}; N=5 final-latent error \
             ema+reuse {split_ema:.4} vs reuse+reuse {reuse:.4}"
        ),
    )
}

fn serialization() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let e = |x: Error| x.to_string();
    let basis = build_reference_basis(&matrix(64, 32, 11), 0.85, 2, StepId::Step(10), "fixture")
        .map_err(e)?;
    let bpath = dir.path().join("fixture.svdc");
    save_basis(&basis, &bpath).map_err(e)?;
    let first = std::fs::read(&bpath).unwrap();
    save_basis(&load_basis(&bpath).map_err(e)?, &bpath).map_err(e)?;
    let basis_exact = std::fs::read(&bpath).unwrap() == first;

    let rec = synth_generate(&SynthConfig {
        steps: 8,
        ..SynthConfig::default()
    })
    .map_err(e)?;
    let tpath = dir.path().join("fixture.svct");
    save_trajectory(&rec, &tpath).map_err(e)?;
    let first = std::fs::read(&tpath).unwrap();
    save_trajectory(&load_trajectory(&tpath).map_err(e)?, &tpath).map_err(e)?;
    let traj_exact = std::fs::read(&tpath).unwrap() == first;

    let mut rejected = 0;
    for (path, offset) in [
        (&bpath, 40usize),
        (&bpath, 1000),
        (&tpath, 30),
        (&tpath, 5000),
    ] {
        let clean = std::fs::read(path).unwrap();
        let mut bytes = clean.clone();
        bytes[offset] ^= 0x01;
        std::fs::write(path, &bytes).unwrap();
        let result = if path.extension().unwrap() == "svdc" {
            load_basis(path).map(drop)
        } else {
            load_trajectory(path).map(drop)
        };
        if matches!(result, Err(Error::Checksum { .. })) {
            rejected += 1;
        }
        std::fs::write(path, clean).unwrap();
    }
    verdict(
        basis_exact && traj_exact && rejected == 4,
        format!(
            "basis byte-exact {basis_exact}, trajectory byte-exact {traj_exact}, \
             {rejected}/4 corrupted fixtures rejected with checksum errors"
        ),
    )
}

fn determinism() -> Outcome {
    let cfg = ExperimentConfig::load(None, &["seeds=[3]".into()]).map_err(|e| e.to_string())?;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_run(&cfg, a.path()).map_err(|e| e.to_string())?;
    cmd_run(&cfg, b.path()).map_err(|e| e.to_string())?;
    let mut same = 0;
    for name in ["run_seed3.json", "run_seed3.csv"] {
        let x = std::fs::read(a.path().join(name)).map_err(|e| format!("{name}: {e}"))?;
        let y = std::fs::read(b.path().join(name)).map_err(|e| format!("{name}: {e}"))?;
        if x == y {
            same += 1;
        }
    }
    verdict(
        same == 2,
        format!("{same}/2 report files byte-identical across two runs"),
    )
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("eckart-young identity", eckart_young),
        ("split exactness and orthogonality", split_exactness),
        ("sigma-cancellation equivalence", sigma_cancellation),
        ("EMA closed form", ema_closed_form),
        ("schedule arithmetic", schedule_arithmetic),
        ("strategy ablation ordering", strategy_ordering),
        ("tau sweep interior minimum", tau_sweep),
        ("cross-prompt basis stability", basis_stability),
        ("principal smoother than residual", subspace_smoothness),
        ("closed-loop toy denoiser", closed_loop),
        ("serialization and checksums", serialization),
        ("report determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (tag, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} [{:>2}] {name}: {detail} ({:.1}s)",
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
