//! Small, fast property checks over the core library, runnable from the
//! installed binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use svdcache_core::basis::StepId;
use svdcache_core::engine::report_csv;
use svdcache_core::linalg::{frobenius_inner, frobenius_norm};
use svdcache_core::{
    build_reference_basis, load_basis, load_trajectory, make_schedule, rng, run_cached, save_basis,
    save_trajectory, split, synth_generate, thin_svd, truncate, BasisSource, EmaState, Error,
    FeatureMatrix, Rule, Strategy, StrategyConfig, SynthConfig,
};

pub struct SuiteResult {
    pub name: &'static str,
    pub error: Option<String>,
}

type Check = fn(&Path, bool) -> Result<(), String>;

const SUITES: [(&str, Check); 8] = [
    ("eckart-young", eckart_young),
    ("split-exactness", split_exactness),
    ("ema-closed-form", ema_closed_form),
    ("schedule", schedule),
    ("recompute-exact", recompute_exact),
    ("determinism", determinism),
    ("serialization", serialization),
    ("checksum", checksum),
];

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn s<E: ToString>(e: E) -> String {
    e.to_string()
}

fn matrix(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
    rng::gaussian_features(&mut rng::seeded(seed), rows, cols)
}

fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        tokens: 16,
        channels: 12,
        steps: 12,
        blocks: 2,
        planted_rank: 3,
        residual_rank: 4,
        ..SynthConfig::default()
    }
}

fn eckart_young(_: &Path, _: bool) -> Result<(), String> {
    for seed in 0..5 {
        let f = matrix(9, 6, seed);
        let svd = thin_svd(&f).map_err(s)?;
        let total = frobenius_norm(&f).powi(2);
        for k in 1..=svd.rank() {
            let err = frobenius_norm(&f.sub(&truncate(&svd, k).map_err(s)?).map_err(s)?).powi(2);
            let tail: f64 = svd.sigma[k..].iter().map(|x| x * x).sum();
            ensure((err - tail).abs() <= 1e-8 * total, || {
                format!("seed {seed} k {k}: {err} vs {tail}")
            })?;
        }
    }
    Ok(())
}

fn split_exactness(_: &Path, _: bool) -> Result<(), String> {
    for seed in 0..5 {
        let f = matrix(8, 7, seed);
        let basis = build_reference_basis(&matrix(5, 7, seed + 100), 0.8, 0, StepId::Step(0), "")
            .map_err(s)?;
        let part = split(&f, &basis, None).map_err(s)?;
        let norm = frobenius_norm(&f);
        let back = part.principal.add(&part.residual).map_err(s)?;
        ensure(
            frobenius_norm(&back.sub(&f).map_err(s)?) <= 1e-10 * norm,
            || format!("seed {seed}: sum differs"),
        )?;
        let inner = frobenius_inner(&part.principal, &part.residual).map_err(s)?;
        ensure(inner.abs() <= 1e-8 * norm * norm, || {
            format!("seed {seed}: inner product {inner}")
        })?;
    }
    Ok(())
}

fn ema_closed_form(_: &Path, _: bool) -> Result<(), String> {
    let beta = 0.9;
    let inputs: Vec<FeatureMatrix> = (0..6).map(|i| matrix(3, 4, i)).collect();
    let mut ema = EmaState::new(beta).map_err(s)?;
    for (t, f) in inputs.iter().enumerate() {
        ema.update(f, t).map_err(s)?;
    }
    let n = inputs.len();
    let mut expected = inputs[0].scale(beta.powi(n as i32 - 1));
    for (j, f) in inputs.iter().enumerate().skip(1) {
        expected = expected
            .lincomb(1.0, f, (1.0 - beta) * beta.powi((n - 1 - j) as i32))
            .map_err(s)?;
    }
    let got = ema.predict().map_err(s)?;
    let diff = frobenius_norm(&got.sub(&expected).map_err(s)?);
    ensure(diff <= 1e-12 * frobenius_norm(&expected), || {
        format!("closed form differs by {diff}")
    })
}

fn schedule(_: &Path, _: bool) -> Result<(), String> {
    for t in 1..40 {
        for n in 1..=t {
            let sch = make_schedule(t, n).map_err(s)?;
            ensure(sch.compute_steps().len() == t.div_ceil(n), || {
                format!("T={t} N={n}: wrong count")
            })?;
            ensure(sch.compute_steps()[0] == 0, || {
                format!("T={t} N={n}: first step not 0")
            })?;
        }
    }
    ensure(make_schedule(10, 0).is_err(), || "N=0 accepted".into())
}

fn recompute_exact(_: &Path, _: bool) -> Result<(), String> {
    let rec = synth_generate(&small_synth(1)).map_err(s)?;
    let sch = make_schedule(rec.num_steps(), 3).map_err(s)?;
    let cfg =
        StrategyConfig::default().with_strategy(Strategy::split(Rule::Recompute, Rule::Recompute));
    let report = run_cached(&rec, &sch, &cfg, BasisSource::Reference).map_err(s)?;
    let worst = report.rows.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    ensure(worst == 0.0, || format!("recompute error {worst}"))
}

fn determinism(_: &Path, _: bool) -> Result<(), String> {
    let once = || -> Result<Vec<u8>, String> {
        let rec = synth_generate(&small_synth(2)).map_err(s)?;
        let sch = make_schedule(rec.num_steps(), 4).map_err(s)?;
        let report = run_cached(
            &rec,
            &sch,
            &StrategyConfig::default(),
            BasisSource::Reference,
        )
        .map_err(s)?;
        report_csv(&report).map_err(s)
    };
    ensure(once()? == once()?, || {
        "two identical runs produced different CSV".into()
    })
}

fn serialization(dir: &Path, _: bool) -> Result<(), String> {
    let basis = build_reference_basis(&matrix(10, 6, 3), 0.85, 1, StepId::Step(4), "selftest")
        .map_err(s)?;
    let path = dir.join("rt.svdc");
    save_basis(&basis, &path).map_err(s)?;
    ensure(load_basis(&path).map_err(s)? == basis, || {
        "basis changed on round trip".into()
    })?;
    let rec = synth_generate(&small_synth(4)).map_err(s)?;
    let path = dir.join("rt.svct");
    save_trajectory(&rec, &path).map_err(s)?;
    let back = load_trajectory(&path).map_err(s)?;
    ensure(back.blocks() == rec.blocks(), || {
        "trajectory changed on round trip".into()
    })
}

/// Saved files must verify on load, and a flipped byte must be caught.
/// `inject` corrupts the file that is expected to verify.
fn checksum(dir: &Path, inject: bool) -> Result<(), String> {
    let basis = build_reference_basis(&matrix(6, 5, 5), 0.9, 0, StepId::Step(0), "").map_err(s)?;
    let good = dir.join("good.svdc");
    save_basis(&basis, &good).map_err(s)?;
    if inject {
        flip_byte(&good)?;
    }
    load_basis(&good).map_err(s)?;

    let bad = dir.join("bad.svdc");
    save_basis(&basis, &bad).map_err(s)?;
    flip_byte(&bad)?;
    match load_basis(&bad) {
        Err(Error::Checksum { .. }) => Ok(()),
        Err(e) => Err(format!(
            "corrupted file raised {e} instead of a checksum mismatch"
        )),
        Ok(_) => Err("corrupted file loaded without error".into()),
    }
}

fn flip_byte(path: &Path) -> Result<(), String> {
    let mut bytes = std::fs::read(path).map_err(s)?;
    let i = bytes.len() / 2;
    bytes[i] ^= 0x40;
    std::fs::write(path, bytes).map_err(s)
}

fn scratch_dir() -> Result<PathBuf, String> {
    let dir = std::env::temp_dir().join(format!("svdcache-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(s)?;
    Ok(dir)
}

/// Runs every suite, printing one line each.
pub fn run_all(inject_corruption: bool) -> Vec<SuiteResult> {
    let start = Instant::now();
    let dir = scratch_dir();
    let results: Vec<SuiteResult> = SUITES
        .iter()
        .map(|&(name, check)| {
            let error = match &dir {
                Ok(d) => check(d, inject_corruption).err(),
                Err(e) => Some(format!("no scratch directory: {e}")),
            };
            match &error {
                None => println!("ok    {name}"),
                Some(e) => println!("FAIL  {name}: {e}"),
            }
            SuiteResult { name, error }
        })
        .collect();
    if let Ok(d) = dir {
        let _ = std::fs::remove_dir_all(d);
    }
    println!("selftest finished in {:.2}s", start.elapsed().as_secs_f64());
    results
}
