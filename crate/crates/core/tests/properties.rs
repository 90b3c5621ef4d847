use proptest::prelude::*;
use svdcache_core::basis::{principal_from_left_factors, reconstruct_left_factors};
use svdcache_core::linalg::{frobenius_inner, frobenius_norm};
use svdcache_core::{
    build_reference_basis, energy_fraction, engine, load_basis, make_schedule, rng, run_cached,
    save_basis, similarity, split, synth_generate, taylor_predict, thin_svd, truncate, BasisSource,
    EmaState, FeatureMatrix, History, Rule, StepId, StrategyConfig, SynthConfig,
};

fn matrix(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
    rng::gaussian_features(&mut rng::seeded(seed), rows, cols)
}

fn dims() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..24, 1usize..24, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn truncation_error_is_tail_energy((r, c, seed) in dims()) {
        let f = matrix(r, c, seed);
        let svd = thin_svd(&f).unwrap();
        let total = frobenius_norm(&f).powi(2);
        for k in 1..=svd.rank() {
            let fk = truncate(&svd, k).unwrap();
            let err = frobenius_norm(&f.sub(&fk).unwrap()).powi(2);
            let tail: f64 = svd.sigma[k..].iter().map(|s| s * s).sum();
            prop_assert!((err - tail).abs() <= 1e-8 * total);
        }
    }

    #[test]
    fn split_with_foreign_basis_is_exact_and_orthogonal(
        (r, c, seed) in dims(),
        other_rows in 1usize..24,
        tau in 0.05f64..=1.0,
    ) {
        let f = matrix(r, c, seed);
        let reference = matrix(other_rows, c, seed ^ 0xabcdef);
        let basis = build_reference_basis(&reference, tau, 0, StepId::Step(0), "").unwrap();
        let norm = frobenius_norm(&f);
        for k in 1..=basis.rank() {
            let s = split(&f, &basis, Some(k)).unwrap();
            let back = s.principal.add(&s.residual).unwrap();
            prop_assert!(frobenius_norm(&back.sub(&f).unwrap()) <= 1e-10 * norm);
            prop_assert!(frobenius_inner(&s.principal, &s.residual).unwrap().abs() <= 1e-8 * norm * norm);
            let parts = energy_fraction(&s.principal, &f).unwrap() + energy_fraction(&s.residual, &f).unwrap();
            prop_assert!((parts - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn left_factor_path_matches_projection((r, c, seed) in dims()) {
        let f = matrix(r, c, seed);
        let basis = build_reference_basis(&matrix(r + 3, c, !seed), 0.9, 0, StepId::Step(0), "").unwrap();
        let u = reconstruct_left_factors(&f, &basis).unwrap();
        for k in 1..=basis.rank() {
            if basis.sigma[k - 1] < 1e-6 * basis.sigma[0] {
                break;
            }
            let via_u = principal_from_left_factors(&u, &basis, k).unwrap();
            let direct = split(&f, &basis, Some(k)).unwrap().principal;
            let scale = frobenius_norm(&direct).max(1e-300);
            prop_assert!(frobenius_norm(&via_u.sub(&direct).unwrap()) <= 1e-6 * scale);
        }
    }

    #[test]
    fn ema_is_shift_and_scale_equivariant(
        seed in any::<u64>(),
        n in 1usize..20,
        beta in 0.01f64..0.99,
        c in -5.0f64..5.0,
    ) {
        let inputs: Vec<FeatureMatrix> = (0..n).map(|i| matrix(3, 4, seed.wrapping_add(i as u64))).collect();
        let shift = matrix(3, 4, !seed);
        let mut plain = EmaState::new(beta).unwrap();
        let mut shifted = EmaState::new(beta).unwrap();
        let mut scaled = EmaState::new(beta).unwrap();
        for (t, f) in inputs.iter().enumerate() {
            plain.update(f, t).unwrap();
            shifted.update(&f.add(&shift).unwrap(), t).unwrap();
            scaled.update(&f.scale(c), t).unwrap();
        }
        let p = plain.predict().unwrap();
        let s = shifted.predict().unwrap().sub(&shift).unwrap();
        prop_assert!(frobenius_norm(&s.sub(&p).unwrap()) <= 1e-12 * (1.0 + frobenius_norm(&p) + frobenius_norm(&shift)));
        let q = scaled.predict().unwrap();
        prop_assert!(frobenius_norm(&q.sub(&p.scale(c)).unwrap()) <= 1e-12 * (1.0 + frobenius_norm(&q)));
    }

    #[test]
    fn taylor_reproduces_planted_polynomials(
        seed in any::<u64>(),
        order in 0usize..4,
        start in 0usize..10,
        gap in 1usize..4,
        ahead in 1usize..6,
    ) {
        let coeffs: Vec<FeatureMatrix> = (0..=order).map(|i| matrix(2, 3, seed ^ i as u64)).collect();
        let poly = |t: usize| {
            let x = t as f64;
            let mut acc = FeatureMatrix::zeros(2, 3);
            for (i, c) in coeffs.iter().enumerate() {
                acc = acc.lincomb(1.0, c, x.powi(i as i32)).unwrap();
            }
            acc
        };
        let mut h = History::new(order);
        let mut last = start;
        for j in 0..=order {
            last = start + j * gap;
            h.push(last, poly(last)).unwrap();
        }
        let target = last + ahead;
        let truth = poly(target);
        let got = taylor_predict(&h, target).unwrap();
        prop_assert!(frobenius_norm(&got.sub(&truth).unwrap()) <= 1e-10 * frobenius_norm(&truth).max(1.0));
    }

    #[test]
    fn similarity_is_symmetric_bounded_and_scale_invariant(
        a in prop::collection::vec(-10.0f64..10.0, 1..30),
        seed in any::<u64>(),
        c in 0.01f64..100.0,
    ) {
        let b: Vec<f64> = matrix(1, a.len(), seed).row_major_iter().collect();
        let ab = similarity(&a, &b).unwrap();
        let ba = similarity(&b, &a).unwrap();
        prop_assert_eq!(ab.product, ba.product);
        prop_assert!((-1.0..=1.0).contains(&ab.product));
        prop_assert_eq!(ab.product, ab.cosine * ab.magnitude_ratio);
        let ca: Vec<f64> = a.iter().map(|x| c * x).collect();
        let cb: Vec<f64> = b.iter().map(|x| c * x).collect();
        let scaled = similarity(&ca, &cb).unwrap();
        prop_assert!((scaled.product - ab.product).abs() <= 1e-12);
    }

    #[test]
    fn schedule_invariants(t in 1usize..200, n_frac in 0.0f64..1.0) {
        let n = 1 + ((t - 1) as f64 * n_frac) as usize;
        let s = make_schedule(t, n).unwrap();
        prop_assert_eq!(s.compute_steps().len(), t.div_ceil(n));
        prop_assert_eq!(s.compute_steps()[0], 0);
        prop_assert!(s.compute_steps().windows(2).all(|w| w[1] - w[0] == n));
        prop_assert_eq!(s.speedup(), t as f64 / t.div_ceil(n) as f64);
    }

    #[test]
    fn basis_files_round_trip((r, c, seed) in dims(), tau in 0.05f64..=1.0) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.svdc");
        let basis = build_reference_basis(&matrix(r, c, seed), tau, 3, StepId::Step(7), "p").unwrap();
        save_basis(&basis, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = load_basis(&path).unwrap();
        prop_assert_eq!(&back, &basis);
        save_basis(&back, &path).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), first);
    }
}

#[test]
fn decomposed_reuse_equals_whole_reuse_on_default_suite() {
    let rec = synth_generate(&SynthConfig::default()).unwrap();
    let schedule = make_schedule(50, 5).unwrap();
    let base = StrategyConfig::default();
    let a = run_cached(
        &rec,
        &schedule,
        &base.with_strategy(engine::Strategy::split(Rule::Reuse, Rule::Reuse)),
        BasisSource::Reference,
    )
    .unwrap();
    let b = run_cached(
        &rec,
        &schedule,
        &base.with_strategy(engine::Strategy::Whole(Rule::Reuse)),
        BasisSource::Reference,
    )
    .unwrap();
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert!((x.rel_error - y.rel_error).abs() <= 1e-12 * y.rel_error.max(1e-300));
    }
}

#[test]
fn reuse_error_degrades_with_interval() {
    let strategy = engine::Strategy::split(Rule::Ema, Rule::Reuse);
    let cfg = StrategyConfig::default().with_strategy(strategy);
    let mut seed_errors = vec![0.0; 7];
    for seed in 0..3 {
        let rec = synth_generate(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        for (i, n) in [1, 2, 4, 5, 6, 7, 8].into_iter().enumerate() {
            let report = run_cached(
                &rec,
                &make_schedule(50, n).unwrap(),
                &cfg,
                BasisSource::Reference,
            )
            .unwrap();
            seed_errors[i] += report.summary().unwrap().mean_rel_error;
        }
    }
    for w in seed_errors.windows(2) {
        assert!(w[1] >= w[0], "{seed_errors:?}");
    }
}
