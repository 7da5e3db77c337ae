use std::sync::Arc;

use approx::assert_relative_eq;
use proptest::prelude::*;

use sfr_core::diagnostics::{ks_two_sample, wilson_interval};
use sfr_core::integrators::{noise_for, simulate_fast_slow, simulate_reduced, ExperimentConfig};
use sfr_core::models::{
    energy_identity_residuals, validate_climate, AbstractModel, AffineDiffusion, ClimateModel, Forcing,
    PolynomialDrift,
};
use sfr_core::noise::{build_path, OuParams, RngStream, SubstepRule};
use sfr_core::reduction::{build_reduced, correction_from, diffusion_b, extra_covariance};
use sfr_core::scenario::{parse_scenario, ScenarioSpec};
use sfr_core::spectral::{dot, Bilinear, LinearMap, SpaceSpec};

fn vec_of(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, n)
}

fn bilinear(o: usize, a: usize, b: usize) -> impl Strategy<Value = Bilinear> {
    vec_of(o * a * b).prop_map(move |v| Bilinear::from_fn(o, a, b, |i, j, k| v[(i * a + j) * b + k]))
}

fn linear(r: usize, c: usize) -> impl Strategy<Value = LinearMap> {
    vec_of(r * c).prop_map(move |v| LinearMap::from_fn(r, c, |i, j| v[i * c + j]))
}

fn spectrum(m: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05..2.0f64, m)
}

/// Climate model whose skew-symmetry holds by construction.
fn skew_climate(d: usize, m: usize) -> impl Strategy<Value = ClimateModel> {
    (spectrum(m), linear(d, d), linear(d, m), vec_of(d * d * d), bilinear(d, d, m), vec_of(d))
        .prop_map(move |(q, a11, a12, raw111, b112, f1)| {
            // B111[i][j][k] = S_j[i][k] - S_j[k][i] gives <B111(x', x), x> = 0
            let b111 = Bilinear::from_fn(d, d, d, |i, j, k| raw111[(j * d + i) * d + k] - raw111[(j * d + k) * d + i]);
            let b211 = Bilinear::from_fn(m, d, d, |mm, j, i| -b112.get(i, j, mm));
            ClimateModel::new(
                SpaceSpec::new(d, q).unwrap(),
                Forcing::Constant(f1),
                a11,
                a12.clone(),
                a12.transpose(),
                b111,
                b112,
                Bilinear::zeros(d, m, m),
                b211,
            )
            .unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bilinear_apply_is_bilinear(t in bilinear(3, 2, 4), u in vec_of(2), u2 in vec_of(2), v in vec_of(4), s in -3.0..3.0f64) {
        let mixed: Vec<f64> = u.iter().zip(&u2).map(|(a, b)| s * a + b).collect();
        let lhs = t.apply(&mixed, &v).unwrap();
        let a = t.apply(&u, &v).unwrap();
        let b = t.apply(&u2, &v).unwrap();
        for i in 0..3 {
            prop_assert!((lhs[i] - (s * a[i] + b[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn symmetrization_keeps_quadratic_form(t in bilinear(2, 3, 3), u in vec_of(3)) {
        let s = t.symmetrize_in_last_two().unwrap();
        prop_assert!(s.is_symmetric_in_last_two(0.0));
        let (a, b) = (t.apply(&u, &u).unwrap(), s.apply(&u, &u).unwrap());
        for i in 0..2 {
            prop_assert!((a[i] - b[i]).abs() <= 1e-12);
        }
        prop_assert_eq!(s.symmetrize_in_last_two().unwrap(), s);
    }

    #[test]
    fn transpose_is_adjoint(l in linear(3, 4), u in vec_of(4), v in vec_of(3)) {
        let a = dot(&l.apply(&u).unwrap(), &v);
        let b = dot(&u, &l.transpose().apply(&v).unwrap());
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn noise_path_identity_holds(eps in 0.01..0.99f64, c in 0.01..1.0f64, seed in any::<u64>()) {
        let params = OuParams::from_spectrum(eps, vec![1.0, 0.3]).unwrap();
        let path = build_path(&params, 0.5, SubstepRule::new(c).unwrap(), &mut RngStream::new(seed, 0).rng()).unwrap();
        let (step, total) = path.identity_residuals();
        prop_assert!(step <= 1e-12 && total <= 1e-12, "{} {}", step, total);
    }

    #[test]
    fn aggregation_and_refinement_preserve_sums(seed in any::<u64>(), factor in 1usize..6) {
        let params = OuParams::from_spectrum(0.3, vec![1.0, 0.5]).unwrap();
        let path = build_path(&params, 1.0, SubstepRule::default(), &mut RngStream::new(seed, 0).rng()).unwrap();
        let inc = path.increments();
        let fine = inc.refine(factor, &[1.0, 0.5], &mut RngStream::new(seed, 1).rng()).unwrap();
        let back = fine.aggregate(factor).unwrap();
        for n in 0..inc.steps() {
            for k in 0..2 {
                prop_assert!((back.step(n)[k] - inc.step(n)[k]).abs() <= 1e-12);
            }
        }
        let (a, b) = (inc.total(), fine.total());
        prop_assert!((a[0] - b[0]).abs() <= 1e-12 && (a[1] - b[1]).abs() <= 1e-12);
    }

    #[test]
    fn extra_covariance_is_psd_and_factored(raw in bilinear(3, 3, 3), q in spectrum(3)) {
        // remove the weighted diagonal so the zero-mean condition holds
        let mut beta = raw.symmetrize_in_last_two().unwrap();
        for i in 0..3 {
            let s: f64 = (0..3).map(|l| beta.get(i, l, l) * q[l]).sum();
            beta.set(i, 0, 0, beta.get(i, 0, 0) - s / q[0]);
        }
        let space = SpaceSpec::new(3, q.clone()).unwrap();
        let model = AbstractModel::new(
            space,
            Arc::new(PolynomialDrift { forcing: Forcing::zero(3), linear: None, quadratic: None }),
            Arc::new(AffineDiffusion { constant: LinearMap::zeros(3, 3), linear: None }),
            beta.clone(),
        ).unwrap();
        let rm = build_reduced(model).unwrap();
        let cov = extra_covariance(&diffusion_b(&beta, &q).unwrap());
        let g = rm.extra_chol();
        for i in 0..3 {
            for j in 0..3 {
                let ggt: f64 = (0..3).map(|k| g.get(i, k) * g.get(j, k)).sum();
                prop_assert!((ggt - cov.get(i, j)).abs() <= 1e-10 * (1.0 + cov.max_abs()));
                prop_assert!((cov.get(i, j) - cov.get(j, i)).abs() <= 1e-14 * (1.0 + cov.max_abs()));
            }
        }
    }

    #[test]
    fn affine_correction_matches_explicit_contraction(s0 in linear(2, 3), s1 in bilinear(2, 2, 3), x in vec_of(2), q in spectrum(3)) {
        let mut sigma = s0.clone();
        for i in 0..2 {
            for m in 0..3 {
                let v: f64 = (0..2).map(|j| s1.get(i, j, m) * x[j]).sum();
                sigma.set(i, m, sigma.get(i, m) + v);
            }
        }
        let c = correction_from(&sigma, &s1, &q);
        for i in 0..2 {
            let mut expected = 0.0;
            for m in 0..3 {
                for j in 0..2 {
                    expected += 0.5 * q[m] * s1.get(i, j, m) * sigma.get(j, m);
                }
            }
            prop_assert!((c[i] - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn skew_climate_satisfies_structure_and_energy(cm in skew_climate(3, 2)) {
        let v = validate_climate(&cm);
        prop_assert!(v.pass, "{:?}", v);
        let e = energy_identity_residuals(&cm, 50);
        prop_assert!(e.iter().all(|r| *r <= 1e-10), "{:?}", e);
    }

    #[test]
    fn coupling_identity_for_random_additive_noise(sigma in linear(2, 2), eps in 0.05..0.5f64, seed in any::<u64>()) {
        let space = SpaceSpec::new(2, vec![1.0, 0.4]).unwrap();
        let model = AbstractModel::new(
            space,
            Arc::new(PolynomialDrift { forcing: Forcing::zero(2), linear: None, quadratic: None }),
            Arc::new(AffineDiffusion { constant: sigma.clone(), linear: None }),
            Bilinear::zeros(2, 2, 2),
        ).unwrap();
        let rm = build_reduced(model.clone()).unwrap();
        let cfg = ExperimentConfig::new(0.5, vec![0.1, 0.2], eps);
        let (plan, noise) = noise_for(&cfg, &[1.0, 0.4], &mut RngStream::new(seed, 0).rng()).unwrap();
        let fast = simulate_fast_slow(&model, &cfg, &noise).unwrap();
        let coarse = noise.increments().aggregate(plan.substeps).unwrap();
        let red = simulate_reduced(&rm, &cfg, &coarse, &mut RngStream::new(seed, 1).rng()).unwrap();
        let yt = noise.y(noise.steps());
        let dy: Vec<f64> = yt.iter().zip(noise.y(0)).map(|(a, b)| a - b).collect();
        let sdy = sigma.apply(&dy).unwrap();
        let (a, b) = (fast.final_value().unwrap(), red.final_value().unwrap());
        for i in 0..2 {
            prop_assert!((a[i] - b[i] + eps * eps * sdy[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn emitted_values_stay_inside_radius(rate in 0.5..12.0f64, radius in 1.5..6.0f64, seed in any::<u64>()) {
        let space = SpaceSpec::new(1, vec![1.0]).unwrap();
        let model = AbstractModel::new(
            space,
            Arc::new(PolynomialDrift { forcing: Forcing::zero(1), linear: Some(LinearMap::from_rows(&[vec![rate]]).unwrap()), quadratic: None }),
            Arc::new(AffineDiffusion { constant: LinearMap::from_rows(&[vec![1.0]]).unwrap(), linear: None }),
            Bilinear::zeros(1, 1, 1),
        ).unwrap();
        let mut cfg = ExperimentConfig::new(1.0, vec![1.0], 0.3);
        cfg.radius = Some(radius);
        let (_, noise) = noise_for(&cfg, &[1.0], &mut RngStream::new(seed, 0).rng()).unwrap();
        let path = simulate_fast_slow(&model, &cfg, &noise).unwrap();
        prop_assert!(path.values.iter().all(|v| v[0].abs() < radius));
        prop_assert!(path.is_stopped() || path.times.len() == cfg.plan().unwrap().macro_steps + 1);
    }

    #[test]
    fn ks_is_symmetric_and_bounded(a in prop::collection::vec(-5.0..5.0f64, 1..40), b in prop::collection::vec(-5.0..5.0f64, 1..40)) {
        let d = ks_two_sample(&a, &b);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, ks_two_sample(&b, &a));
        prop_assert_eq!(ks_two_sample(&a, &a), 0.0);
    }

    #[test]
    fn wilson_interval_contains_estimate(n in 1usize..2000, frac in 0.0..=1.0f64, conf in 0.5..0.999f64) {
        let k = ((n as f64) * frac).round() as usize;
        let (lo, hi) = wilson_interval(k, n, conf);
        let p = k as f64 / n as f64;
        prop_assert!(lo <= p + 1e-12 && p <= hi + 1e-12 && (0.0..=1.0).contains(&lo) && hi <= 1.0);
    }

    #[test]
    fn scenario_round_trips(seed in any::<u64>(), t in 0.1..5.0f64, reps in 1usize..500) {
        let text = format!(r#"{{"model": {{"fixture": "quadratic_offdiag"}}, "kind": "weak",
            "ladder": {{"epsilons": [0.3, 0.1], "replicas": {reps}}}, "config": {{"T": {t}, "substep_c": 0.05}}, "seed": {seed}}}"#);
        let sc = parse_scenario(&text).unwrap();
        let back: ScenarioSpec = serde_json::from_str(&serde_json::to_string(&sc.spec).unwrap()).unwrap();
        prop_assert_eq!(&back, &sc.spec);
        assert_relative_eq!(sc.config.t_end, t);
    }
}
