use super::*;
use crate::gaussian_approx::{build_approx, GaussianApprox};
use crate::samplers::{run_chain, ProposalSpec};
use crate::targets::GaussianTarget;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// Mean and standard error of `min(1, r~) f(y)` with `y ~ N(center, c2 I)`.
fn mc_oracle(
    x: &DVector<f64>,
    center: &DVector<f64>,
    c2: f64,
    alg: Algorithm,
    f: impl Fn(&DVector<f64>) -> f64,
    draws: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau2 = alg.tau2(c2);
    let c = c2.sqrt();
    let xn2 = x.norm_squared();
    let (mut s, mut s2) = (0.0, 0.0);
    let mut y = center.clone();
    for _ in 0..draws {
        for k in 0..x.len() {
            y[k] = center[k] + c * rng.sample::<f64, _>(StandardNormal);
        }
        let v = (-0.5 * tau2 * (y.norm_squared() - xn2)).min(0.0).exp() * f(&y);
        s += v;
        s2 += v * v;
    }
    let n = draws as f64;
    let mean = s / n;
    (mean, ((s2 / n - mean * mean) / n).sqrt())
}

#[test]
fn g0_basic_values() {
    let p = G0Params::table(Algorithm::Rwm);
    assert_eq!(g0_eval(&p, &DVector::zeros(3)), 0.0);
    let v = g0_eval(&p, &DVector::from_vec(vec![1.0, 0.0]));
    assert!((v - 4.020_303_392_611_516_5).abs() < 1e-12, "{v}");
}

#[test]
fn terms_sum_to_g0() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for alg in [Algorithm::Rwm, Algorithm::Mala] {
        let p = G0Params::table(alg);
        for d in [1, 2, 5] {
            let terms = g0_as_terms(&p, d);
            let red = g0_reduced_terms(&p);
            for _ in 0..100 {
                let x = randn(d, &mut rng) * 2.0;
                let direct = g0_eval(&p, &x);
                let sum: f64 = terms.iter().map(|t| t.eval(&x)).sum();
                let rsum: f64 = red.iter().map(|t| t.eval(x[0], x.norm_squared())).sum();
                assert!((direct - sum).abs() < 1e-10, "{direct} vs {sum}");
                assert!((direct - rsum).abs() < 1e-10);
                let mut neg = x.clone();
                neg[0] = -neg[0];
                let nsum: f64 = terms.iter().map(|t| t.eval(&neg)).sum();
                assert!((nsum + sum).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn one_dimensional_form() {
    let p = G0Params::table(Algorithm::Mala);
    for i in -20..=20 {
        let x = i as f64 * 0.25;
        let direct = p.b0 * ((p.b1 * x).exp() - (-p.b1 * x).exp()) * (-p.b2 * x * x).exp()
            + p.c0 * ((-p.c1 * (x - p.c2).powi(2)).exp() - (-p.c1 * (x + p.c2).powi(2)).exp());
        let v = g0_eval(&p, &DVector::from_element(1, x));
        assert!((v - direct).abs() < 1e-12 * (1.0 + direct.abs()));
    }
}

#[test]
fn g0_symmetries_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for alg in [Algorithm::Rwm, Algorithm::Mala] {
        let p = G0Params::table(alg);
        for _ in 0..200 {
            let d = rng.random_range(2..8);
            let x = randn(d, &mut rng) * 2.5;
            let v = g0_eval(&p, &x);
            let mut odd = x.clone();
            odd[0] = -odd[0];
            assert_eq!(g0_eval(&p, &odd), -v);
            let k = rng.random_range(1..d);
            let mut even = x.clone();
            even[k] = -even[k];
            assert!((g0_eval(&p, &even) - v).abs() <= 1e-12 * (1.0 + v.abs()));
            let mut perm = x.clone();
            let tail = perm.as_mut_slice();
            tail[1..].reverse();
            assert!((g0_eval(&p, &perm) - v).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }
}

#[test]
fn acceptance_expectation_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut k = 0;
    for alg in [Algorithm::Rwm, Algorithm::Mala] {
        for d in [1, 2, 10] {
            for _ in 0..2 {
                k += 1;
                let c2 = rng.random_range(0.2..2.0) * if alg == Algorithm::Rwm { 2.38f64.powi(2) / d as f64 } else { 1.0 };
                let c2 = if alg == Algorithm::Mala { c2.min(1.6) } else { c2 };
                let x = randn(d, &mut rng) * 1.5;
                let a = analytic_a(&x, c2, alg).unwrap();
                let center = &x * alg.drift_factor(c2);
                let (m, se) = mc_oracle(&x, &center, c2, alg, |_| 1.0, 1_000_000, 100 + k);
                assert!((a - m).abs() < 3.0 * se + 1e-12, "{alg} d={d} c2={c2}: {a} vs {m} +- {se}");
            }
        }
    }
}

#[test]
fn acceptance_limits() {
    // far in the tail: matches the oracle, and tends to one as the step shrinks
    let x = DVector::from_vec(vec![6.0, 0.0]);
    let a = analytic_a(&x, 0.05, Algorithm::Rwm).unwrap();
    let (m, se) = mc_oracle(&x, &x, 0.05, Algorithm::Rwm, |_| 1.0, 1_000_000, 11);
    assert!((a - m).abs() < 3.0 * se);
    let mut prev = a;
    for c2 in [1e-2, 1e-3, 1e-4, 1e-5] {
        let a = analytic_a(&x, c2, Algorithm::Rwm).unwrap();
        assert!(a > prev);
        prev = a;
    }
    assert!(prev > 0.99, "{prev}");
    let a = analytic_a(&DVector::from_vec(vec![0.5, 0.2]), 1e-5, Algorithm::Mala).unwrap();
    assert!((a - 1.0).abs() < 1e-6, "{a}");
    assert!(analytic_a(&x, 0.0, Algorithm::Rwm).is_err());
}

#[test]
fn ag_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut k = 0;
    for alg in [Algorithm::Rwm, Algorithm::Mala] {
        let p = G0Params::table(alg);
        for d in [1, 2, 10] {
            for _ in 0..2 {
                k += 1;
                let c2 = match alg {
                    Algorithm::Rwm => 2.38f64.powi(2) / d as f64,
                    Algorithm::Mala => 1.65f64.powi(2) * (d as f64).powf(-1.0 / 3.0),
                };
                let x = randn(d, &mut rng) * 1.5;
                let ag = analytic_ag(&x, &p, c2, alg, None).unwrap();
                let center = &x * alg.drift_factor(c2);
                let (m, se) = mc_oracle(&x, &center, c2, alg, |y| g0_eval(&p, y), 1_000_000, 200 + k);
                assert!((ag - m).abs() < 3.0 * se, "{alg} d={d}: {ag} vs {m} +- {se}");
            }
        }
    }
}

#[test]
fn ag_with_drift_override_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = G0Params::table(Algorithm::Mala);
    for (k, d) in [1usize, 3, 10].into_iter().enumerate() {
        let c2 = 0.8;
        let x = randn(d, &mut rng);
        let drift = &x * 0.4 + randn(d, &mut rng) * 0.3;
        let ag = analytic_ag(&x, &p, c2, Algorithm::Mala, Some(&drift)).unwrap();
        let a = analytic_a_centered(&x, &drift, c2, Algorithm::Mala).unwrap();
        let (m, se) = mc_oracle(&x, &drift, c2, Algorithm::Mala, |y| g0_eval(&p, y), 1_000_000, 300 + k as u64);
        assert!((ag - m).abs() < 3.0 * se, "d={d}: {ag} vs {m} +- {se}");
        let (ma, sea) = mc_oracle(&x, &drift, c2, Algorithm::Mala, |_| 1.0, 1_000_000, 400 + k as u64);
        assert!((a - ma).abs() < 3.0 * sea + 1e-12);
    }
    assert!(analytic_ag(&DVector::zeros(2), &p, 0.5, Algorithm::Rwm, Some(&DVector::zeros(2))).is_err());
}

/// The shifted-Gaussian mean needs `beta + 2 gamma delta`; dropping the
/// factor two is visibly wrong against the oracle.
#[test]
fn oracle_rejects_single_gamma_delta() {
    let p = G0Params::table(Algorithm::Rwm);
    let (d, c2) = (2, 2.38f64.powi(2) / 2.0);
    let x = DVector::from_vec(vec![1.2, -0.4]);
    let (m, se) = mc_oracle(&x, &x, c2, Algorithm::Rwm, |y| g0_eval(&p, y), 1_000_000, 7);
    let wrong: f64 = g0_reduced_terms(&p)
        .iter()
        .map(|t| {
            let k = 1.0 + 2.0 * c2 * t.gamma;
            let s2 = c2 / k;
            let b = t.beta1 + t.gamma * t.delta1;
            let mn2 = (x.norm_squared() + 2.0 * c2 * b * x[0] + c2 * c2 * b * b) / (k * k);
            let ln_a = -0.5 * d as f64 * k.ln() + 0.5 * mn2 / s2 - 0.5 * x.norm_squared() / c2
                - t.gamma * t.delta1 * t.delta1;
            let dist = NcChiSq::new(d as u32, mn2 / s2).unwrap();
            t.w * ln_a.exp() * tilted_tail_expectation(&dist, x.norm_squared() / s2, 0.5 * s2).unwrap()
        })
        .sum();
    assert!((wrong - m).abs() > 10.0 * se);
    let right = analytic_ag(&x, &p, c2, Algorithm::Rwm, None).unwrap();
    assert!((right - m).abs() < 3.0 * se);
}

#[test]
fn ag_trivial_cases() {
    let zero = G0Params {
        b0: 0.0,
        c0: 0.0,
        ..G0Params::table(Algorithm::Rwm)
    };
    let x = DVector::from_vec(vec![0.3, 1.0]);
    assert_eq!(analytic_ag(&x, &zero, 1.0, Algorithm::Rwm, None).unwrap(), 0.0);
    let p = G0Params::table(Algorithm::Rwm);
    assert_eq!(analytic_ag(&DVector::zeros(3), &p, 1.0, Algorithm::Rwm, None).unwrap(), 0.0);
    // b2 = 0 keeps the integrals finite
    let flat = G0Params { b2: 0.0, ..p };
    assert!(analytic_ag(&x, &flat, 1.0, Algorithm::Rwm, None).unwrap().is_finite());
}

#[test]
fn general_terms_agree_with_reduced_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = 3;
    let x = randn(d, &mut rng);
    let c2 = 0.9;
    // off-axis term through the vector route, checked against Monte Carlo
    let t = ExpFamilyTerm {
        w: 1.3,
        beta: DVector::from_vec(vec![0.2, -0.5, 0.1]),
        gamma: 0.3,
        delta: DVector::from_vec(vec![0.4, 0.0, -0.7]),
    };
    let v = analytic_ag_terms(&x, std::slice::from_ref(&t), c2, Algorithm::Rwm, None).unwrap();
    let (m, se) = mc_oracle(&x, &x, c2, Algorithm::Rwm, |y| t.eval(y), 1_000_000, 8);
    assert!((v - m).abs() < 3.0 * se, "{v} vs {m} +- {se}");
}

#[test]
fn theta_guards_and_perfect_control_variate() {
    let f = vec![1.0, 2.0, 3.0, 4.0];
    let z = vec![0.0; 4];
    let th = theta_hat(&f, &z, &z).unwrap();
    assert!(th.fallback);
    assert_eq!(th.theta, 0.0);
    assert!(theta_hat(&f[..1], &z[..1], &z[..1]).is_err());

    // PG = 0 and F = G with mean exactly zero, G_0 = 0: theta = 1 and the
    // corrected estimate is exactly zero for every series
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let mut g: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        g[0] = 0.0;
        let half: Vec<f64> = g[1..100].to_vec();
        for (k, v) in half.iter().enumerate() {
            g[100 + k] = -v;
        }
        g[199] = 0.0;
        let pg = vec![0.0; g.len()];
        let th = theta_hat(&g, &g, &pg).unwrap();
        // numerator is mean(G^2), denominator (1/n) sum_{i>=1} G_i^2
        assert!((th.theta - 1.0).abs() < 1e-12, "{}", th.theta);
        let corr: f64 = g.iter().sum::<f64>() / g.len() as f64;
        assert!((corr - th.theta * corr).abs() < 1e-15);
    }
}

fn std_gauss_chain(alg: Algorithm, d: usize, n: usize, seed: u64) -> (ChainTrace, GaussianApprox) {
    let target = GaussianTarget::standard(d);
    let approx = build_approx(DVector::zeros(d), DMatrix::identity(d, d)).unwrap();
    let spec = ProposalSpec::default_for(alg, d);
    (run_chain(&target, &approx, &spec, n, 2000, seed).unwrap(), approx)
}

use crate::samplers::ChainTrace;

#[test]
fn zero_theta_gives_plain_mean() {
    let (tr, approx) = std_gauss_chain(Algorithm::Rwm, 2, 2000, 1);
    let p = G0Params::table(Algorithm::Rwm);
    let opts = CvOptions {
        theta_override: Some(0.0),
        ..Default::default()
    };
    let reps = estimate_with(&tr, &approx, &p, &[0, 1], &opts).unwrap();
    for r in reps {
        let plain = tr.coordinate(r.coord).iter().sum::<f64>() / tr.len() as f64;
        assert_eq!(r.cv_mean, plain);
        assert_eq!(r.plain_mean, plain);
    }
}

#[test]
fn theta_in_expected_range_and_estimate_is_close() {
    let (tr, approx) = std_gauss_chain(Algorithm::Rwm, 2, 10_000, 2);
    let reps = estimate(&tr, &approx, &G0Params::table(Algorithm::Rwm), &[0, 1]).unwrap();
    for r in &reps {
        assert!((0.5..=1.5).contains(&r.theta), "theta {}", r.theta);
        assert!(r.cv_mean.abs() < r.plain_mean.abs().max(0.02));
    }
}

#[test]
fn constant_shift_leaves_estimate_unchanged() {
    for alg in [Algorithm::Rwm, Algorithm::Mala] {
        let (tr, approx) = std_gauss_chain(alg, 3, 3000, 3);
        let p = G0Params::table(alg);
        let base = estimate(&tr, &approx, &p, &[0, 2]).unwrap();
        let opts = CvOptions {
            extra_terms: vec![ReducedTerm::constant(5.0)],
            ..Default::default()
        };
        let shifted = estimate_with(&tr, &approx, &p, &[0, 2], &opts).unwrap();
        for (a, b) in base.iter().zip(&shifted) {
            assert!((a.cv_mean - b.cv_mean).abs() < 1e-10, "{alg}: {} vs {}", a.cv_mean, b.cv_mean);
        }
    }
}

#[test]
fn pg_hat_single_row_algebra() {
    // a rejected row whose proposal mirrors the state in coordinate 2, so
    // G(y) = G(x): both the stochastic term and h vanish and PG - G = E_q[h]
    let approx = build_approx(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
    let x = DVector::from_vec(vec![0.7, 0.4]);
    let y = DVector::from_vec(vec![0.7, -0.4]);
    let c2 = 2.38f64.powi(2) / 2.0;
    let tr = ChainTrace {
        kind: Algorithm::Rwm,
        step2: c2,
        states: vec![x.clone(), x.clone()],
        proposals: vec![y.clone(), y],
        accept_prob: vec![0.0, 0.0],
        accepted: vec![false, false],
        grad_at_state: None,
        grad_at_proposal: None,
        final_state: x.clone(),
        non_finite: 0,
        adapt_history: vec![],
    };
    let p = G0Params::table(Algorithm::Rwm);
    let pg = pg_hat(&tr, 0, &approx, 0, &p).unwrap();
    let g = g0_eval(&p, &x);
    let eq_h = analytic_ag(&x, &p, c2, Algorithm::Rwm, None).unwrap() - analytic_a(&x, c2, Algorithm::Rwm).unwrap() * g;
    assert!((pg - g - eq_h).abs() < 1e-12);
}

#[test]
fn correction_has_mean_zero() {
    let (tr, approx) = std_gauss_chain(Algorithm::Rwm, 2, 100_000, 4);
    let opts = CvOptions {
        keep_series: true,
        ..Default::default()
    };
    let reps = estimate_with(&tr, &approx, &G0Params::table(Algorithm::Rwm), &[0], &opts).unwrap();
    let s = reps[0].series.as_ref().unwrap();
    let corr: Vec<f64> = s.g.iter().zip(&s.pg).map(|(a, b)| a - b).collect();
    // batch-means standard error
    let b = 100;
    let per = corr.len() / b;
    let means: Vec<f64> = corr.chunks(per).take(b).map(|c| c.iter().sum::<f64>() / per as f64).collect();
    let mu = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (b - 1) as f64;
    let se = (var / b as f64).sqrt();
    assert!(mu.abs() < 5.0 * se, "{mu} vs se {se}");
}

#[test]
fn table_parameters_nearly_solve_poisson_equation() {
    for alg in [Algorithm::Rwm, Algorithm::Mala] {
        let (tr, _) = std_gauss_chain(alg, 2, 20_000, 5);
        let p = G0Params::table(alg);
        let loss: f64 = tr
            .states
            .iter()
            .map(|x| {
                let pg = analytic_pg0(x, &p, tr.step2).unwrap();
                (g0_eval(&p, x) - pg - x[0]).powi(2)
            })
            .sum::<f64>()
            / tr.len() as f64;
        // relative to Var(x_1) = 1 on the standard Gaussian
        assert!(loss < 0.05, "{alg}: loss {loss}");
    }
}

#[test]
fn running_series_ends_at_report() {
    let (tr, approx) = std_gauss_chain(Algorithm::Mala, 3, 3000, 8);
    let opts = CvOptions {
        keep_series: true,
        ..Default::default()
    };
    let reps = estimate_with(&tr, &approx, &G0Params::table(Algorithm::Mala), &[0, 2], &opts).unwrap();
    for r in &reps {
        let (plain, cv) = r.series.as_ref().unwrap().running(None);
        assert_eq!(plain.len(), tr.len());
        assert_eq!(plain[0], tr.states[0][r.coord]);
        assert_eq!(cv[0], tr.states[0][r.coord]);
        assert_eq!(*plain.last().unwrap(), r.plain_mean);
        assert_eq!(*cv.last().unwrap(), r.cv_mean);
    }
}
