//! Refitting the six `G0` parameters by least squares on the Poisson
//! residual `G0(x) - P G0(x) - x_1` along a standard-Gaussian reference
//! chain, using a hand-rolled BFGS with central-difference gradients.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gaussian_approx::GaussianApprox;
use crate::poisson_cv::{analytic_pg0_reduced, g0_reduced, G0Params};
use crate::samplers::{run_chain, Algorithm, ProposalSpec};
use crate::targets::GaussianTarget;
use crate::{Error, Result};

const MAX_RESTARTS: usize = 5;

/// A reference chain reduced to what the loss needs: `(x_1, |x|^2)` per
/// distinct run of states, with the run length (rejections repeat states).
#[derive(Debug, Clone)]
pub struct ReferenceSample {
    pub algorithm: Algorithm,
    pub d: usize,
    pub c2: f64,
    pub points: Vec<(f64, f64)>,
    pub counts: Vec<u32>,
    pub n: usize,
}

impl ReferenceSample {
    pub fn from_states<'a>(
        algorithm: Algorithm,
        c2: f64,
        states: impl IntoIterator<Item = &'a DVector<f64>>,
    ) -> Result<Self> {
        let mut points: Vec<(f64, f64)> = Vec::new();
        let mut counts: Vec<u32> = Vec::new();
        let mut prev: Option<&DVector<f64>> = None;
        let mut d = 0;
        for x in states {
            d = x.len();
            if prev == Some(x) {
                *counts.last_mut().expect("run started") += 1;
            } else {
                points.push((x[0], x.norm_squared()));
                counts.push(1);
            }
            prev = Some(x);
        }
        if points.is_empty() {
            return Err(Error::InvalidParameter("reference sample is empty".into()));
        }
        let n = counts.iter().map(|&c| c as usize).sum();
        Ok(Self { algorithm, d, c2, points, counts, n })
    }
}

/// Draws `n` states of the given sampler on `N(0, I_d)` after `burn_in`
/// steps. With `c2 = None` the default step is used (and, for MALA, tuned
/// during burn-in); otherwise the step is held fixed at `c2`.
pub fn reference_sample(
    algorithm: Algorithm,
    d: usize,
    n: usize,
    burn_in: usize,
    c2: Option<f64>,
    seed: u64,
) -> Result<ReferenceSample> {
    if d == 0 {
        return Err(Error::InvalidParameter("dimension must be positive".into()));
    }
    let target = GaussianTarget::standard(d);
    let approx = GaussianApprox::new(DVector::zeros(d), DMatrix::identity(d, d))?;
    let mut spec = ProposalSpec::default_for(algorithm, d);
    if let Some(c2) = c2 {
        spec.step2 = c2;
        spec.adapt = None;
    }
    let trace = run_chain(&target, &approx, &spec, n, burn_in, seed)?;
    ReferenceSample::from_states(algorithm, trace.step2, &trace.states)
}

/// Mean squared Poisson residual; NaN if any point fails to evaluate.
pub fn g0_loss(sample: &ReferenceSample, params: &G0Params) -> f64 {
    if params.algorithm != sample.algorithm || params.validate().is_err() {
        return f64::NAN;
    }
    let total: Option<f64> = sample
        .points
        .par_iter()
        .zip(&sample.counts)
        .with_min_len(1024)
        .map(|(&(x1, n2), &k)| {
            let pg = analytic_pg0_reduced(sample.d, x1, n2, params, sample.c2).ok()?;
            let g = g0_reduced(params, x1, n2);
            Some(k as f64 * (g - pg - x1).powi(2))
        })
        .sum();
    total.map_or(f64::NAN, |t| t / sample.n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the sup-norm of the gradient falls below this.
    pub grad_tol: f64,
    /// Stop when an accepted step lowers the objective by less than this, relatively.
    pub rel_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            grad_tol: 1e-8,
            rel_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step, starting with the initial value.
    pub history: Vec<f64>,
}

/// Central differences with step `1e-5 (1 + |x_i|)`.
pub fn central_gradient<F: Fn(&DVector<f64>) -> f64>(f: &F, x: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let h = 1e-5 * (1.0 + x[i].abs());
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        g[i] = (up - down) / (2.0 * h);
    }
    g
}

/// Quasi-Newton minimization with an inverse-Hessian BFGS update and
/// Armijo backtracking. Returns `NumericalFailure` if the objective or its
/// gradient stops being finite.
pub fn minimize_bfgs<F: Fn(&DVector<f64>) -> f64>(
    f: F,
    x0: DVector<f64>,
    opts: &BfgsOptions,
) -> Result<BfgsOutcome> {
    let n = x0.len();
    let mut x = x0;
    let mut fx = f(&x);
    let finite = |v: &DVector<f64>| v.iter().all(|e| e.is_finite());
    if !fx.is_finite() {
        return Err(Error::NumericalFailure(format!("objective is {fx} at the start")));
    }
    let mut g = central_gradient(&f, &x);
    if !finite(&g) {
        return Err(Error::NumericalFailure("non-finite gradient at the start".into()));
    }
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    let mut history = vec![fx];

    for iter in 0..opts.max_iter {
        if g.amax() < opts.grad_tol {
            return Ok(BfgsOutcome { x, value: fx, iterations: iter, converged: true, history });
        }
        let mut p = -(&h * &g);
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            // lost positive definiteness; fall back to steepest descent
            h = DMatrix::identity(n, n);
            first = true;
            p = -g.clone();
            slope = -g.norm_squared();
        }
        // a unit step before any curvature is known can be wildly off-scale
        let mut t = if first { (1.0 / g.norm()).min(1.0) } else { 1.0 };
        let (x_new, f_new) = loop {
            let cand = &x + t * &p;
            let fc = f(&cand);
            if fc.is_finite() && fc <= fx + 1e-4 * t * slope {
                break (cand, fc);
            }
            t *= 0.5;
            if t < 1e-20 {
                return Ok(BfgsOutcome { x, value: fx, iterations: iter, converged: true, history });
            }
        };
        let g_new = central_gradient(&f, &x_new);
        if !finite(&g_new) {
            return Err(Error::NumericalFailure(format!("non-finite gradient at iteration {iter}")));
        }
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        let decrease = fx - f_new;
        x = x_new;
        g = g_new;
        let prev = fx;
        fx = f_new;
        history.push(fx);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                // Shanno-Phua scaling of the initial inverse Hessian
                h *= sy / y.norm_squared();
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (rho * rho * yhy + rho) * (&s * s.transpose()) - rho * (&hy * s.transpose() + &s * hy.transpose());
        }
        if decrease <= opts.rel_tol * prev.abs().max(f64::MIN_POSITIVE) {
            return Ok(BfgsOutcome { x, value: fx, iterations: iter + 1, converged: true, history });
        }
    }
    Ok(BfgsOutcome { x, value: fx, iterations: opts.max_iter, converged: false, history })
}

/// Unconstrained coordinates: `(b0, b1, ln b2, c0, ln c1, c2)`.
fn to_free(p: &G0Params) -> DVector<f64> {
    DVector::from_vec(vec![p.b0, p.b1, p.b2.max(1e-300).ln(), p.c0, p.c1.ln(), p.c2])
}

fn from_free(v: &DVector<f64>, algorithm: Algorithm) -> G0Params {
    G0Params::from_array([v[0], v[1], v[2].exp(), v[3], v[4].exp(), v[5]], algorithm)
}

/// Picks the representative with `b1 >= 0`; `(b0, b1) -> (-b0, -b1)` leaves
/// `G0` unchanged.
pub fn normalize_signs(mut p: G0Params) -> G0Params {
    if p.b1 < 0.0 {
        p.b0 = -p.b0;
        p.b1 = -p.b1;
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct G0Fit {
    pub algorithm: Algorithm,
    pub d: usize,
    pub c2: f64,
    pub seed: u64,
    pub n: usize,
    pub loss: f64,
    pub init_loss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restarts: usize,
    pub params: G0Params,
}

impl G0Fit {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let fit: Self = serde_json::from_reader(std::io::BufReader::new(f))?;
        fit.params.validate()?;
        Ok(fit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub n: usize,
    pub burn_in: usize,
    pub bfgs: BfgsOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            n: 100_000,
            burn_in: 10_000,
            bfgs: BfgsOptions::default(),
        }
    }
}

/// Draws a reference chain and fits `G0` on it starting from `init`.
pub fn fit_g0(
    algorithm: Algorithm,
    d: usize,
    c2: Option<f64>,
    seed: u64,
    init: &G0Params,
    opts: &FitOptions,
) -> Result<G0Fit> {
    let sample = reference_sample(algorithm, d, opts.n, opts.burn_in, c2, seed)?;
    fit_g0_on(&sample, seed, init, &opts.bfgs)
}

/// Fits on an existing sample. A divergent run is retried from a perturbed
/// start (up to five times); the result never has a higher loss than `init`.
pub fn fit_g0_on(sample: &ReferenceSample, seed: u64, init: &G0Params, opts: &BfgsOptions) -> Result<G0Fit> {
    if init.algorithm != sample.algorithm {
        return Err(Error::InvalidParameter(format!(
            "initial parameters are for {}, the sample is {}",
            init.algorithm, sample.algorithm
        )));
    }
    init.validate()?;
    let alg = sample.algorithm;
    let objective = |v: &DVector<f64>| g0_loss(sample, &from_free(v, alg));
    let init_loss = g0_loss(sample, init);
    let x0 = to_free(init);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut last_err = None;

    for restart in 0..=MAX_RESTARTS {
        let start = if restart == 0 {
            x0.clone()
        } else {
            x0.map(|v| v + 0.1 * (1.0 + v.abs()) * (rng.random::<f64>() - 0.5))
        };
        match minimize_bfgs(objective, start, opts) {
            Ok(out) => {
                let (params, loss) = if init_loss.is_finite() && !(out.value <= init_loss) {
                    (*init, init_loss)
                } else {
                    (from_free(&out.x, alg), out.value)
                };
                return Ok(G0Fit {
                    algorithm: alg,
                    d: sample.d,
                    c2: sample.c2,
                    seed,
                    n: sample.n,
                    loss,
                    init_loss,
                    iterations: out.iterations,
                    converged: out.converged,
                    restarts: restart,
                    params: normalize_signs(params),
                });
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(Error::NoConvergence(format!(
        "G0 fit diverged after {MAX_RESTARTS} restarts: {}",
        last_err.expect("at least one attempt")
    )))
}
