//! Stochastic volatility posterior in the unconstrained parameterization
//! `x = (m, phi~, s2~, h_0, ..., h_{N-1})` with `phi = tanh(phi~ / 2)`
//! (so `(phi + 1) / 2` is the logistic of `phi~`) and `s^2 = exp(s2~)`.
//!
//! Each latent state carries one observation, `r_t ~ N(0, e^{h_t})`, the
//! first state is stationary, `h_0 ~ N(m, s^2 / (1 - phi^2))`, and the rest
//! follow `h_t = m + phi (h_{t-1} - m) + s eta_t`; the dimension is `N + 3`.
//!
//! The Beta prior on `(phi + 1) / 2` and the Gamma prior on `s^2` are
//! replaced by Gaussians on `phi~` and `s2~` with the same mean and variance
//! as the pushforward of the original priors. The Gaussians are the priors
//! of the transformed parameters, so no Jacobian enters.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::TargetModel;
use crate::{Error, Result};

/// Number of static parameters ahead of the latent path.
pub const SV_STATIC_PARAMS: usize = 3;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvPrior {
    /// Variance of the zero-mean normal prior on `m`.
    pub m_var: f64,
    /// `(phi + 1) / 2 ~ Beta(a, b)`.
    pub phi_beta: (f64, f64),
    /// `s^2 ~ Gamma(shape, rate)`.
    pub s2_gamma: (f64, f64),
}

impl Default for SvPrior {
    fn default() -> Self {
        Self {
            m_var: 10.0,
            phi_beta: (20.0, 0.2),
            s2_gamma: (0.5, 0.5),
        }
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Mean and variance of a density on the line given by its log, by the
/// trapezoid rule on `[lo, hi]`.
fn moments_by_quadrature(log_pdf: impl Fn(f64) -> f64, lo: f64, hi: f64, nodes: usize) -> (f64, f64) {
    let h = (hi - lo) / (nodes - 1) as f64;
    let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for i in 0..nodes {
        let y = lo + h * i as f64;
        let w = if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 };
        let p = w * log_pdf(y).exp();
        m0 += p;
        m1 += p * y;
        m2 += p * y * y;
    }
    let mean = m1 / m0;
    (mean, m2 / m0 - mean * mean)
}

impl SvPrior {
    /// Mean and variance of `logit(u)` for `u ~ Beta(a, b)`.
    pub fn phi_tilde_moments(&self) -> (f64, f64) {
        let (a, b) = self.phi_beta;
        let ln_beta = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
        // density of y = logit(u): u^a (1 - u)^b / B(a, b)
        let log_pdf = |y: f64| -a * softplus(-y) - b * softplus(y) - ln_beta;
        let mode = (a / b).ln();
        moments_by_quadrature(log_pdf, mode - 80.0 / a - 10.0, mode + 80.0 / b + 10.0, 200_001)
    }

    /// Mean and variance of `ln(s^2)` for `s^2 ~ Gamma(shape, rate)`.
    pub fn s2_tilde_moments(&self) -> (f64, f64) {
        let (k, rate) = self.s2_gamma;
        let log_pdf = |y: f64| k * rate.ln() - ln_gamma(k) + k * y - rate * y.exp();
        let mode = (k / rate).ln();
        moments_by_quadrature(log_pdf, mode - 80.0 / k - 10.0, mode + 6.0, 200_001)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvModelSpec {
    pub returns: Vec<f64>,
    pub prior: SvPrior,
}

pub struct SvTarget {
    r2: Vec<f64>,
    m_var: f64,
    phi_mean: f64,
    phi_var: f64,
    s2_mean: f64,
    s2_var: f64,
}

pub fn sv_target(spec: &SvModelSpec) -> Result<SvTarget> {
    if spec.returns.len() < 2 {
        return Err(Error::InvalidParameter(
            "stochastic volatility model needs at least two returns".into(),
        ));
    }
    if spec.returns.iter().any(|r| !r.is_finite()) {
        return Err(Error::InvalidParameter("returns must be finite".into()));
    }
    let (phi_mean, phi_var) = spec.prior.phi_tilde_moments();
    let (s2_mean, s2_var) = spec.prior.s2_tilde_moments();
    Ok(SvTarget {
        r2: spec.returns.iter().map(|r| r * r).collect(),
        m_var: spec.prior.m_var,
        phi_mean,
        phi_var,
        s2_mean,
        s2_var,
    })
}

impl SvTarget {
    pub fn n_obs(&self) -> usize {
        self.r2.len()
    }

    /// Gaussian prior `(mean, variance)` of `phi~` and of `s2~`.
    pub fn transformed_priors(&self) -> ((f64, f64), (f64, f64)) {
        ((self.phi_mean, self.phi_var), (self.s2_mean, self.s2_var))
    }

    /// Value and gradient in one pass.
    fn eval(&self, x: &DVector<f64>, want_grad: bool) -> (f64, Option<DVector<f64>>) {
        let n = self.n_obs();
        assert_eq!(x.len(), n + SV_STATIC_PARAMS);
        let m = x[0];
        let phi = (0.5 * x[1]).tanh();
        let s2 = x[2].exp();
        let inv_s2 = 1.0 / s2;
        let h = x.rows(SV_STATIC_PARAMS, n);
        let one_m_phi2 = (1.0 - phi * phi).max(f64::MIN_POSITIVE);

        let mut lp = -0.5 * m * m / self.m_var
            - 0.5 * (x[1] - self.phi_mean).powi(2) / self.phi_var
            - 0.5 * (x[2] - self.s2_mean).powi(2) / self.s2_var;

        let d0 = h[0] - m;
        lp += -0.5 * (LN_2PI + x[2] - one_m_phi2.ln()) - 0.5 * d0 * d0 * one_m_phi2 * inv_s2;

        let mut quad = d0 * d0 * one_m_phi2;
        let mut g = if want_grad {
            Some(DVector::<f64>::zeros(x.len()))
        } else {
            None
        };
        let (mut gm, mut gphi) = (d0 * one_m_phi2 * inv_s2, d0 * d0 * phi * inv_s2 - phi / one_m_phi2);

        for t in 0..n {
            let e_neg = (-h[t]).exp();
            lp += -0.5 * (LN_2PI + h[t] + self.r2[t] * e_neg);
            if let Some(g) = g.as_mut() {
                g[SV_STATIC_PARAMS + t] += -0.5 + 0.5 * self.r2[t] * e_neg;
            }
            if t == 0 {
                if let Some(g) = g.as_mut() {
                    g[SV_STATIC_PARAMS] -= d0 * one_m_phi2 * inv_s2;
                }
                continue;
            }
            let prev = h[t - 1] - m;
            let e = h[t] - m - phi * prev;
            lp += -0.5 * (LN_2PI + x[2]) - 0.5 * e * e * inv_s2;
            quad += e * e;
            if let Some(g) = g.as_mut() {
                let es = e * inv_s2;
                gm += es * (1.0 - phi);
                gphi += es * prev;
                g[SV_STATIC_PARAMS + t] -= es;
                g[SV_STATIC_PARAMS + t - 1] += phi * es;
            }
        }

        if let Some(g) = g.as_mut() {
            g[0] = gm - m / self.m_var;
            g[1] = gphi * 0.5 * one_m_phi2 - (x[1] - self.phi_mean) / self.phi_var;
            g[2] = -0.5 * n as f64 + 0.5 * quad * inv_s2 - (x[2] - self.s2_mean) / self.s2_var;
        }
        (lp, g)
    }

    /// Mode of the latent path given the static parameters, by Newton on
    /// the (strictly concave) conditional log-density.
    pub fn latent_mode(&self, stat: [f64; 3]) -> Result<DVector<f64>> {
        let n = self.n_obs();
        let lr: Vec<f64> = self.r2.iter().map(|r2| (r2 + 1e-10).ln() + 1.27).collect();
        let mut x = DVector::zeros(n + SV_STATIC_PARAMS);
        x[0] = stat[0];
        x[1] = stat[1];
        x[2] = stat[2];
        for t in 0..n {
            x[SV_STATIC_PARAMS + t] = 0.5 * (lr[t] + stat[0]);
        }
        let (mut lp, _) = self.eval(&x, false);
        for _ in 0..200 {
            let g = self.eval(&x, true).1.unwrap();
            let gh = g.rows(SV_STATIC_PARAMS, n).into_owned();
            let neg_h = self.latent_precision(&x);
            let step = Cholesky::new(neg_h)
                .ok_or_else(|| Error::NumericalFailure("latent precision not PD".into()))?
                .solve(&gh);
            let mut t = 1.0;
            loop {
                let mut cand = x.clone();
                cand.rows_mut(SV_STATIC_PARAMS, n).axpy(t, &step, 1.0);
                let clp = self.eval(&cand, false).0;
                if clp >= lp || t < 1e-8 {
                    x = cand;
                    lp = clp;
                    break;
                }
                t *= 0.5;
            }
            if (step * t).amax() < 1e-10 {
                return Ok(x);
            }
        }
        Err(Error::NoConvergence("latent path mode search".into()))
    }

    /// Negative Hessian of the log-density in the latent block (tridiagonal).
    pub fn latent_precision(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n_obs();
        let phi = (0.5 * x[1]).tanh();
        let inv_s2 = (-x[2]).exp();
        let mut p = DMatrix::zeros(n, n);
        for t in 0..n {
            let h = x[SV_STATIC_PARAMS + t];
            let mut diag = 0.5 * self.r2[t] * (-h).exp();
            diag += if t == 0 { (1.0 - phi * phi) * inv_s2 } else { inv_s2 };
            if t + 1 < n {
                diag += phi * phi * inv_s2;
                p[(t, t + 1)] = -phi * inv_s2;
                p[(t + 1, t)] = -phi * inv_s2;
            }
            p[(t, t)] = diag;
        }
        p
    }

    /// Static parameters at typical values for a persistent, low-noise
    /// volatility process, with the latent path at its conditional mode.
    pub fn initial_point(&self) -> Result<DVector<f64>> {
        let n = self.n_obs() as f64;
        let m = self.r2.iter().map(|r2| (r2 + 1e-10).ln() + 1.27).sum::<f64>() / n;
        self.latent_mode([m, 2.0 * 0.95f64.atanh(), (0.2f64 * 0.2).ln()])
    }

    /// Crude covariance for a first pilot run: the conditional latent
    /// covariance at `x` and independent unit-scale static parameters.
    pub fn initial_cov(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.n_obs();
        let d = n + SV_STATIC_PARAMS;
        let latent = Cholesky::new(self.latent_precision(x))
            .ok_or_else(|| Error::NumericalFailure("latent precision not PD".into()))?
            .inverse();
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..SV_STATIC_PARAMS {
            cov[(i, i)] = 0.1;
        }
        cov.view_mut((SV_STATIC_PARAMS, SV_STATIC_PARAMS), (n, n))
            .copy_from(&latent);
        Ok(cov)
    }
}

impl TargetModel for SvTarget {
    fn dim(&self) -> usize {
        self.n_obs() + SV_STATIC_PARAMS
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        self.eval(x, false).0
    }

    fn grad_log_density(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        self.eval(x, true).1
    }

    fn log_density_and_grad(&self, x: &DVector<f64>) -> (f64, Option<DVector<f64>>) {
        self.eval(x, true)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvSimulation {
    pub r: Vec<f64>,
    pub h: Vec<f64>,
}

/// Simulates `n` returns with a stationary start.
pub fn sv_simulate(n: usize, phi: f64, m: f64, s: f64, seed: u64) -> Result<SvSimulation> {
    if !(phi.abs() < 1.0) || !(s > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need |phi| < 1 and s > 0, got phi={phi}, s={s}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    let sd0 = s / (1.0 - phi * phi).sqrt();
    for t in 0..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        let ht = if t == 0 {
            m + sd0 * z
        } else {
            m + phi * (h[t - 1] - m) + s * z
        };
        let eps: f64 = StandardNormal.sample(&mut rng);
        h.push(ht);
        r.push((0.5 * ht).exp() * eps);
    }
    Ok(SvSimulation { r, h })
}
