//! Approximate Poisson-equation solutions for RWM and MALA on a standard
//! Gaussian, their closed-form one-step expectations, and the control
//! variate estimator built from them.
//!
//! `G0` is a sum of terms `w exp(beta^T x - gamma |x - delta|^2)`. Under a
//! proposal `y ~ N(center, c^2 I)` each term times the Gaussian acceptance
//! kernel `min(1, exp(-tau^2 (|y|^2 - |x|^2) / 2))` integrates to
//! `A_k E[min(1, exp(-(tau^2 s_k^2 / 2)(f - |x|^2 / s_k^2)))]` with
//! `f ~ chi^2_d(|m_k|^2 / s_k^2)`, where
//!
//! ```text
//! s_k^2 = c^2 / (1 + 2 c^2 gamma_k)
//! m_k   = (center + c^2 (beta_k + 2 gamma_k delta_k)) / (1 + 2 c^2 gamma_k)
//! A_k   = (1 + 2 c^2 gamma_k)^{-d/2}
//!         exp(|m_k|^2 / (2 s_k^2) - |center|^2 / (2 c^2) - gamma_k |delta_k|^2)
//! ```
//!
//! The acceptance probability itself is the `w = 1, beta = gamma = delta = 0`
//! case. All terms used here have `beta` and `delta` along the first axis,
//! so everything depends on a point only through its first coordinate and
//! squared norm; the `*_reduced` functions work on that pair directly.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::samplers::Algorithm;
use crate::special_fns::{tilted_tail_expectation, NcChiSq};
use crate::{Error, Result};

mod estimator;

pub use estimator::{
    estimate, estimate_with, pg_hat, theta_hat, CvOptions, CvReport, CvSeries, ThetaEstimate,
};

/// The six scalars of the approximate Poisson solution for one algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct G0Params {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub algorithm: Algorithm,
}

impl G0Params {
    /// Published values, fitted on a two-dimensional standard Gaussian.
    pub fn table(algorithm: Algorithm) -> Self {
        match algorithm {
            Algorithm::Rwm => Self {
                b0: 8.7078,
                b1: 0.2916,
                b2: 0.0001,
                c0: -3.5619,
                c1: 0.1131,
                c2: 3.9162,
                algorithm,
            },
            Algorithm::Mala => Self {
                b0: 7.6639,
                b1: 0.0613,
                b2: 0.0096,
                c0: -14.8086,
                c1: 0.3431,
                c2: -0.0647,
                algorithm,
            },
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.b0, self.b1, self.b2, self.c0, self.c1, self.c2]
    }

    pub fn from_array(p: [f64; 6], algorithm: Algorithm) -> Self {
        Self {
            b0: p[0],
            b1: p[1],
            b2: p[2],
            c0: p[3],
            c1: p[4],
            c2: p[5],
            algorithm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("G0 parameters must be finite".into()));
        }
        if !(self.b2 >= 0.0) || !(self.c1 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "G0 needs b2 >= 0 and c1 > 0, got b2={}, c1={}",
                self.b2, self.c1
            )));
        }
        Ok(())
    }
}

/// `w exp(beta^T x - gamma (x - delta)^T (x - delta))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpFamilyTerm {
    pub w: f64,
    pub beta: DVector<f64>,
    pub gamma: f64,
    pub delta: DVector<f64>,
}

impl ExpFamilyTerm {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.delta;
        self.w * (self.beta.dot(x) - self.gamma * diff.norm_squared()).exp()
    }

    fn reduced(&self) -> ReducedTerm {
        ReducedTerm {
            w: self.w,
            beta1: self.beta[0],
            gamma: self.gamma,
            delta1: self.delta[0],
        }
    }

    fn is_axis_aligned(&self) -> bool {
        self.beta.iter().skip(1).all(|&v| v == 0.0) && self.delta.iter().skip(1).all(|&v| v == 0.0)
    }
}

/// A term whose `beta` and `delta` point along the first axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedTerm {
    pub w: f64,
    pub beta1: f64,
    pub gamma: f64,
    pub delta1: f64,
}

impl ReducedTerm {
    pub fn constant(w: f64) -> Self {
        Self {
            w,
            beta1: 0.0,
            gamma: 0.0,
            delta1: 0.0,
        }
    }

    pub fn eval(&self, x1: f64, norm2: f64) -> f64 {
        let q = norm2 - 2.0 * self.delta1 * x1 + self.delta1 * self.delta1;
        self.w * (self.beta1 * x1 - self.gamma * q).exp()
    }
}

fn axis(d: usize, v: f64) -> DVector<f64> {
    let mut e = DVector::zeros(d);
    e[0] = v;
    e
}

/// The four terms whose sum is `G0`.
pub fn g0_as_terms(params: &G0Params, d: usize) -> Vec<ExpFamilyTerm> {
    assert!(d >= 1);
    let zero = DVector::zeros(d);
    vec![
        ExpFamilyTerm {
            w: params.b0,
            beta: axis(d, params.b1),
            gamma: params.b2,
            delta: zero.clone(),
        },
        ExpFamilyTerm {
            w: -params.b0,
            beta: axis(d, -params.b1),
            gamma: params.b2,
            delta: zero.clone(),
        },
        ExpFamilyTerm {
            w: params.c0,
            beta: zero.clone(),
            gamma: params.c1,
            delta: axis(d, params.c2),
        },
        ExpFamilyTerm {
            w: -params.c0,
            beta: zero,
            gamma: params.c1,
            delta: axis(d, -params.c2),
        },
    ]
}

pub fn g0_reduced_terms(params: &G0Params) -> [ReducedTerm; 4] {
    [
        ReducedTerm {
            w: params.b0,
            beta1: params.b1,
            gamma: params.b2,
            delta1: 0.0,
        },
        ReducedTerm {
            w: -params.b0,
            beta1: -params.b1,
            gamma: params.b2,
            delta1: 0.0,
        },
        ReducedTerm {
            w: params.c0,
            beta1: 0.0,
            gamma: params.c1,
            delta1: params.c2,
        },
        ReducedTerm {
            w: -params.c0,
            beta1: 0.0,
            gamma: params.c1,
            delta1: -params.c2,
        },
    ]
}

/// `sinh`, odd to the last bit.
fn odd_sinh(t: f64) -> f64 {
    t.signum() * t.abs().sinh()
}

/// `G0` in the standardized frame, coordinate of interest first.
pub fn g0_eval(params: &G0Params, x: &DVector<f64>) -> f64 {
    g0_reduced(params, x[0], x.norm_squared())
}

/// `2 b0 sinh(b1 x1) e^{-b2 |x|^2} + 2 c0 sinh(2 c1 c2 x1) e^{-c1 (|x|^2 + c2^2)}`.
pub fn g0_reduced(p: &G0Params, x1: f64, norm2: f64) -> f64 {
    2.0 * p.b0 * odd_sinh(p.b1 * x1) * (-p.b2 * norm2).exp()
        + 2.0 * p.c0 * odd_sinh(2.0 * p.c1 * p.c2 * x1) * (-p.c1 * (norm2 + p.c2 * p.c2)).exp()
}

/// Centre of the standardized proposal: `r x` unless a drift is supplied.
fn default_center(x1: f64, norm2: f64, c2: f64, algorithm: Algorithm) -> (f64, f64) {
    let r = algorithm.drift_factor(c2);
    (r * x1, r * r * norm2)
}

/// Proposal centre in reduced form: first coordinate and squared norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Center {
    pub first: f64,
    pub norm2: f64,
}

/// Expected Gaussian-kernel acceptance `E[min(1, exp(-tau^2 (|y|^2 - |x|^2)/2))]`
/// for `y ~ N(center, c^2 I_d)`, `x` given by its squared norm.
pub fn analytic_a_reduced(
    d: usize,
    x_norm2: f64,
    center_norm2: f64,
    c2: f64,
    algorithm: Algorithm,
) -> Result<f64> {
    let dist = NcChiSq::new(d as u32, center_norm2 / c2)?;
    let rate = 0.5 * algorithm.tau2(c2) * c2;
    tilted_tail_expectation(&dist, x_norm2 / c2, rate)
}

/// `E[min(1, r~(x, y)) sum_k term_k(y)]` for `y ~ N(center, c^2 I_d)`.
pub fn analytic_ag_reduced(
    d: usize,
    x_norm2: f64,
    center: Center,
    terms: &[ReducedTerm],
    c2: f64,
    algorithm: Algorithm,
) -> Result<f64> {
    let tau2 = algorithm.tau2(c2);
    let df = d as f64;
    let mut total = 0.0;
    for t in terms {
        if t.w == 0.0 {
            continue;
        }
        let k = 1.0 + 2.0 * c2 * t.gamma;
        let s2 = c2 / k;
        let b = t.beta1 + 2.0 * t.gamma * t.delta1;
        // |center + c2 b e_1|^2 / k^2
        let m_norm2 = ((center.norm2 + 2.0 * c2 * b * center.first + c2 * c2 * b * b) / (k * k)).max(0.0);
        let ln_a = -0.5 * df * k.ln() + 0.5 * m_norm2 / s2
            - 0.5 * center.norm2 / c2
            - t.gamma * t.delta1 * t.delta1;
        let dist = NcChiSq::new(d as u32, m_norm2 / s2)?;
        let tail = tilted_tail_expectation(&dist, x_norm2 / s2, 0.5 * tau2 * s2)?;
        total += t.w * ln_a.exp() * tail;
    }
    Ok(total)
}

fn vector_center(x: &DVector<f64>, c2: f64, algorithm: Algorithm, drift: Option<&DVector<f64>>) -> Result<DVector<f64>> {
    match drift {
        Some(k) => {
            if algorithm != Algorithm::Mala {
                return Err(Error::InvalidParameter(
                    "a drift override only applies to MALA".into(),
                ));
            }
            if k.len() != x.len() {
                return Err(Error::DimensionMismatch {
                    expected: x.len(),
                    got: k.len(),
                });
            }
            Ok(k.clone())
        }
        None => Ok(x * algorithm.drift_factor(c2)),
    }
}

/// Expected acceptance under the Gaussian approximation for a standardized
/// point `x`, with proposal `N(r x, c^2 I)`.
pub fn analytic_a(x: &DVector<f64>, c2: f64, algorithm: Algorithm) -> Result<f64> {
    check_step(c2)?;
    let (_, cn2) = default_center(x[0], x.norm_squared(), c2, algorithm);
    analytic_a_reduced(x.len(), x.norm_squared(), cn2, c2, algorithm)
}

/// As [`analytic_a`] with an explicit proposal centre.
pub fn analytic_a_centered(x: &DVector<f64>, center: &DVector<f64>, c2: f64, algorithm: Algorithm) -> Result<f64> {
    check_step(c2)?;
    analytic_a_reduced(x.len(), x.norm_squared(), center.norm_squared(), c2, algorithm)
}

fn check_step(c2: f64) -> Result<()> {
    if !(c2 > 0.0) || !c2.is_finite() {
        return Err(Error::InvalidParameter(format!("c^2 must be positive, got {c2}")));
    }
    Ok(())
}

/// `E[min(1, r~(x, y)) G0(y)]` for `y ~ N(center, c^2 I)`, the centre being
/// `r x` or, for MALA, the supplied drift `k(x)`.
pub fn analytic_ag(
    x: &DVector<f64>,
    params: &G0Params,
    c2: f64,
    algorithm: Algorithm,
    drift_override: Option<&DVector<f64>>,
) -> Result<f64> {
    let terms = g0_as_terms(params, x.len());
    analytic_ag_terms(x, &terms, c2, algorithm, drift_override)
}

/// [`analytic_ag`] for an arbitrary list of terms. Terms with `beta` or
/// `delta` off the first axis are handled through the full vectors.
pub fn analytic_ag_terms(
    x: &DVector<f64>,
    terms: &[ExpFamilyTerm],
    c2: f64,
    algorithm: Algorithm,
    drift_override: Option<&DVector<f64>>,
) -> Result<f64> {
    check_step(c2)?;
    let center = vector_center(x, c2, algorithm, drift_override)?;
    let d = x.len();
    let xn2 = x.norm_squared();
    let tau2 = algorithm.tau2(c2);
    let mut total = 0.0;
    for t in terms {
        if t.is_axis_aligned() {
            total += analytic_ag_reduced(
                d,
                xn2,
                Center {
                    first: center[0],
                    norm2: center.norm_squared(),
                },
                &[t.reduced()],
                c2,
                algorithm,
            )?;
            continue;
        }
        let k = 1.0 + 2.0 * c2 * t.gamma;
        let s2 = c2 / k;
        let m = (&center + (&t.beta + &t.delta * (2.0 * t.gamma)) * c2) / k;
        let mn2 = m.norm_squared();
        let ln_a = -0.5 * d as f64 * k.ln() + 0.5 * mn2 / s2
            - 0.5 * center.norm_squared() / c2
            - t.gamma * t.delta.norm_squared();
        let dist = NcChiSq::new(d as u32, mn2 / s2)?;
        total += t.w * ln_a.exp() * tilted_tail_expectation(&dist, xn2 / s2, 0.5 * tau2 * s2)?;
    }
    Ok(total)
}

/// `P G0(x) = G0(x) (1 - a(x)) + a_g(x)` on the standard Gaussian target.
pub fn analytic_pg0(x: &DVector<f64>, params: &G0Params, c2: f64) -> Result<f64> {
    let (x1, n2) = (x[0], x.norm_squared());
    analytic_pg0_reduced(x.len(), x1, n2, params, c2)
}

pub fn analytic_pg0_reduced(d: usize, x1: f64, norm2: f64, params: &G0Params, c2: f64) -> Result<f64> {
    let alg = params.algorithm;
    let (cf, cn2) = default_center(x1, norm2, c2, alg);
    let a = analytic_a_reduced(d, norm2, cn2, c2, alg)?;
    let ag = analytic_ag_reduced(
        d,
        norm2,
        Center { first: cf, norm2: cn2 },
        &g0_reduced_terms(params),
        c2,
        alg,
    )?;
    Ok(g0_reduced(params, x1, norm2) * (1.0 - a) + ag)
}

#[cfg(test)]
mod tests;
