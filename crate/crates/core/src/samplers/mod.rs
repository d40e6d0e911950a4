//! Random-walk Metropolis and MALA with proposal covariance `c^2 Sigma`,
//! where `Sigma` comes from a [`GaussianApprox`], plus step-size adaptation
//! during burn-in and a full record of every transition.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::gaussian_approx::GaussianApprox;
use crate::targets::TargetModel;
use crate::{Error, Result};

mod io;

pub use io::{read_trace, read_trace_csv, write_trace, write_trace_csv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Rwm,
    Mala,
}

impl Algorithm {
    /// Shrinkage of the standardized proposal mean towards the origin.
    pub fn drift_factor(self, c2: f64) -> f64 {
        match self {
            Algorithm::Rwm => 1.0,
            Algorithm::Mala => 1.0 - 0.5 * c2,
        }
    }

    /// Scale of the Gaussian-approximation acceptance exponent.
    pub fn tau2(self, c2: f64) -> f64 {
        match self {
            Algorithm::Rwm => 1.0,
            Algorithm::Mala => 0.25 * c2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Rwm => "rwm",
            Algorithm::Mala => "mala",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rwm" => Ok(Algorithm::Rwm),
            "mala" => Ok(Algorithm::Mala),
            _ => Err(Error::InvalidParameter(format!("unknown algorithm {s:?}"))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptSpec {
    pub band: (f64, f64),
    pub window: usize,
    /// The `k`-th window uses gain `k^{-decay}`; zero gives a constant gain.
    pub decay: f64,
}

impl Default for AdaptSpec {
    fn default() -> Self {
        Self {
            band: (0.55, 0.60),
            window: 200,
            decay: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalSpec {
    pub kind: Algorithm,
    pub step2: f64,
    pub adapt: Option<AdaptSpec>,
}

impl ProposalSpec {
    /// `c^2 = 2.38^2 / d`, fixed.
    pub fn rwm(d: usize) -> Self {
        Self {
            kind: Algorithm::Rwm,
            step2: 2.38f64.powi(2) / d as f64,
            adapt: None,
        }
    }

    /// Started at `c^2 = 1.65^2 d^{-1/3}` and tuned towards 55-60% acceptance.
    pub fn mala(d: usize) -> Self {
        Self {
            kind: Algorithm::Mala,
            step2: 1.65f64.powi(2) * (d as f64).powf(-1.0 / 3.0),
            adapt: Some(AdaptSpec::default()),
        }
    }

    pub fn default_for(kind: Algorithm, d: usize) -> Self {
        match kind {
            Algorithm::Rwm => Self::rwm(d),
            Algorithm::Mala => Self::mala(d),
        }
    }
}

/// `c^2 exp(a - mid(band))`.
pub fn adapt_step(step2: f64, acceptance: f64, band: (f64, f64)) -> f64 {
    adapt_step_with_gain(step2, acceptance, band, 1.0)
}

pub fn adapt_step_with_gain(step2: f64, acceptance: f64, band: (f64, f64), gain: f64) -> f64 {
    step2 * (gain * (acceptance - 0.5 * (band.0 + band.1))).exp()
}

/// Post-burn-in record of a chain. Row `i` is the transition from
/// `states[i]` with proposal `proposals[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub kind: Algorithm,
    pub step2: f64,
    pub states: Vec<DVector<f64>>,
    pub proposals: Vec<DVector<f64>>,
    pub accept_prob: Vec<f64>,
    pub accepted: Vec<bool>,
    /// Target gradients at the states and proposals (MALA only).
    pub grad_at_state: Option<Vec<DVector<f64>>>,
    pub grad_at_proposal: Option<Vec<DVector<f64>>>,
    /// State after the last recorded transition.
    pub final_state: DVector<f64>,
    /// Proposals whose log-density was not finite (post-burn-in).
    pub non_finite: usize,
    /// `c^2` after each adaptation window.
    pub adapt_history: Vec<f64>,
}

impl ChainTrace {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.final_state.len()
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.accepted.iter().filter(|&&a| a).count() as f64 / self.len().max(1) as f64
    }

    /// Coordinate `j` of every state.
    pub fn coordinate(&self, j: usize) -> Vec<f64> {
        self.states.iter().map(|x| x[j]).collect()
    }
}

struct Point {
    x: DVector<f64>,
    lp: f64,
    grad: Option<DVector<f64>>,
}

struct Kernel<'a, T: ?Sized> {
    target: &'a T,
    approx: &'a GaussianApprox,
    kind: Algorithm,
}

struct Step {
    y: DVector<f64>,
    lp: f64,
    grad: Option<DVector<f64>>,
    alpha: f64,
}

impl<T: TargetModel + ?Sized> Kernel<'_, T> {
    fn evaluate(&self, x: DVector<f64>) -> Point {
        match self.kind {
            Algorithm::Rwm => Point {
                lp: self.target.log_density(&x),
                x,
                grad: None,
            },
            Algorithm::Mala => {
                let (lp, grad) = self.target.log_density_and_grad(&x);
                Point { x, lp, grad }
            }
        }
    }

    fn propose(&self, cur: &Point, c2: f64, rng: &mut ChaCha8Rng) -> Step {
        let d = cur.x.len();
        let c = c2.sqrt();
        let z = DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal));
        let l = self.approx.chol_base();
        let mut y = &cur.x + (l * &z) * c;
        if let Algorithm::Mala = self.kind {
            let g = cur.grad.as_ref().expect("MALA state carries a gradient");
            y += (self.approx.cov() * g) * (0.5 * c2);
        }
        let prop = self.evaluate(y);
        let log_ratio = match self.kind {
            Algorithm::Rwm => prop.lp - cur.lp,
            Algorithm::Mala => {
                let (gx, gy) = (cur.grad.as_ref().unwrap(), prop.grad.as_ref());
                match gy {
                    Some(gy) if gy.iter().all(|v| v.is_finite()) => {
                        // L^{-1} (x - y - (c2/2) Sigma g(y)) = -(c z + (c2/2) L^T (g(x) + g(y)))
                        let u = l.tr_mul(&(gx + gy));
                        let back = (&z * c + u * (0.5 * c2)).norm_squared();
                        prop.lp - cur.lp - back / (2.0 * c2) + 0.5 * z.norm_squared()
                    }
                    _ => f64::NAN,
                }
            }
        };
        let alpha = if prop.lp.is_finite() && log_ratio.is_finite() {
            log_ratio.min(0.0).exp()
        } else {
            0.0
        };
        Step {
            y: prop.x,
            lp: prop.lp,
            grad: prop.grad,
            alpha,
        }
    }
}

/// Runs `burn_in + n` iterations from the approximation mean and records
/// the last `n`.
pub fn run_chain<T: TargetModel + ?Sized>(
    target: &T,
    approx: &GaussianApprox,
    spec: &ProposalSpec,
    n: usize,
    burn_in: usize,
    seed: u64,
) -> Result<ChainTrace> {
    run_chain_from(target, approx, spec, n, burn_in, seed, approx.mean().clone())
}

pub fn run_chain_from<T: TargetModel + ?Sized>(
    target: &T,
    approx: &GaussianApprox,
    spec: &ProposalSpec,
    n: usize,
    burn_in: usize,
    seed: u64,
    start: DVector<f64>,
) -> Result<ChainTrace> {
    let d = approx.dim();
    if target.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: target.dim(),
        });
    }
    if start.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: start.len(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidParameter("chain length must be positive".into()));
    }
    if !(spec.step2 > 0.0) || !spec.step2.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "step size c^2 must be positive, got {}",
            spec.step2
        )));
    }
    if let Some(a) = spec.adapt {
        if a.window == 0 || !(a.band.0 <= a.band.1) {
            return Err(Error::InvalidParameter("invalid adaptation settings".into()));
        }
    }

    let kernel = Kernel {
        target,
        approx,
        kind: spec.kind,
    };
    let mut cur = kernel.evaluate(start);
    if spec.kind == Algorithm::Mala {
        match &cur.grad {
            Some(g) if g.len() == d => {}
            _ => {
                return Err(Error::InvalidParameter(
                    "MALA needs a target gradient of the chain's dimension".into(),
                ))
            }
        }
    }
    if !cur.lp.is_finite() {
        return Err(Error::InvalidParameter(
            "log-density is not finite at the starting point".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c2 = spec.step2;
    let mut adapt_history = Vec::new();
    let mut window_accepts = 0usize;
    let mut window_len = 0usize;

    for _ in 0..burn_in {
        let step = kernel.propose(&cur, c2, &mut rng);
        let accept = rng.random::<f64>() < step.alpha;
        if accept {
            cur = Point {
                x: step.y,
                lp: step.lp,
                grad: step.grad,
            };
            window_accepts += 1;
        }
        window_len += 1;
        if let Some(a) = spec.adapt {
            if window_len == a.window {
                let rate = window_accepts as f64 / a.window as f64;
                let gain = ((adapt_history.len() + 1) as f64).powf(-a.decay);
                c2 = adapt_step_with_gain(c2, rate, a.band, gain);
                adapt_history.push(c2);
                window_accepts = 0;
                window_len = 0;
            }
        }
    }

    let mala = spec.kind == Algorithm::Mala;
    let mut states = Vec::with_capacity(n);
    let mut proposals = Vec::with_capacity(n);
    let mut accept_prob = Vec::with_capacity(n);
    let mut accepted = Vec::with_capacity(n);
    let mut gx = mala.then(|| Vec::with_capacity(n));
    let mut gy = mala.then(|| Vec::with_capacity(n));
    let mut non_finite = 0;

    for _ in 0..n {
        let step = kernel.propose(&cur, c2, &mut rng);
        if !step.lp.is_finite() {
            non_finite += 1;
        }
        let accept = rng.random::<f64>() < step.alpha;
        states.push(cur.x.clone());
        proposals.push(step.y.clone());
        accept_prob.push(step.alpha);
        accepted.push(accept);
        if let (Some(gx), Some(gy)) = (gx.as_mut(), gy.as_mut()) {
            gx.push(cur.grad.clone().unwrap());
            gy.push(
                step.grad
                    .clone()
                    .unwrap_or_else(|| DVector::from_element(d, f64::NAN)),
            );
        }
        if accept {
            cur = Point {
                x: step.y,
                lp: step.lp,
                grad: step.grad,
            };
        }
    }

    Ok(ChainTrace {
        kind: spec.kind,
        step2: c2,
        states,
        proposals,
        accept_prob,
        accepted,
        grad_at_state: gx,
        grad_at_proposal: gy,
        final_state: cur.x,
        non_finite,
        adapt_history,
    })
}
