//! Target densities for the samplers: Gaussian, two-component Gaussian
//! mixture, Bayesian logistic regression and a stochastic volatility
//! posterior.

use nalgebra::DVector;

mod gaussian;
mod logistic;
mod mixture;
mod sv;

pub use gaussian::{gaussian_target, GaussianTarget};
pub use logistic::{
    logistic_mle_cov, logistic_target, Dataset, LogisticData, LogisticFit, LogisticTarget,
};
pub use mixture::{mixture_cov_draw, mixture_target, GaussMixtureSpec, MixtureTarget};
pub use sv::{
    sv_simulate, sv_target, SvModelSpec, SvPrior, SvSimulation, SvTarget, SV_STATIC_PARAMS,
};

/// A log-density known up to an additive constant.
pub trait TargetModel: Send + Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, x: &DVector<f64>) -> f64;

    /// `None` when the target has no gradient.
    fn grad_log_density(&self, x: &DVector<f64>) -> Option<DVector<f64>>;

    fn log_density_and_grad(&self, x: &DVector<f64>) -> (f64, Option<DVector<f64>>) {
        (self.log_density(x), self.grad_log_density(x))
    }
}

impl<T: TargetModel + ?Sized> TargetModel for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        (**self).log_density(x)
    }
    fn grad_log_density(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        (**self).grad_log_density(x)
    }
    fn log_density_and_grad(&self, x: &DVector<f64>) -> (f64, Option<DVector<f64>>) {
        (**self).log_density_and_grad(x)
    }
}

/// Target defined by a closure, without a gradient.
pub struct LogDensityFn<F> {
    dim: usize,
    f: F,
}

impl<F> LogDensityFn<F>
where
    F: Fn(&DVector<f64>) -> f64 + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> TargetModel for LogDensityFn<F>
where
    F: Fn(&DVector<f64>) -> f64 + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        (self.f)(x)
    }
    fn grad_log_density(&self, _x: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
}

/// Central-difference gradient of `log_density`, step `h (1 + |x_i|)`.
pub fn numeric_gradient<T: TargetModel + ?Sized>(target: &T, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let step = h * (1.0 + x[i].abs());
        xp[i] = x[i] + step;
        let up = target.log_density(&xp);
        xp[i] = x[i] - step;
        let down = target.log_density(&xp);
        xp[i] = x[i];
        g[i] = (up - down) / (2.0 * step);
    }
    g
}

/// Largest gradient error relative to `max(1, |g|_inf)`.
pub fn gradient_error<T: TargetModel + ?Sized>(target: &T, x: &DVector<f64>) -> f64 {
    let analytic = target
        .grad_log_density(x)
        .expect("target provides a gradient");
    let numeric = numeric_gradient(target, x, 1e-6);
    let scale = analytic.amax().max(1.0);
    (analytic - numeric).amax() / scale
}
