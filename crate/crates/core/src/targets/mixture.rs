use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::gaussian::GaussianTarget;
use super::TargetModel;
use crate::{Error, Result};

/// `0.5 N(m, Sigma) + 0.5 N(-m, Sigma)` with `m = (h / 2, 0, ..., 0)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussMixtureSpec {
    pub dim: usize,
    pub half_separation: f64,
    pub cov: DMatrix<f64>,
}

impl GaussMixtureSpec {
    /// Covariance drawn by [`mixture_cov_draw`].
    pub fn random(dim: usize, h: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            dim,
            half_separation: h,
            cov: mixture_cov_draw(dim, seed)?,
        })
    }

    pub fn component_mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        m[0] = 0.5 * self.half_separation;
        m
    }
}

pub struct MixtureTarget {
    m: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

pub fn mixture_target(spec: &GaussMixtureSpec) -> Result<MixtureTarget> {
    if !(spec.half_separation >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "mixture separation must be >= 0, got {}",
            spec.half_separation
        )));
    }
    if spec.cov.nrows() != spec.dim || spec.cov.ncols() != spec.dim {
        return Err(Error::DimensionMismatch {
            expected: spec.dim,
            got: spec.cov.nrows(),
        });
    }
    let chol = Cholesky::new(spec.cov.clone()).ok_or_else(|| Error::NotPositiveDefinite {
        max_jitter: 0.0,
        detail: "mixture covariance".into(),
    })?;
    Ok(MixtureTarget {
        m: spec.component_mean(),
        log_norm: GaussianTarget::log_norm_of(&chol),
        chol,
    })
}

impl MixtureTarget {
    /// Component log-kernels at `x` and the solves `Sigma^{-1}(x -+ m)`.
    fn components(&self, x: &DVector<f64>) -> (f64, f64, DVector<f64>, DVector<f64>) {
        let (lp, wp) = GaussianTarget::quad(&self.chol, &(x - &self.m));
        let (lm, wm) = GaussianTarget::quad(&self.chol, &(x + &self.m));
        (lp, lm, wp, wm)
    }
}

/// `ln(0.5 e^a + 0.5 e^b)`, symmetric in its arguments.
fn log_mean_exp(a: f64, b: f64) -> f64 {
    let hi = a.max(b);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (-(a - b).abs()).exp().ln_1p() - std::f64::consts::LN_2
}

impl TargetModel for MixtureTarget {
    fn dim(&self) -> usize {
        self.m.len()
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let (lp, lm, _, _) = self.components(x);
        log_mean_exp(lp, lm) + self.log_norm
    }

    fn grad_log_density(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        self.log_density_and_grad(x).1
    }

    fn log_density_and_grad(&self, x: &DVector<f64>) -> (f64, Option<DVector<f64>>) {
        let (lp, lm, wp, wm) = self.components(x);
        // responsibility of the +m component
        let rp = 1.0 / (1.0 + (lm - lp).exp());
        let grad = -(wp * rp + wm * (1.0 - rp));
        (log_mean_exp(lp, lm) + self.log_norm, Some(grad))
    }
}

/// Inverse-Wishart draw with `d + 2` degrees of freedom and identity
/// scale, rescaled so that its largest eigenvalue is 25.
pub fn mixture_cov_draw(d: usize, seed: u64) -> Result<DMatrix<f64>> {
    if d < 2 {
        return Err(Error::InvalidParameter(format!(
            "mixture covariance needs d >= 2, got {d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dof = (d + 2) as f64;
    // Bartlett: W = A A^T ~ Wishart(dof, I)
    let mut a = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(dof - i as f64).expect("positive dof");
        a[(i, i)] = chi.sample(&mut rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }
    let w = &a * a.transpose();
    let eig = SymmetricEigen::new(w);
    if eig.eigenvalues.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::NumericalFailure("degenerate Wishart draw".into()));
    }
    // Sigma = W^{-1} shares eigenvectors with inverted eigenvalues.
    let inv = eig.eigenvalues.map(|v| 1.0 / v);
    let scale = 25.0 / inv.max();
    let q = &eig.eigenvectors;
    let sigma = q * DMatrix::from_diagonal(&(inv * scale)) * q.transpose();
    Ok((&sigma + sigma.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::gradient_error;

    #[test]
    fn covariance_draw_constraints() {
        let c = mixture_cov_draw(10, 11).unwrap();
        assert_eq!(c, c.transpose());
        let eig = c.clone().symmetric_eigenvalues();
        assert!((eig.max() - 25.0).abs() < 1e-8);
        assert!(eig.min() > 0.0);
        assert_eq!(c, mixture_cov_draw(10, 11).unwrap());
        assert_ne!(c, mixture_cov_draw(10, 12).unwrap());
        assert!(mixture_cov_draw(1, 0).is_err());
    }

    #[test]
    fn coincident_components_are_one_gaussian() {
        let spec = GaussMixtureSpec::random(4, 0.0, 3).unwrap();
        let mix = mixture_target(&spec).unwrap();
        let g = GaussianTarget::new(DVector::zeros(4), spec.cov.clone()).unwrap();
        for s in 0..10 {
            let x = DVector::from_fn(4, |i, _| ((i + 1) as f64 * 0.7 + s as f64).sin() * 3.0);
            let (a, b) = (mix.log_density(&x), g.log_density(&x));
            assert!(((a - b) / b).abs() < 1e-10);
        }
    }

    #[test]
    fn symmetric_density_and_zero_gradient_at_origin() {
        let spec = GaussMixtureSpec::random(10, 2.0, 5).unwrap();
        let mix = mixture_target(&spec).unwrap();
        let g0 = mix.grad_log_density(&DVector::zeros(10)).unwrap();
        assert!(g0.amax() == 0.0);
        for s in 0..20 {
            let x = DVector::from_fn(10, |i, _| ((i * 7 + s) as f64).cos() * 4.0);
            assert_eq!(mix.log_density(&x), mix.log_density(&-&x));
            assert!(gradient_error(&mix, &x) < 1e-5);
        }
    }
}
