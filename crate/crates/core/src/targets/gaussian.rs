use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::TargetModel;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Normalized multivariate normal density.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

pub fn gaussian_target(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<GaussianTarget> {
    GaussianTarget::new(mean, cov)
}

impl GaussianTarget {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: cov.nrows(),
            });
        }
        let chol = Cholesky::new(cov).ok_or_else(|| Error::NotPositiveDefinite {
            max_jitter: 0.0,
            detail: "Gaussian target covariance".into(),
        })?;
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        Ok(Self {
            mean,
            chol,
            log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
        })
    }

    pub fn standard(d: usize) -> Self {
        Self::new(DVector::zeros(d), DMatrix::identity(d, d)).expect("identity is SPD")
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// `-0.5 (x - mu)^T Sigma^{-1} (x - mu)` and `Sigma^{-1} (x - mu)`.
    pub(crate) fn quad(chol: &Cholesky<f64, Dyn>, v: &DVector<f64>) -> (f64, DVector<f64>) {
        let w = chol.solve(v);
        (-0.5 * v.dot(&w), w)
    }

    pub(crate) fn log_norm_of(chol: &Cholesky<f64, Dyn>) -> f64 {
        let d = chol.l().nrows();
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        -0.5 * (d as f64 * LN_2PI + log_det)
    }
}

impl TargetModel for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        Self::quad(&self.chol, &(x - &self.mean)).0 + self.log_norm
    }

    fn grad_log_density(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        Some(-self.chol.solve(&(x - &self.mean)))
    }

    fn log_density_and_grad(&self, x: &DVector<f64>) -> (f64, Option<DVector<f64>>) {
        let (q, w) = Self::quad(&self.chol, &(x - &self.mean));
        (q + self.log_norm, Some(-w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::gradient_error;

    #[test]
    fn standard_normal_gradients() {
        let t = GaussianTarget::standard(1);
        assert_eq!(t.grad_log_density(&DVector::zeros(1)).unwrap()[0], 0.0);
        assert!((t.log_density(&DVector::zeros(1)) + 0.5 * LN_2PI).abs() < 1e-15);
        let t = GaussianTarget::standard(2);
        let g = t.grad_log_density(&DVector::from_vec(vec![1.0, 2.0])).unwrap();
        assert_eq!(g, DVector::from_vec(vec![-1.0, -2.0]));
    }

    #[test]
    fn general_covariance_matches_finite_differences() {
        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, -0.4, 0.3, 1.0, 0.2, -0.4, 0.2, 0.8]);
        let t = gaussian_target(DVector::from_vec(vec![0.5, -1.0, 2.0]), cov).unwrap();
        let x = DVector::from_vec(vec![1.3, 0.2, -0.7]);
        assert!(gradient_error(&t, &x) < 1e-5);
    }
}
