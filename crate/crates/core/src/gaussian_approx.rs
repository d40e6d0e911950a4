//! Gaussian approximation `N(mu, Sigma)` of a target and the per-coordinate
//! change of variables that maps it onto the standard normal.
//!
//! For coordinate `j` the covariance is permuted by the swap `0 <-> j` and
//! factored as `P_j Sigma P_j^T = L_j L_j^T`. The standardized point is
//! `L_j^{-1} P_j (x - mu)`, whose first entry is the coordinate of interest.
//!
//! Everything downstream only needs the first standardized coordinate and
//! the squared norm, and both have closed forms that avoid the `d` separate
//! triangular solves: the first entry is `(x - mu)_j / sqrt(Sigma_jj)` and the
//! norm is the Mahalanobis distance, which does not depend on `j`.
//! [`FrameSummary`] carries those two quantities for every coordinate at once.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-8;
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GaussianApprox {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol_by_coord: Vec<DMatrix<f64>>,
    /// Cholesky of the unpermuted covariance, used for Mahalanobis norms.
    base: Cholesky<f64, Dyn>,
    sd: DVector<f64>,
    jitter: f64,
}

/// First standardized coordinate (for every choice of `j`) and the squared
/// standardized norm of one point.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSummary {
    pub first: DVector<f64>,
    pub norm2: f64,
}

impl FrameSummary {
    pub fn first(&self, coord: usize) -> f64 {
        self.first[coord]
    }
}

/// On-disk form of an approximation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Builds the approximation and precomputes every permuted factor.
pub fn build_approx(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<GaussianApprox> {
    GaussianApprox::new(mean, cov)
}

/// Swaps rows and columns `0` and `j`.
fn permute_cov(cov: &DMatrix<f64>, j: usize) -> DMatrix<f64> {
    let mut p = cov.clone();
    if j != 0 {
        p.swap_rows(0, j);
        p.swap_columns(0, j);
    }
    p
}

fn permute_vec(v: &mut DVector<f64>, j: usize) {
    if j != 0 {
        v.swap_rows(0, j);
    }
}

impl GaussianApprox {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: if cov.nrows() != d { cov.nrows() } else { cov.ncols() },
            });
        }
        if cov.iter().any(|v| !v.is_finite()) || mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "mean and covariance must be finite".into(),
            ));
        }
        let scale = cov.amax().max(f64::MIN_POSITIVE);
        let asym = (&cov - cov.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::InvalidParameter(format!(
                "covariance is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let cov = (&cov + cov.transpose()) * 0.5;

        let (base, cov, jitter) = factor_with_jitter(cov)?;
        let sd = cov.diagonal().map(f64::sqrt);

        let mut chol_by_coord = Vec::with_capacity(d);
        chol_by_coord.push(base.l());
        for j in 1..d {
            let l = Cholesky::new(permute_cov(&cov, j))
                .ok_or_else(|| Error::NotPositiveDefinite {
                    max_jitter: jitter,
                    detail: format!("permuted factor for coordinate {j} failed"),
                })?
                .l();
            chol_by_coord.push(l);
        }

        Ok(Self {
            mean,
            cov,
            chol_by_coord,
            base,
            sd,
            jitter,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn moments(&self) -> ApproxMoments {
        ApproxMoments {
            mean: self.mean.clone(),
            cov: self.cov.clone(),
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, &self.moments())?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let m: ApproxMoments = serde_json::from_reader(f)?;
        Self::new(m.mean, m.cov)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Covariance actually factored (including any jitter).
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Jitter that was added to the diagonal, zero if none was needed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower factor of the covariance with coordinate `coord` swapped first.
    pub fn chol(&self, coord: usize) -> &DMatrix<f64> {
        &self.chol_by_coord[coord]
    }

    /// Lower Cholesky factor of the unpermuted covariance.
    pub fn chol_base(&self) -> &DMatrix<f64> {
        &self.chol_by_coord[0]
    }

    fn check(&self, coord: usize, len: usize) {
        assert!(coord < self.dim(), "coordinate {coord} out of range");
        assert_eq!(len, self.dim(), "vector length does not match approximation");
    }

    /// `L_j^{-1} P_j (x - mu)`, by forward substitution.
    pub fn standardize(&self, coord: usize, x: &DVector<f64>) -> DVector<f64> {
        self.check(coord, x.len());
        let mut v = x - &self.mean;
        permute_vec(&mut v, coord);
        self.chol_by_coord[coord]
            .solve_lower_triangular(&v)
            .expect("factor has positive diagonal")
    }

    /// `mu + P_j L_j z`, the inverse of [`standardize`](Self::standardize).
    pub fn destandardize(&self, coord: usize, z: &DVector<f64>) -> DVector<f64> {
        self.check(coord, z.len());
        let mut v = &self.chol_by_coord[coord] * z;
        permute_vec(&mut v, coord);
        v + &self.mean
    }

    /// `Sigma^{-1} (x - mu)` together with `x - mu`.
    fn whiten(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let v = x - &self.mean;
        let w = self.base.solve(&v);
        (v, w)
    }

    /// Standardized first coordinate for every `j`, plus the squared norm.
    pub fn summary(&self, x: &DVector<f64>) -> FrameSummary {
        assert_eq!(x.len(), self.dim());
        let (v, w) = self.whiten(x);
        FrameSummary {
            first: v.component_div(&self.sd),
            norm2: v.dot(&w).max(0.0),
        }
    }

    /// Summary of the Langevin-shifted point `x~ + (c2 / 2) L_j^T P_j g` for
    /// every `j`, where `g` is a target gradient at `x` in original coordinates.
    pub fn drift_summary(&self, x: &DVector<f64>, grad: &DVector<f64>, c2: f64) -> FrameSummary {
        assert_eq!(grad.len(), self.dim());
        let (v, w) = self.whiten(x);
        let sg = &self.cov * grad;
        // |x~|^2 + c2 v^T g + (c2^2 / 4) g^T Sigma g
        let norm2 = v.dot(&w) + c2 * v.dot(grad) + 0.25 * c2 * c2 * grad.dot(&sg);
        FrameSummary {
            first: (v + sg.scale(0.5 * c2)).component_div(&self.sd),
            norm2: norm2.max(0.0),
        }
    }

    /// Squared Mahalanobis norm `(x - mu)^T Sigma^{-1} (x - mu)`.
    pub fn norm2(&self, x: &DVector<f64>) -> f64 {
        let (v, w) = self.whiten(x);
        v.dot(&w).max(0.0)
    }
}

fn factor_with_jitter(cov: DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, DMatrix<f64>, f64)> {
    if let Some(ch) = Cholesky::new(cov.clone()) {
        if ch.l().diagonal().iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Ok((ch, cov, 0.0));
        }
    }
    let d = cov.nrows();
    let mean_diag = (cov.trace() / d as f64).abs().max(f64::MIN_POSITIVE);
    let mut eps = JITTER_START;
    while eps <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = eps * mean_diag;
        let mut m = cov.clone();
        for i in 0..d {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(m.clone()) {
            if ch.l().diagonal().iter().all(|&v| v > 0.0 && v.is_finite()) {
                return Ok((ch, m, jitter));
            }
        }
        eps *= 10.0;
    }
    let min_eig = cov.clone().symmetric_eigenvalues().min();
    Err(Error::NotPositiveDefinite {
        max_jitter: JITTER_MAX * mean_diag,
        detail: format!("smallest eigenvalue {min_eig:e}"),
    })
}
