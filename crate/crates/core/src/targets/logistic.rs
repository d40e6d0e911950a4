use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::TargetModel;
use crate::{Error, Result};

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_TOL: f64 = 1e-10;

/// Binary responses with a design matrix whose first column is all ones.
#[derive(Debug, Clone)]
pub struct LogisticData {
    pub name: String,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub columns: Vec<String>,
}

/// Datasets shipped with the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Ripley,
    Pima,
    Heart,
    Australian,
    German,
}

impl Dataset {
    pub const ALL: [Dataset; 5] = [
        Dataset::Ripley,
        Dataset::Pima,
        Dataset::Heart,
        Dataset::Australian,
        Dataset::German,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dataset::Ripley => "ripley",
            Dataset::Pima => "pima",
            Dataset::Heart => "heart",
            Dataset::Australian => "australian",
            Dataset::German => "german",
        }
    }

    /// `(d, N)` including the intercept.
    pub fn expected_shape(self) -> (usize, usize) {
        match self {
            Dataset::Ripley => (3, 250),
            Dataset::Pima => (8, 532),
            Dataset::Heart => (14, 270),
            Dataset::Australian => (15, 690),
            Dataset::German => (25, 1000),
        }
    }

    fn csv(self) -> &'static str {
        match self {
            Dataset::Ripley => include_str!("../../data/logistic/ripley.csv"),
            Dataset::Pima => include_str!("../../data/logistic/pima.csv"),
            Dataset::Heart => include_str!("../../data/logistic/heart.csv"),
            Dataset::Australian => include_str!("../../data/logistic/australian.csv"),
            Dataset::German => include_str!("../../data/logistic/german.csv"),
        }
    }

    /// Raw bundled data, intercept prepended.
    pub fn load(self) -> Result<LogisticData> {
        LogisticData::from_reader(self.csv().as_bytes(), self.name())
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dataset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Dataset::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown dataset {s:?}")))
    }
}

impl LogisticData {
    /// CSV with a header, a response column named `y` and numeric features.
    pub fn from_reader<R: Read>(reader: R, name: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        let y_col = header
            .iter()
            .position(|h| h.trim() == "y")
            .ok_or_else(|| Error::Format(format!("{name}: no column named \"y\"")))?;
        let mut columns = vec!["intercept".to_string()];
        columns.extend(
            header
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != y_col)
                .map(|(_, h)| h.trim().to_string()),
        );
        let d = columns.len();

        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |s: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::Format(format!("{name}: row {}: bad number {s:?}", line + 2))
                })
            };
            let y = parse(&rec[y_col])?;
            if y != 0.0 && y != 1.0 {
                return Err(Error::Format(format!(
                    "{name}: row {}: response must be 0 or 1, got {y}",
                    line + 2
                )));
            }
            ys.push(y);
            rows.push(1.0);
            for (i, field) in rec.iter().enumerate() {
                if i != y_col {
                    rows.push(parse(field)?);
                }
            }
        }
        if ys.is_empty() {
            return Err(Error::Format(format!("{name}: no data rows")));
        }
        Ok(Self {
            name: name.to_string(),
            x: DMatrix::from_row_slice(ys.len(), d, &rows),
            y: DVector::from_vec(ys),
            columns,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "data".into());
        Self::from_reader(std::fs::File::open(path)?, &name)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Rescales every non-intercept column to mean 0 and sample sd 1.
    /// Constant columns are only centred.
    pub fn standardized(mut self) -> Self {
        let n = self.n() as f64;
        for j in 1..self.dim() {
            let mut col = self.x.column_mut(j);
            let mean = col.sum() / n;
            col.add_scalar_mut(-mean);
            let sd = (col.norm_squared() / (n - 1.0)).sqrt();
            if sd > 0.0 {
                col /= sd;
            }
        }
        self
    }
}

/// Logistic regression posterior under a flat prior.
pub struct LogisticTarget {
    data: LogisticData,
}

pub fn logistic_target(data: LogisticData) -> LogisticTarget {
    LogisticTarget { data }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl LogisticTarget {
    pub fn data(&self) -> &LogisticData {
        &self.data
    }

    fn eta(&self, gamma: &DVector<f64>) -> DVector<f64> {
        &self.data.x * gamma
    }

    fn loglik_from_eta(&self, eta: &DVector<f64>) -> f64 {
        eta.iter()
            .zip(self.data.y.iter())
            .map(|(&e, &y)| y * e - softplus(e))
            .sum()
    }

    fn grad_from_eta(&self, eta: &DVector<f64>) -> DVector<f64> {
        let resid = DVector::from_iterator(
            eta.len(),
            eta.iter().zip(self.data.y.iter()).map(|(&e, &y)| y - sigmoid(e)),
        );
        self.data.x.tr_mul(&resid)
    }

    /// Observed information `X^T W X`.
    fn information(&self, eta: &DVector<f64>) -> DMatrix<f64> {
        let mut xw = self.data.x.clone();
        for (i, &e) in eta.iter().enumerate() {
            let p = sigmoid(e);
            xw.row_mut(i).scale_mut(p * (1.0 - p));
        }
        self.data.x.tr_mul(&xw)
    }
}

impl TargetModel for LogisticTarget {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn log_density(&self, gamma: &DVector<f64>) -> f64 {
        self.loglik_from_eta(&self.eta(gamma))
    }

    fn grad_log_density(&self, gamma: &DVector<f64>) -> Option<DVector<f64>> {
        Some(self.grad_from_eta(&self.eta(gamma)))
    }

    fn log_density_and_grad(&self, gamma: &DVector<f64>) -> (f64, Option<DVector<f64>>) {
        let eta = self.eta(gamma);
        (self.loglik_from_eta(&eta), Some(self.grad_from_eta(&eta)))
    }
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub mode: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub iterations: usize,
}

/// Maximum likelihood estimate by Newton-Raphson with step halving, and the
/// inverse observed information at the estimate.
pub fn logistic_mle_cov(data: &LogisticData) -> Result<LogisticFit> {
    let target = LogisticTarget { data: data.clone() };
    let mut gamma = DVector::zeros(data.dim());
    let mut eta = target.eta(&gamma);
    let mut ll = target.loglik_from_eta(&eta);
    let not_pd = || Error::NotPositiveDefinite {
        max_jitter: 0.0,
        detail: format!("{}: information matrix is singular", data.name),
    };
    for iter in 1..=NEWTON_MAX_ITER {
        let grad = target.grad_from_eta(&eta);
        let chol = Cholesky::new(target.information(&eta)).ok_or_else(not_pd)?;
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let (next, next_eta, next_ll) = loop {
            let cand = &gamma + &step * t;
            let cand_eta = target.eta(&cand);
            let cand_ll = target.loglik_from_eta(&cand_eta);
            if cand_ll >= ll - 1e-12 * ll.abs().max(1.0) || t < 1e-10 {
                break (cand, cand_eta, cand_ll);
            }
            t *= 0.5;
        };
        let moved = (&next - &gamma).amax();
        gamma = next;
        eta = next_eta;
        ll = next_ll;
        if moved < NEWTON_TOL * (1.0 + gamma.amax()) {
            let info = target.information(&eta);
            let cov = Cholesky::new(info).ok_or_else(not_pd)?.inverse();
            let cov = (&cov + cov.transpose()) * 0.5;
            return Ok(LogisticFit {
                mode: gamma,
                cov,
                iterations: iter,
            });
        }
    }
    Err(Error::NoConvergence(format!(
        "{}: Newton-Raphson did not converge in {NEWTON_MAX_ITER} iterations",
        data.name
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::gradient_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn zero_coefficients() {
        let data = Dataset::Ripley.load().unwrap();
        let t = logistic_target(data.clone());
        let z = DVector::zeros(3);
        let n = data.n() as f64;
        assert!((t.log_density(&z) + n * std::f64::consts::LN_2).abs() < 1e-9);
        let expected = data.x.tr_mul(&data.y.add_scalar(-0.5));
        assert!((t.grad_log_density(&z).unwrap() - expected).amax() < 1e-12);
    }

    #[test]
    fn finite_difference_gradient_on_ripley() {
        let t = logistic_target(Dataset::Ripley.load().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let g = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            assert!(gradient_error(&t, &g) < 1e-5);
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
    }

    #[test]
    fn bundled_shapes() {
        for ds in Dataset::ALL {
            let data = ds.load().unwrap();
            assert_eq!((data.dim(), data.n()), ds.expected_shape(), "{ds}");
            assert!(data.x.column(0).iter().all(|&v| v == 1.0));
            assert!(data.y.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn mle_recovers_generating_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 5000;
        let truth = [0.3, -0.7];
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let x: f64 = rng.sample(StandardNormal);
            let p = sigmoid(truth[0] + truth[1] * x);
            rows.extend([1.0, x]);
            ys.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
        }
        let data = LogisticData {
            name: "synthetic".into(),
            x: DMatrix::from_row_slice(n, 2, &rows),
            y: DVector::from_vec(ys),
            columns: vec!["intercept".into(), "x".into()],
        };
        let fit = logistic_mle_cov(&data).unwrap();
        for k in 0..2 {
            let se = fit.cov[(k, k)].sqrt();
            assert!((fit.mode[k] - truth[k]).abs() < 3.0 * se);
        }
        assert_eq!(fit.cov, fit.cov.transpose());
        assert!(fit.cov.clone().symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn newton_converges_quickly_on_bundled_data() {
        for ds in Dataset::ALL {
            let fit = logistic_mle_cov(&ds.load().unwrap().standardized()).unwrap();
            assert!(fit.iterations <= 25, "{ds}: {}", fit.iterations);
        }
    }

    #[test]
    fn parse_errors() {
        let bad = "a,b\n1,2\n";
        assert!(LogisticData::from_reader(bad.as_bytes(), "bad").is_err());
        let bad = "y,b\n2,2\n";
        assert!(LogisticData::from_reader(bad.as_bytes(), "bad").is_err());
        assert_eq!("Pima".parse::<Dataset>().unwrap(), Dataset::Pima);
    }
}
