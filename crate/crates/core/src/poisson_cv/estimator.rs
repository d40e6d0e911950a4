use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    analytic_a_reduced, analytic_ag_reduced, g0_reduced, g0_reduced_terms, Center, G0Params,
    ReducedTerm,
};
use crate::gaussian_approx::{FrameSummary, GaussianApprox};
use crate::samplers::{Algorithm, ChainTrace};
use crate::{Error, Result};

/// Denominators below this fraction of the numerator are treated as zero.
const THETA_GUARD: f64 = 1e-14;
const ROW_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub theta: f64,
    pub numerator: f64,
    pub denominator: f64,
    /// The denominator was degenerate and `theta` was set to zero.
    pub fallback: bool,
}

/// Regression coefficient from the chain output alone:
/// `[mean(F (G + PG)) - mean(F) mean(G + PG)] / [(1/n) sum_{i>=1} (G_i - PG_{i-1})^2]`.
pub fn theta_hat(f: &[f64], g: &[f64], pg: &[f64]) -> Result<ThetaEstimate> {
    let n = f.len();
    if n < 2 || g.len() != n || pg.len() != n {
        return Err(Error::InvalidParameter(format!(
            "theta needs equal series of length >= 2 (got {}, {}, {})",
            n,
            g.len(),
            pg.len()
        )));
    }
    let mut sums = ThetaSums::default();
    for i in 0..n {
        sums.push(f[i], g[i], pg[i], (i > 0).then(|| pg[i - 1]));
    }
    Ok(sums.estimate())
}

/// Running sums behind [`theta_hat`], so prefixes can be evaluated in one pass.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct ThetaSums {
    n: usize,
    sf: f64,
    ss: f64,
    sfs: f64,
    sden: f64,
}

impl ThetaSums {
    /// Adds row `i`; `pg_prev` is `PG_{i-1}`, absent for the first row.
    pub(crate) fn push(&mut self, f: f64, g: f64, pg: f64, pg_prev: Option<f64>) {
        let s = g + pg;
        self.n += 1;
        self.sf += f;
        self.ss += s;
        self.sfs += f * s;
        if let Some(p) = pg_prev {
            self.sden += (g - p).powi(2);
        }
    }

    pub(crate) fn estimate(&self) -> ThetaEstimate {
        let nf = self.n as f64;
        let numerator = self.sfs / nf - (self.sf / nf) * (self.ss / nf);
        let denominator = self.sden / nf;
        let degenerate = self.n < 2
            || !denominator.is_finite()
            || !numerator.is_finite()
            || denominator == 0.0
            || denominator <= THETA_GUARD * numerator.abs();
        ThetaEstimate {
            theta: if degenerate { 0.0 } else { numerator / denominator },
            numerator,
            denominator,
            fallback: degenerate,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CvSeries {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub pg: Vec<f64>,
}

impl CvSeries {
    /// Running ergodic means and running control-variate estimates, each
    /// prefix with its own coefficient (or `theta_override`). The last
    /// entries reproduce the full-chain `plain_mean` and `cv_mean`.
    pub fn running(&self, theta_override: Option<f64>) -> (Vec<f64>, Vec<f64>) {
        let n = self.f.len();
        let mut sums = ThetaSums::default();
        let mut sc = 0.0;
        let mut plain = Vec::with_capacity(n);
        let mut cv = Vec::with_capacity(n);
        for i in 0..n {
            sums.push(self.f[i], self.g[i], self.pg[i], (i > 0).then(|| self.pg[i - 1]));
            sc += self.g[i] - self.pg[i];
            let k = (i + 1) as f64;
            let theta = theta_override.unwrap_or_else(|| sums.estimate().theta);
            plain.push(sums.sf / k);
            cv.push(sums.sf / k - theta * (sc / k));
        }
        (plain, cv)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub coord: usize,
    pub n: usize,
    pub plain_mean: f64,
    pub cv_mean: f64,
    pub theta: f64,
    pub theta_fallback: bool,
    pub theta_numerator: f64,
    pub theta_denominator: f64,
    /// Mean of `G - PG`, the quantity scaled by `theta`.
    pub mean_correction: f64,
    /// Sample correlation between `F` and `G - PG`.
    pub corr_cv_f: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub series: Option<CvSeries>,
}

impl CvReport {
    pub const CSV_HEADER: [&'static str; 10] = [
        "coord",
        "n",
        "plain_mean",
        "cv_mean",
        "theta",
        "theta_fallback",
        "theta_numerator",
        "theta_denominator",
        "mean_correction",
        "corr_cv_f",
    ];

    fn csv_row(&self) -> Vec<String> {
        vec![
            self.coord.to_string(),
            self.n.to_string(),
            self.plain_mean.to_string(),
            self.cv_mean.to_string(),
            self.theta.to_string(),
            self.theta_fallback.to_string(),
            self.theta_numerator.to_string(),
            self.theta_denominator.to_string(),
            self.mean_correction.to_string(),
            self.corr_cv_f.to_string(),
        ]
    }

    /// One row per coordinate.
    pub fn write_csv<W: Write>(reports: &[CvReport], w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(Self::CSV_HEADER)?;
        for r in reports {
            w.write_record(r.csv_row())?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct CvOptions {
    pub keep_series: bool,
    /// Use this coefficient instead of the estimated one.
    pub theta_override: Option<f64>,
    /// Extra terms added to `G0` (e.g. constants).
    pub extra_terms: Vec<ReducedTerm>,
}

/// Per-coordinate machinery for one chain.
struct Engine<'a> {
    approx: &'a GaussianApprox,
    params: G0Params,
    terms: Vec<ReducedTerm>,
    extra: Vec<ReducedTerm>,
    c2: f64,
    kind: Algorithm,
}

/// Values that depend only on the current state.
#[derive(Clone, Copy)]
struct StateTerms {
    g: f64,
    /// `E_q[min(1, r~) (G(y) - G(x))]`
    eq_h: f64,
}

impl Engine<'_> {
    fn g(&self, x1: f64, norm2: f64) -> f64 {
        g0_reduced(&self.params, x1, norm2)
            + self.extra.iter().map(|t| t.eval(x1, norm2)).sum::<f64>()
    }

    fn state_terms(&self, coord: usize, sx: &FrameSummary, center: &FrameSummary) -> Result<StateTerms> {
        let d = self.approx.dim();
        let (x1, xn2) = (sx.first(coord), sx.norm2);
        let g = self.g(x1, xn2);
        let c = Center {
            first: center.first(coord),
            norm2: center.norm2,
        };
        let a = analytic_a_reduced(d, xn2, c.norm2, self.c2, self.kind)?;
        let ag = analytic_ag_reduced(d, xn2, c, &self.terms, self.c2, self.kind)?;
        Ok(StateTerms { g, eq_h: ag - a * g })
    }

    /// Proposal centre in the standardized frame.
    fn center(&self, trace: &ChainTrace, i: usize, sx: &FrameSummary) -> FrameSummary {
        match self.kind {
            Algorithm::Rwm => sx.clone(),
            Algorithm::Mala => {
                let grad = &trace.grad_at_state.as_ref().expect("checked")[i];
                self.approx.drift_summary(&trace.states[i], grad, self.c2)
            }
        }
    }

    /// `G(x_i)` and `PG(x_i)` for every requested coordinate over a row range.
    fn rows(&self, trace: &ChainTrace, coords: &[usize], lo: usize, hi: usize) -> Result<Vec<(f64, f64)>> {
        let tau2 = self.kind.tau2(self.c2);
        let mut out = Vec::with_capacity((hi - lo) * coords.len());
        let mut cached: Option<(usize, FrameSummary, Vec<StateTerms>)> = None;
        for i in lo..hi {
            let reuse = matches!(&cached, Some((k, _, _)) if trace.states[*k] == trace.states[i]
                && match &trace.grad_at_state {
                    Some(gs) => gs[*k] == gs[i],
                    None => true,
                });
            if !reuse {
                let sx = self.approx.summary(&trace.states[i]);
                let center = self.center(trace, i, &sx);
                let st = coords
                    .iter()
                    .map(|&j| self.state_terms(j, &sx, &center))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| Error::NumericalFailure(format!("row {i}: {e}")))?;
                cached = Some((i, sx, st));
            }
            let (_, sx, st) = cached.as_ref().unwrap();
            let sy = self.approx.summary(&trace.proposals[i]);
            let accept_gauss = (-0.5 * tau2 * (sy.norm2 - sx.norm2)).min(0.0).exp();
            let alpha = trace.accept_prob[i];
            for (k, &j) in coords.iter().enumerate() {
                let gx = st[k].g;
                let dg = self.g(sy.first(j), sy.norm2) - gx;
                let h = accept_gauss * dg;
                out.push((gx, gx + alpha * dg - h + st[k].eq_h));
            }
        }
        Ok(out)
    }
}

fn check_inputs(trace: &ChainTrace, approx: &GaussianApprox, coords: &[usize], params: &G0Params) -> Result<()> {
    if trace.dim() != approx.dim() {
        return Err(Error::DimensionMismatch {
            expected: approx.dim(),
            got: trace.dim(),
        });
    }
    if trace.len() < 2 {
        return Err(Error::InvalidParameter("trace needs at least two rows".into()));
    }
    if let Some(&j) = coords.iter().find(|&&j| j >= approx.dim()) {
        return Err(Error::InvalidParameter(format!("coordinate {j} out of range")));
    }
    if trace.kind == Algorithm::Mala && trace.grad_at_state.is_none() {
        return Err(Error::InvalidParameter(
            "MALA trace lacks gradients at the states".into(),
        ));
    }
    if params.algorithm != trace.kind {
        return Err(Error::InvalidParameter(format!(
            "G0 parameters are for {} but the trace is {}",
            params.algorithm, trace.kind
        )));
    }
    params.validate()
}

fn engine<'a>(trace: &ChainTrace, approx: &'a GaussianApprox, params: &G0Params, opts: &CvOptions) -> Engine<'a> {
    let mut terms = g0_reduced_terms(params).to_vec();
    terms.extend(opts.extra_terms.iter().copied());
    Engine {
        approx,
        params: *params,
        terms,
        extra: opts.extra_terms.clone(),
        c2: trace.step2,
        kind: trace.kind,
    }
}

/// `PG(x_i)` for a single row and coordinate, from scratch.
pub fn pg_hat(trace: &ChainTrace, i: usize, approx: &GaussianApprox, coord: usize, params: &G0Params) -> Result<f64> {
    check_inputs(trace, approx, &[coord], params)?;
    let e = engine(trace, approx, params, &CvOptions::default());
    Ok(e.rows(trace, &[coord], i, i + 1)?[0].1)
}

/// Control-variate estimates of the posterior means of `coords`.
pub fn estimate(trace: &ChainTrace, approx: &GaussianApprox, params: &G0Params, coords: &[usize]) -> Result<Vec<CvReport>> {
    estimate_with(trace, approx, params, coords, &CvOptions::default())
}

pub fn estimate_with(
    trace: &ChainTrace,
    approx: &GaussianApprox,
    params: &G0Params,
    coords: &[usize],
    opts: &CvOptions,
) -> Result<Vec<CvReport>> {
    check_inputs(trace, approx, coords, params)?;
    let e = engine(trace, approx, params, opts);
    let n = trace.len();
    let m = coords.len();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(ROW_CHUNK)
        .map(|lo| (lo, (lo + ROW_CHUNK).min(n)))
        .collect();
    let parts = chunks
        .par_iter()
        .map(|&(lo, hi)| e.rows(trace, coords, lo, hi))
        .collect::<Result<Vec<_>>>()?;

    let mut g = vec![Vec::with_capacity(n); m];
    let mut pg = vec![Vec::with_capacity(n); m];
    for part in parts {
        for (idx, (gi, pgi)) in part.into_iter().enumerate() {
            g[idx % m].push(gi);
            pg[idx % m].push(pgi);
        }
    }

    coords
        .iter()
        .enumerate()
        .map(|(k, &j)| {
            let f = trace.coordinate(j);
            report(j, f, std::mem::take(&mut g[k]), std::mem::take(&mut pg[k]), opts)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn report(coord: usize, f: Vec<f64>, g: Vec<f64>, pg: Vec<f64>, opts: &CvOptions) -> Result<CvReport> {
    let th = theta_hat(&f, &g, &pg)?;
    let theta = opts.theta_override.unwrap_or(th.theta);
    let corr: Vec<f64> = g.iter().zip(&pg).map(|(a, b)| a - b).collect();
    let plain = mean(&f);
    let mc = mean(&corr);
    let cv_mean = plain - theta * mc;
    if !cv_mean.is_finite() {
        return Err(Error::NumericalFailure(format!(
            "coordinate {coord}: control-variate estimate is not finite"
        )));
    }
    Ok(CvReport {
        coord,
        n: f.len(),
        plain_mean: plain,
        cv_mean,
        theta,
        theta_fallback: th.fallback && opts.theta_override.is_none(),
        theta_numerator: th.numerator,
        theta_denominator: th.denominator,
        mean_correction: mc,
        corr_cv_f: correlation(&f, &corr),
        series: opts.keep_series.then_some(CvSeries { f, g, pg }),
    })
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}
