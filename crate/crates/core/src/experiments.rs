//! Replicated variance-reduction experiments: build a target and its
//! Gaussian approximation, run independent chains, apply the control
//! variates to each, and compare replicate variances.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gaussian_approx::GaussianApprox;
use crate::poisson_cv::{estimate_with, CvOptions, G0Params};
use crate::samplers::{run_chain, Algorithm, ProposalSpec};
use crate::targets::{
    logistic_mle_cov, logistic_target, mixture_target, sv_simulate, sv_target, Dataset, GaussMixtureSpec,
    GaussianTarget, SvModelSpec, SvPrior, TargetModel, SV_STATIC_PARAMS,
};
use crate::{Error, Result};

/// Parameters used to simulate the stochastic volatility returns.
pub const SV_TRUE_PHI: f64 = 0.98;
pub const SV_TRUE_M: f64 = -0.85;
pub const SV_TRUE_S: f64 = 0.15;

const SV_PILOT_STAGES: u64 = 3;
const SV_PILOT_N: usize = 20_000;
const SV_PILOT_BURN_IN: usize = 5_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TargetSpec {
    Gaussian { d: usize },
    /// `h` is the distance between the two component means.
    Mixture { d: usize, h: f64, seed: u64 },
    Logistic { dataset: Dataset },
    /// `n_obs` simulated returns; the posterior has `n_obs + 3` dimensions.
    Sv { n_obs: usize, seed: u64 },
}

impl TargetSpec {
    pub fn dim(&self) -> usize {
        match *self {
            TargetSpec::Gaussian { d } | TargetSpec::Mixture { d, .. } => d,
            TargetSpec::Logistic { dataset } => dataset.expected_shape().0,
            TargetSpec::Sv { n_obs, .. } => n_obs + SV_STATIC_PARAMS,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            TargetSpec::Gaussian { d } => format!("gaussian d={d}"),
            TargetSpec::Mixture { d, h, seed } => format!("mixture d={d} h={h} seed={seed}"),
            TargetSpec::Logistic { dataset } => format!("logistic {dataset}"),
            TargetSpec::Sv { n_obs, seed } => format!("sv N={n_obs} seed={seed}"),
        }
    }
}

/// `"all"` or an explicit list of 0-based coordinates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CoordsRepr", into = "CoordsRepr")]
pub enum Coords {
    #[default]
    All,
    List(Vec<usize>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CoordsRepr {
    Word(String),
    List(Vec<usize>),
}

impl TryFrom<CoordsRepr> for Coords {
    type Error = String;
    fn try_from(r: CoordsRepr) -> std::result::Result<Self, String> {
        match r {
            CoordsRepr::Word(w) if w.eq_ignore_ascii_case("all") => Ok(Coords::All),
            CoordsRepr::Word(w) => Err(format!("coords must be \"all\" or a list, got {w:?}")),
            CoordsRepr::List(v) => Ok(Coords::List(v)),
        }
    }
}

impl From<Coords> for CoordsRepr {
    fn from(c: Coords) -> Self {
        match c {
            Coords::All => CoordsRepr::Word("all".into()),
            Coords::List(v) => CoordsRepr::List(v),
        }
    }
}

impl Coords {
    pub fn resolve(&self, d: usize) -> Result<Vec<usize>> {
        match self {
            Coords::All => Ok((0..d).collect()),
            Coords::List(v) => {
                if v.is_empty() {
                    return Err(Error::InvalidParameter("coordinate list is empty".into()));
                }
                if let Some(&j) = v.iter().find(|&&j| j >= d) {
                    return Err(Error::InvalidParameter(format!(
                        "coordinate {j} out of range for dimension {d}"
                    )));
                }
                Ok(v.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub report_json: Option<PathBuf>,
    pub report_text: Option<PathBuf>,
    /// Per-replicate estimates, one row per replicate and coordinate.
    pub estimates_csv: Option<PathBuf>,
}

fn default_burn_in() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub target: TargetSpec,
    pub algorithm: Algorithm,
    pub n: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    pub replicates: usize,
    #[serde(default)]
    pub coords: Coords,
    /// Replicate `i` uses seed `seed + i`.
    #[serde(default)]
    pub seed: u64,
    /// Fixed `c^2` instead of the sampler default.
    #[serde(default)]
    pub step2: Option<f64>,
    /// `G0` parameters; defaults to the published ones for the algorithm.
    #[serde(default)]
    pub g0: Option<G0Params>,
    #[serde(default)]
    pub output: OutputSpec,
}

impl ExperimentSpec {
    pub fn new(target: TargetSpec, algorithm: Algorithm, n: usize, replicates: usize) -> Self {
        Self {
            target,
            algorithm,
            n,
            burn_in: default_burn_in(),
            replicates,
            coords: Coords::All,
            seed: 0,
            step2: None,
            g0: None,
            output: OutputSpec::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least two replicates, got {}",
                self.replicates
            )));
        }
        if self.n < 2 {
            return Err(Error::InvalidParameter(format!("need n >= 2, got {}", self.n)));
        }
        if self.target.dim() == 0 {
            return Err(Error::InvalidParameter("target dimension must be positive".into()));
        }
        if let Some(c2) = self.step2 {
            if !(c2 > 0.0) || !c2.is_finite() {
                return Err(Error::InvalidParameter(format!("step2 must be positive, got {c2}")));
            }
        }
        if let Some(p) = &self.g0 {
            p.validate()?;
            if p.algorithm != self.algorithm {
                return Err(Error::InvalidParameter(format!(
                    "G0 parameters are for {}, the experiment uses {}",
                    p.algorithm, self.algorithm
                )));
            }
        }
        if let TargetSpec::Mixture { h, .. } = self.target {
            if !(h >= 0.0) {
                return Err(Error::InvalidParameter(format!("mixture h must be >= 0, got {h}")));
            }
        }
        if let TargetSpec::Sv { n_obs, .. } = self.target {
            if n_obs < 2 {
                return Err(Error::InvalidParameter("sv needs at least two observations".into()));
            }
        }
        self.coords.resolve(self.target.dim())?;
        Ok(())
    }

    pub fn g0_params(&self) -> G0Params {
        self.g0.unwrap_or_else(|| G0Params::table(self.algorithm))
    }

    pub fn proposal(&self, d: usize) -> ProposalSpec {
        let mut p = ProposalSpec::default_for(self.algorithm, d);
        if let Some(c2) = self.step2 {
            p.step2 = c2;
            p.adapt = None;
        }
        p
    }
}

/// A target with its Gaussian approximation and coordinate names.
pub struct PreparedTarget {
    pub target: Box<dyn TargetModel>,
    pub approx: GaussianApprox,
    pub labels: Vec<String>,
    /// Exact posterior means where known.
    pub truth: Option<DVector<f64>>,
}

fn indexed_labels(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|j| format!("{prefix}{j}")).collect()
}

/// Builds the target deterministically from its descriptor.
pub fn prepare_target(spec: &TargetSpec) -> Result<PreparedTarget> {
    match *spec {
        TargetSpec::Gaussian { d } => Ok(PreparedTarget {
            target: Box::new(GaussianTarget::standard(d)),
            approx: GaussianApprox::new(DVector::zeros(d), DMatrix::identity(d, d))?,
            labels: indexed_labels("x", d),
            truth: Some(DVector::zeros(d)),
        }),
        TargetSpec::Mixture { d, h, seed } => {
            let mix = GaussMixtureSpec::random(d, h, seed)?;
            let target = mixture_target(&mix)?;
            // centred at the symmetry point, shaped like one component
            let approx = GaussianApprox::new(DVector::zeros(d), mix.cov.clone())?;
            Ok(PreparedTarget {
                target: Box::new(target),
                approx,
                labels: indexed_labels("x", d),
                truth: Some(DVector::zeros(d)),
            })
        }
        TargetSpec::Logistic { dataset } => {
            let data = dataset.load()?.standardized();
            let fit = logistic_mle_cov(&data)?;
            let labels = data.columns.clone();
            Ok(PreparedTarget {
                target: Box::new(logistic_target(data)),
                approx: GaussianApprox::new(fit.mode, fit.cov)?,
                labels,
                truth: None,
            })
        }
        TargetSpec::Sv { n_obs, seed } => {
            let sim = sv_simulate(n_obs, SV_TRUE_PHI, SV_TRUE_M, SV_TRUE_S, seed)?;
            let target = sv_target(&SvModelSpec {
                returns: sim.r,
                prior: SvPrior::default(),
            })?;
            let approx = sv_pilot_approx(&target, seed)?;
            let mut labels = vec!["m".to_string(), "phi".to_string(), "s2".to_string()];
            labels.extend(indexed_labels("h", n_obs));
            Ok(PreparedTarget {
                target: Box::new(target),
                approx,
                labels,
                truth: None,
            })
        }
    }
}

fn empirical_moments(states: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = states[0].len();
    let n = states.len() as f64;
    let mean = states.iter().fold(DVector::zeros(d), |acc, x| acc + x) / n;
    let mut cov = DMatrix::zeros(d, d);
    for x in states {
        let c = x - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    (mean, cov / (n - 1.0))
}

/// Gaussian approximation for the SV posterior from successive adaptive
/// MALA pilot runs, each preconditioned by the previous run's moments.
fn sv_pilot_approx(target: &crate::targets::SvTarget, seed: u64) -> Result<GaussianApprox> {
    let d = target.dim();
    let x0 = target.initial_point()?;
    let cov0 = target.initial_cov(&x0)?;
    let mut approx = GaussianApprox::new(x0, cov0)?;
    let spec = ProposalSpec::mala(d);
    let pilot_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5851_f42d_4c95_7f2d;
    for stage in 0..SV_PILOT_STAGES {
        let trace = run_chain(target, &approx, &spec, SV_PILOT_N, SV_PILOT_BURN_IN, pilot_seed.wrapping_add(stage))?;
        let (mean, cov) = empirical_moments(&trace.states);
        approx = GaussianApprox::new(mean, cov)?;
    }
    Ok(approx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub seed: u64,
    pub acceptance: f64,
    pub step2: f64,
    /// Ergodic means, in the report's coordinate order.
    pub plain: Vec<f64>,
    /// Control-variate estimates.
    pub cv: Vec<f64>,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordVrf {
    pub coord: usize,
    pub label: String,
    pub mean_plain: f64,
    pub mean_cv: f64,
    pub var_plain: f64,
    pub var_cv: f64,
    /// `var_plain / var_cv`.
    pub ratio: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VrfReport {
    pub spec: ExperimentSpec,
    pub dim: usize,
    pub coords: Vec<CoordVrf>,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub replicates: Vec<ReplicateOutcome>,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let t = v.len() as f64;
    let m = v.iter().sum::<f64>() / t;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (t - 1.0))
}

impl VrfReport {
    /// Summary statistics recomputed from per-replicate estimates.
    pub fn from_replicates(
        spec: ExperimentSpec,
        dim: usize,
        coords: &[usize],
        labels: &[String],
        replicates: Vec<ReplicateOutcome>,
    ) -> Result<Self> {
        if replicates.len() < 2 {
            return Err(Error::InvalidParameter("need at least two replicates".into()));
        }
        if let Some(r) = replicates.iter().find(|r| r.plain.len() != coords.len() || r.cv.len() != coords.len()) {
            return Err(Error::Format(format!(
                "replicate {} has {} estimates for {} coordinates",
                r.index,
                r.plain.len(),
                coords.len()
            )));
        }
        let stats: Vec<CoordVrf> = coords
            .iter()
            .enumerate()
            .map(|(k, &j)| {
                let plain: Vec<f64> = replicates.iter().map(|r| r.plain[k]).collect();
                let cv: Vec<f64> = replicates.iter().map(|r| r.cv[k]).collect();
                let (mean_plain, var_plain) = mean_var(&plain);
                let (mean_cv, var_cv) = mean_var(&cv);
                CoordVrf {
                    coord: j,
                    label: labels.get(j).cloned().unwrap_or_else(|| format!("x{j}")),
                    mean_plain,
                    mean_cv,
                    var_plain,
                    var_cv,
                    ratio: var_plain / var_cv,
                    replicates: replicates.len(),
                }
            })
            .collect();
        let min_ratio = stats.iter().map(|c| c.ratio).fold(f64::INFINITY, f64::min);
        let max_ratio = stats.iter().map(|c| c.ratio).fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            spec,
            dim,
            coords: stats,
            min_ratio,
            max_ratio,
            replicates,
        })
    }

    pub fn coord(&self, j: usize) -> Option<&CoordVrf> {
        self.coords.iter().find(|c| c.coord == j)
    }

    /// `(min, max)` of the ratios over `coords` that are in the report.
    pub fn ratio_range(&self, coords: impl IntoIterator<Item = usize>) -> Option<(f64, f64)> {
        let r: Vec<f64> = coords.into_iter().filter_map(|j| self.coord(j)).map(|c| c.ratio).collect();
        (!r.is_empty()).then(|| {
            (
                r.iter().copied().fold(f64::INFINITY, f64::min),
                r.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )
        })
    }

    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} | {} | n={} burn-in={} T={} seed={}",
            s.target.describe(),
            s.algorithm,
            s.n,
            s.burn_in,
            self.replicates.len(),
            s.seed
        );
        let w = self.coords.iter().map(|c| c.label.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(
            out,
            "{:<w$}  {:>13}  {:>13}  {:>12}  {:>12}  {:>10}",
            "coord", "mean plain", "mean cv", "var plain", "var cv", "VRF"
        );
        for c in &self.coords {
            let _ = writeln!(
                out,
                "{:<w$}  {:>13.6e}  {:>13.6e}  {:>12.4e}  {:>12.4e}  {:>10.2}",
                c.label, c.mean_plain, c.mean_cv, c.var_plain, c.var_cv, c.ratio
            );
        }
        let _ = writeln!(out, "VRF range {:.2} - {:.2}", self.min_ratio, self.max_ratio);
        out
    }

    pub fn write_estimates_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["replicate", "seed", "coord", "plain", "cv", "theta"])?;
        for r in &self.replicates {
            for (k, c) in self.coords.iter().enumerate() {
                w.write_record([
                    r.index.to_string(),
                    r.seed.to_string(),
                    c.coord.to_string(),
                    r.plain[k].to_string(),
                    r.cv[k].to_string(),
                    r.theta[k].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes whichever outputs are configured, resolving relative paths
    /// against `dir`.
    pub fn write_outputs(&self, out: &OutputSpec, dir: &Path) -> Result<Vec<PathBuf>> {
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { dir.join(p) };
        let mut written = Vec::new();
        if let Some(p) = out.report_json.as_ref().map(resolve) {
            let f = std::fs::File::create(&p)?;
            serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
            written.push(p);
        }
        if let Some(p) = out.report_text.as_ref().map(resolve) {
            std::fs::write(&p, self.to_text())?;
            written.push(p);
        }
        if let Some(p) = out.estimates_csv.as_ref().map(resolve) {
            self.write_estimates_csv(std::fs::File::create(&p)?)?;
            written.push(p);
        }
        Ok(written)
    }
}

fn run_replicate(
    spec: &ExperimentSpec,
    prepared: &PreparedTarget,
    coords: &[usize],
    params: &G0Params,
    index: usize,
) -> Result<ReplicateOutcome> {
    let seed = spec.seed.wrapping_add(index as u64);
    let proposal = spec.proposal(prepared.approx.dim());
    let trace = run_chain(prepared.target.as_ref(), &prepared.approx, &proposal, spec.n, spec.burn_in, seed)?;
    let reports = estimate_with(&trace, &prepared.approx, params, coords, &CvOptions::default())?;
    Ok(ReplicateOutcome {
        index,
        seed,
        acceptance: trace.acceptance_rate(),
        step2: trace.step2,
        plain: reports.iter().map(|r| r.plain_mean).collect(),
        cv: reports.iter().map(|r| r.cv_mean).collect(),
        theta: reports.iter().map(|r| r.theta).collect(),
    })
}

/// Runs all replicates (in parallel) and summarizes them. Results do not
/// depend on scheduling: each replicate is seeded by its index.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<VrfReport> {
    spec.validate()?;
    let prepared = prepare_target(&spec.target)?;
    run_experiment_on(spec, &prepared)
}

/// Like [`run_experiment`] with an already prepared target.
pub fn run_experiment_on(spec: &ExperimentSpec, prepared: &PreparedTarget) -> Result<VrfReport> {
    spec.validate()?;
    let d = prepared.approx.dim();
    let coords = spec.coords.resolve(d)?;
    let params = spec.g0_params();
    let replicates = (0..spec.replicates)
        .into_par_iter()
        .map(|i| {
            run_replicate(spec, prepared, &coords, &params, i).map_err(|e| Error::Replicate {
                index: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    VrfReport::from_replicates(spec.clone(), d, &coords, &prepared.labels, replicates)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesKind {
    Ergodic,
    Cv,
}

impl std::str::FromStr for SeriesKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ergodic" | "plain" => Ok(SeriesKind::Ergodic),
            "cv" => Ok(SeriesKind::Cv),
            _ => Err(Error::InvalidParameter(format!("unknown series {s:?}"))),
        }
    }
}

/// Running estimates of `coord` along the first replicate's chain, as
/// `(iteration, estimate)` with iterations counted from one.
pub fn trace_series(spec: &ExperimentSpec, prepared: &PreparedTarget, which: SeriesKind, coord: usize) -> Result<Vec<(usize, f64)>> {
    spec.validate()?;
    if coord >= prepared.approx.dim() {
        return Err(Error::InvalidParameter(format!("coordinate {coord} out of range")));
    }
    let proposal = spec.proposal(prepared.approx.dim());
    let trace = run_chain(prepared.target.as_ref(), &prepared.approx, &proposal, spec.n, spec.burn_in, spec.seed)?;
    let opts = CvOptions {
        keep_series: true,
        ..Default::default()
    };
    let report = estimate_with(&trace, &prepared.approx, &spec.g0_params(), &[coord], &opts)?.remove(0);
    let (plain, cv) = report.series.as_ref().expect("series requested").running(None);
    let values = match which {
        SeriesKind::Ergodic => plain,
        SeriesKind::Cv => cv,
    };
    Ok(values.into_iter().enumerate().map(|(i, v)| (i + 1, v)).collect())
}

/// Writes [`trace_series`] as a two-column CSV.
pub fn emit_trace_series(
    spec: &ExperimentSpec,
    prepared: &PreparedTarget,
    which: SeriesKind,
    coord: usize,
    path: &Path,
) -> Result<Vec<(usize, f64)>> {
    let series = trace_series(spec, prepared, which, coord)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "estimate"])?;
    for (i, v) in &series {
        w.write_record([i.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(series)
}

/// Run sizes for the named presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// 50 replicates and at most 50,000 samples per chain.
    Desk,
    /// 100 replicates at the full chain lengths.
    Paper,
}

const PRESET_FAMILIES: &str = "gaussian-{rwm,mala}-d{D}-n{N}, mixture-d{D}-h{H}, \
     logistic-{rwm,mala}-{dataset}-n{N}, sv-N{N_OBS}-n{N}";

/// Parses preset names like `gaussian-rwm-d10-n10000`, `mixture-d10-h2`,
/// `logistic-mala-pima-n10000` or `sv-N50-n10000`.
pub fn preset(name: &str, scale: Scale) -> Result<ExperimentSpec> {
    let bad = || Error::InvalidParameter(format!("unknown preset {name:?}; expected one of {PRESET_FAMILIES}"));
    let parts: Vec<&str> = name.split('-').collect();
    let num = |s: &str, prefix: &str| -> Result<usize> {
        s.strip_prefix(prefix).and_then(|v| v.replace('_', "").parse().ok()).ok_or_else(bad)
    };
    let (target, algorithm, n) = match parts.as_slice() {
        ["gaussian", alg, d, n] => (TargetSpec::Gaussian { d: num(d, "d")? }, alg.parse()?, num(n, "n")?),
        ["mixture", d, h] => (
            TargetSpec::Mixture {
                d: num(d, "d")?,
                h: num(h, "h")? as f64,
                seed: 0,
            },
            Algorithm::Rwm,
            200_000,
        ),
        ["logistic", alg, ds, n] => (TargetSpec::Logistic { dataset: ds.parse()? }, alg.parse()?, num(n, "n")?),
        ["sv", nobs, n] => (
            TargetSpec::Sv {
                n_obs: num(nobs, "N")?,
                seed: 0,
            },
            Algorithm::Mala,
            num(n, "n")?,
        ),
        _ => return Err(bad()),
    };
    let (n, t) = match scale {
        Scale::Desk => (n.min(50_000), 50),
        Scale::Paper => (n, 100),
    };
    let spec = ExperimentSpec::new(target, algorithm, n, t);
    spec.validate()?;
    Ok(spec)
}
