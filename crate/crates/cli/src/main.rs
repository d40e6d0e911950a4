use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mhcv::experiments::{
    emit_trace_series, prepare_target, preset, run_experiment_on, Coords, ExperimentSpec, OutputSpec, Scale,
    SeriesKind, TargetSpec,
};
use mhcv::g0_fit::{fit_g0, BfgsOptions, FitOptions, G0Fit};
use mhcv::gaussian_approx::GaussianApprox;
use mhcv::poisson_cv::{estimate, CvReport, G0Params};
use mhcv::samplers::{read_trace, read_trace_csv, run_chain, write_trace, write_trace_csv, Algorithm};
use mhcv::targets::{logistic_mle_cov, Dataset};

#[derive(Parser)]
#[command(name = "mhcv", version, about = "Poisson-equation control variates for RWM and MALA output")]
struct Cli {
    /// Directory for outputs given as relative paths.
    #[arg(long, global = true, env = "MHCV_OUTPUT_DIR", default_value = ".")]
    output_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one chain and save its trace.
    Sample {
        #[command(flatten)]
        run: RunArgs,
        /// Trace file; `.csv` selects the text format. The Gaussian
        /// approximation is saved next to it as `<file>.approx.json`.
        #[arg(long, default_value = "trace.bin")]
        out: PathBuf,
    },
    /// Apply the control variates to a saved trace.
    Estimate {
        #[arg(long)]
        trace: PathBuf,
        /// Defaults to `<trace>.approx.json`.
        #[arg(long)]
        approx: Option<PathBuf>,
        /// `G0` parameters from `fit-g0`; defaults to the published values.
        #[arg(long)]
        g0: Option<PathBuf>,
        /// `all` or comma-separated 0-based indices.
        #[arg(long, default_value = "all")]
        coords: String,
        #[arg(long)]
        json: bool,
        /// Also write the per-coordinate reports as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Replicated variance-reduction experiment.
    Experiment {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        json: bool,
        /// Write running estimates of this coordinate along the first replicate.
        #[arg(long)]
        series: Option<usize>,
        #[arg(long, value_enum, default_value = "cv")]
        series_kind: SeriesArg,
    },
    /// Refit the `G0` parameters on a standard Gaussian reference chain.
    FitG0 {
        #[arg(long, value_enum)]
        algorithm: AlgArg,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 10_000)]
        burn_in: usize,
        /// Fixed `c^2`; by default the sampler's usual step (tuned for MALA).
        #[arg(long)]
        step2: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Start from a previous fit instead of the published values.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
        #[arg(long, default_value = "g0.json")]
        out: PathBuf,
    },
    /// List the bundled logistic regression datasets.
    Datasets {
        /// Load each one, check its shape and fit the MLE.
        #[arg(long)]
        verify: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgArg {
    Rwm,
    Mala,
}

impl From<AlgArg> for Algorithm {
    fn from(a: AlgArg) -> Self {
        match a {
            AlgArg::Rwm => Algorithm::Rwm,
            AlgArg::Mala => Algorithm::Mala,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SeriesArg {
    Ergodic,
    Cv,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetKind {
    Gaussian,
    Mixture,
    Logistic,
    Sv,
}

/// Experiment settings: a config file or preset, then flag overrides.
#[derive(Args)]
struct RunArgs {
    /// TOML experiment description.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset, e.g. `gaussian-rwm-d2-n1000` or `sv-N50-n10000`.
    #[arg(long)]
    preset: Option<String>,
    /// Full replicate counts and chain lengths for presets.
    #[arg(long)]
    paper_scale: bool,

    #[arg(long, value_enum)]
    target: Option<TargetKind>,
    #[arg(long)]
    dim: Option<usize>,
    /// Mixture mean separation.
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    dataset: Option<Dataset>,
    /// Number of SV observations.
    #[arg(long)]
    n_obs: Option<usize>,
    /// Seed for randomly generated targets (mixture covariance, SV data).
    #[arg(long)]
    target_seed: Option<u64>,

    #[arg(long, value_enum)]
    algorithm: Option<AlgArg>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    /// `all` or comma-separated 0-based indices.
    #[arg(long)]
    coords: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    step2: Option<f64>,
    /// `G0` parameters from `fit-g0`.
    #[arg(long)]
    g0: Option<PathBuf>,

    #[arg(long)]
    report_json: Option<PathBuf>,
    #[arg(long)]
    report_text: Option<PathBuf>,
    #[arg(long)]
    estimates_csv: Option<PathBuf>,
}

fn parse_coords(s: &str) -> Result<Coords> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(Coords::All);
    }
    let v = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().with_context(|| format!("bad coordinate {t:?}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(Coords::List(v))
}

fn load_g0(path: &Path) -> Result<G0Params> {
    Ok(G0Fit::load(path).with_context(|| format!("reading G0 fit {}", path.display()))?.params)
}

impl RunArgs {
    fn target_from_flags(&self, base: Option<&TargetSpec>) -> Result<Option<TargetSpec>> {
        let tweaks = self.dim.is_some()
            || self.h.is_some()
            || self.dataset.is_some()
            || self.n_obs.is_some()
            || self.target_seed.is_some();
        let kind = match (self.target, base) {
            (Some(k), _) => k,
            // field flags alone adjust the configured target
            (None, Some(b)) if tweaks => match b {
                TargetSpec::Gaussian { .. } => TargetKind::Gaussian,
                TargetSpec::Mixture { .. } => TargetKind::Mixture,
                TargetSpec::Logistic { .. } => TargetKind::Logistic,
                TargetSpec::Sv { .. } => TargetKind::Sv,
            },
            _ => return Ok(None),
        };
        let need = |name: &str| anyhow::anyhow!("--{name} is required for this target");
        let t = match (kind, base) {
            (TargetKind::Gaussian, b) => {
                let d0 = match b {
                    Some(TargetSpec::Gaussian { d }) => Some(*d),
                    _ => None,
                };
                TargetSpec::Gaussian {
                    d: self.dim.or(d0).ok_or_else(|| need("dim"))?,
                }
            }
            (TargetKind::Mixture, b) => {
                let (d0, h0, s0) = match b {
                    Some(TargetSpec::Mixture { d, h, seed }) => (Some(*d), Some(*h), *seed),
                    _ => (None, None, 0),
                };
                TargetSpec::Mixture {
                    d: self.dim.or(d0).ok_or_else(|| need("dim"))?,
                    h: self.h.or(h0).ok_or_else(|| need("h"))?,
                    seed: self.target_seed.unwrap_or(s0),
                }
            }
            (TargetKind::Logistic, b) => {
                let ds0 = match b {
                    Some(TargetSpec::Logistic { dataset }) => Some(*dataset),
                    _ => None,
                };
                TargetSpec::Logistic {
                    dataset: self.dataset.or(ds0).ok_or_else(|| need("dataset"))?,
                }
            }
            (TargetKind::Sv, b) => {
                let (n0, s0) = match b {
                    Some(TargetSpec::Sv { n_obs, seed }) => (Some(*n_obs), *seed),
                    _ => (None, 0),
                };
                TargetSpec::Sv {
                    n_obs: self.n_obs.or(n0).ok_or_else(|| need("n-obs"))?,
                    seed: self.target_seed.unwrap_or(s0),
                }
            }
        };
        Ok(Some(t))
    }

    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = if let Some(path) = &self.config {
            Some(ExperimentSpec::from_path(path).with_context(|| format!("reading config {}", path.display()))?)
        } else if let Some(name) = &self.preset {
            let scale = if self.paper_scale { Scale::Paper } else { Scale::Desk };
            Some(preset(name, scale)?)
        } else {
            None
        };
        let target = self.target_from_flags(spec.as_ref().map(|s| &s.target))?;
        let mut spec = match (spec.take(), target) {
            (Some(mut s), Some(t)) => {
                s.target = t;
                s
            }
            (Some(s), None) => s,
            (None, Some(t)) => {
                let alg = self.algorithm.map(Algorithm::from).unwrap_or(Algorithm::Rwm);
                ExperimentSpec::new(t, alg, 10_000, 50)
            }
            (None, None) => bail!("give --config, --preset or --target"),
        };
        if let Some(a) = self.algorithm {
            let a = Algorithm::from(a);
            if a != spec.algorithm {
                spec.algorithm = a;
                // configured G0 belongs to the other sampler
                spec.g0 = None;
            }
        }
        if let Some(v) = self.n {
            spec.n = v;
        }
        if let Some(v) = self.burn_in {
            spec.burn_in = v;
        }
        if let Some(v) = self.replicates {
            spec.replicates = v;
        }
        if let Some(c) = &self.coords {
            spec.coords = parse_coords(c)?;
        }
        if let Some(v) = self.seed {
            spec.seed = v;
        }
        if let Some(v) = self.step2 {
            spec.step2 = Some(v);
        }
        if let Some(p) = &self.g0 {
            spec.g0 = Some(load_g0(p)?);
        }
        let out = &mut spec.output;
        if self.report_json.is_some() {
            out.report_json = self.report_json.clone();
        }
        if self.report_text.is_some() {
            out.report_text = self.report_text.clone();
        }
        if self.estimates_csv.is_some() {
            out.estimates_csv = self.estimates_csv.clone();
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn resolve(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

fn is_csv(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn sidecar(trace: &Path) -> PathBuf {
    let mut s = trace.as_os_str().to_owned();
    s.push(".approx.json");
    PathBuf::from(s)
}

fn cmd_sample(dir: &Path, run: &RunArgs, out: &Path) -> Result<()> {
    let spec = run.spec()?;
    let prepared = prepare_target(&spec.target)?;
    let proposal = spec.proposal(prepared.approx.dim());
    let trace = run_chain(prepared.target.as_ref(), &prepared.approx, &proposal, spec.n, spec.burn_in, spec.seed)?;
    std::fs::create_dir_all(dir)?;
    let out = resolve(dir, out);
    if is_csv(&out) {
        write_trace_csv(&trace, &out)?;
    } else {
        write_trace(&trace, &out)?;
    }
    let approx_path = sidecar(&out);
    prepared.approx.save_json(&approx_path)?;
    println!(
        "{} | {} | n={} c2={:.5} acceptance={:.3}",
        spec.target.describe(),
        spec.algorithm,
        trace.len(),
        trace.step2,
        trace.acceptance_rate()
    );
    println!("trace  {}", out.display());
    println!("approx {}", approx_path.display());
    Ok(())
}

fn print_cv_table(reports: &[CvReport]) {
    println!(
        "{:>5}  {:>13}  {:>13}  {:>9}  {:>8}",
        "coord", "plain mean", "cv mean", "theta", "corr"
    );
    for r in reports {
        println!(
            "{:>5}  {:>13.6e}  {:>13.6e}  {:>9.4}{}  {:>8.4}",
            r.coord,
            r.plain_mean,
            r.cv_mean,
            r.theta,
            if r.theta_fallback { "*" } else { " " },
            r.corr_cv_f
        );
    }
    if reports.iter().any(|r| r.theta_fallback) {
        println!("* degenerate coefficient denominator; theta set to 0");
    }
}

fn cmd_estimate(
    dir: &Path,
    trace_path: &Path,
    approx: Option<&Path>,
    g0: Option<&Path>,
    coords: &str,
    json: bool,
    csv: Option<&Path>,
) -> Result<()> {
    let trace = if is_csv(trace_path) {
        read_trace_csv(trace_path)
    } else {
        read_trace(trace_path)
    }
    .with_context(|| format!("reading trace {}", trace_path.display()))?;
    let approx_path = approx.map(Path::to_path_buf).unwrap_or_else(|| sidecar(trace_path));
    let approx = GaussianApprox::load_json(&approx_path)
        .with_context(|| format!("reading approximation {}", approx_path.display()))?;
    let params = match g0 {
        Some(p) => load_g0(p)?,
        None => G0Params::table(trace.kind),
    };
    let coords = parse_coords(coords)?.resolve(trace.dim())?;
    let reports = estimate(&trace, &approx, &params, &coords)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
    } else {
        println!("{} trace, n={}, c2={:.5}", trace.kind, trace.len(), trace.step2);
        print_cv_table(&reports);
    }
    if let Some(p) = csv {
        std::fs::create_dir_all(dir)?;
        let p = resolve(dir, p);
        CvReport::write_csv(&reports, std::fs::File::create(&p)?)?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_experiment(dir: &Path, run: &RunArgs, json: bool, series: Option<usize>, kind: SeriesArg) -> Result<()> {
    let spec = run.spec()?;
    let prepared = prepare_target(&spec.target)?;
    let report = run_experiment_on(&spec, &prepared)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_text());
    }
    let mut written = Vec::new();
    if spec.output != OutputSpec::default() || series.is_some() {
        std::fs::create_dir_all(dir)?;
    }
    written.extend(report.write_outputs(&spec.output, dir)?);
    if let Some(j) = series {
        let (which, tag) = match kind {
            SeriesArg::Ergodic => (SeriesKind::Ergodic, "ergodic"),
            SeriesArg::Cv => (SeriesKind::Cv, "cv"),
        };
        let path = dir.join(format!("series_{tag}_{j}.csv"));
        emit_trace_series(&spec, &prepared, which, j, &path)?;
        written.push(path);
    }
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_fit_g0(
    dir: &Path,
    alg: Algorithm,
    d: usize,
    n: usize,
    burn_in: usize,
    step2: Option<f64>,
    seed: u64,
    init: Option<&Path>,
    max_iter: usize,
    out: &Path,
) -> Result<()> {
    let init = match init {
        Some(p) => load_g0(p)?,
        None => G0Params::table(alg),
    };
    let opts = FitOptions {
        n,
        burn_in,
        bfgs: BfgsOptions {
            max_iter,
            ..Default::default()
        },
    };
    let fit = fit_g0(alg, d, step2, seed, &init, &opts)?;
    std::fs::create_dir_all(dir)?;
    let out = resolve(dir, out);
    fit.save(&out)?;
    let p = fit.params;
    println!("{} d={} c2={:.5} n={} seed={}", fit.algorithm, fit.d, fit.c2, fit.n, fit.seed);
    println!(
        "loss {:.6e} (start {:.6e}), {} iterations{}",
        fit.loss,
        fit.init_loss,
        fit.iterations,
        if fit.converged { "" } else { ", not converged" }
    );
    println!(
        "b0={:.4} b1={:.4} b2={:.4} c0={:.4} c1={:.4} c2={:.4}",
        p.b0, p.b1, p.b2, p.c0, p.c1, p.c2
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_datasets(verify: bool) -> Result<()> {
    println!("{:<12} {:>3} {:>5}  {}", "name", "d", "N", if verify { "status" } else { "" });
    let mut failed = false;
    for ds in Dataset::ALL {
        let (d, n) = ds.expected_shape();
        if !verify {
            println!("{:<12} {:>3} {:>5}", ds.name(), d, n);
            continue;
        }
        let status = match ds.load() {
            Ok(data) if data.dim() != d || data.n() != n => {
                format!("shape {}x{} does not match", data.n(), data.dim())
            }
            Ok(data) => match logistic_mle_cov(&data.standardized()) {
                Ok(fit) => format!("ok (MLE in {} Newton steps)", fit.iterations),
                Err(e) => format!("MLE failed: {e}"),
            },
            Err(e) => format!("load failed: {e}"),
        };
        failed |= !status.starts_with("ok");
        println!("{:<12} {:>3} {:>5}  {}", ds.name(), d, n, status);
    }
    if failed {
        bail!("dataset verification failed");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let dir = &cli.output_dir;
    match &cli.command {
        Command::Sample { run, out } => cmd_sample(dir, run, out),
        Command::Estimate {
            trace,
            approx,
            g0,
            coords,
            json,
            csv,
        } => cmd_estimate(dir, trace, approx.as_deref(), g0.as_deref(), coords, *json, csv.as_deref()),
        Command::Experiment {
            run,
            json,
            series,
            series_kind,
        } => cmd_experiment(dir, run, *json, *series, *series_kind),
        Command::FitG0 {
            algorithm,
            dim,
            n,
            burn_in,
            step2,
            seed,
            init,
            max_iter,
            out,
        } => cmd_fit_g0(
            dir,
            (*algorithm).into(),
            *dim,
            *n,
            *burn_in,
            *step2,
            *seed,
            init.as_deref(),
            *max_iter,
            out,
        ),
        Command::Datasets { verify } => cmd_datasets(*verify),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
