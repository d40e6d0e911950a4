use mhcv::experiments::VrfReport;
use mhcv::g0_fit::G0Fit;
use mhcv::poisson_cv::CvReport;
use std::path::Path;
use std::process::{Command, Output};

fn mhcv(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_mhcv"))
        .arg("--output-dir")
        .arg(dir)
        .args(args)
        .env_remove("MHCV_OUTPUT_DIR")
        .output()
        .expect("binary runs");
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mhcv(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const CHAIN: [&str; 12] = [
    "--target", "gaussian", "--dim", "3", "--algorithm", "mala", "--n", "600", "--burn-in", "200", "--seed", "3",
];

#[test]
fn sample_then_estimate_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for file in ["t.bin", "t.csv"] {
        let mut args = vec!["sample"];
        args.extend(CHAIN);
        args.extend(["--out", file]);
        ok(dir.path(), &args);
        assert!(dir.path().join(format!("{file}.approx.json")).exists());
        let trace = dir.path().join(file);
        let json = ok(dir.path(), &["estimate", "--trace", trace.to_str().unwrap(), "--json", "--csv", "cv.csv"]);
        let r: Vec<CvReport> = serde_json::from_str(&json).unwrap();
        assert_eq!(r.len(), 3);
        assert!(dir.path().join("cv.csv").exists());
        reports.push(r);
    }
    assert_eq!(reports[0], reports[1]);

    let trace = dir.path().join("t.bin");
    let text = ok(dir.path(), &["estimate", "--trace", trace.to_str().unwrap(), "--coords", "0,2"]);
    assert!(text.contains("mala trace, n=600"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn experiment_from_preset_writes_report_and_series() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "experiment", "--preset", "gaussian-rwm-d2-n1000", "--replicates", "3", "--n", "400", "--burn-in", "100",
            "--report-json", "r.json", "--report-text", "r.txt", "--estimates-csv", "e.csv", "--series", "1",
            "--series-kind", "ergodic",
        ],
    );
    let report: VrfReport = serde_json::from_reader(std::fs::File::open(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report.replicates.len(), 3);
    assert_eq!(report.spec.n, 400);
    assert!(std::fs::read_to_string(dir.path().join("r.txt")).unwrap().contains("VRF range"));
    assert!(dir.path().join("e.csv").exists());
    let series = std::fs::read_to_string(dir.path().join("series_ergodic_1.csv")).unwrap();
    assert_eq!(series.lines().count(), 401);
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(
        &config,
        "algorithm = \"rwm\"\nn = 300\nburn_in = 100\nreplicates = 2\ncoords = [0]\nseed = 1\n\
         [target]\nkind = \"mixture\"\nd = 3\nh = 2.0\nseed = 4\n",
    )
    .unwrap();
    let json = ok(dir.path(), &["experiment", "--config", config.to_str().unwrap(), "--seed", "9", "--json"]);
    let report: VrfReport = serde_json::from_str(&json).unwrap();
    assert_eq!(report.spec.seed, 9);
    assert_eq!(report.coords.len(), 1);
    assert_eq!(report.replicates[1].seed, 10);
    assert_eq!(report.dim, 3);
}

#[test]
fn fitted_parameters_feed_the_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(
        dir.path(),
        &["fit-g0", "--algorithm", "mala", "--n", "2000", "--burn-in", "500", "--max-iter", "3", "--out", "g.json"],
    );
    assert!(stdout.contains("loss"));
    let fit = G0Fit::load(&dir.path().join("g.json")).unwrap();
    assert!(fit.loss <= fit.init_loss);
    assert_eq!(fit.d, 2);

    let mut args = vec!["sample"];
    args.extend(CHAIN);
    ok(dir.path(), &args);
    let trace = dir.path().join("trace.bin");
    let g0 = dir.path().join("g.json");
    let json = ok(dir.path(), &["estimate", "--trace", trace.to_str().unwrap(), "--g0", g0.to_str().unwrap(), "--json"]);
    assert_eq!(serde_json::from_str::<Vec<CvReport>>(&json).unwrap().len(), 3);
}

#[test]
fn output_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mhcv"))
        .args(["sample", "--target", "gaussian", "--dim", "2", "--algorithm", "rwm", "--n", "50", "--burn-in", "10"])
        .env("MHCV_OUTPUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("trace.bin").exists());
}

#[test]
fn datasets_verify() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["datasets", "--verify"]);
    for name in ["ripley", "pima", "heart", "australian", "german"] {
        assert!(text.lines().any(|l| l.starts_with(name) && l.contains("ok")), "{text}");
    }
}

#[test]
fn bad_invocations_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = mhcv(dir.path(), &["experiment", "--preset", "nonsense"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));
    let out = mhcv(dir.path(), &["experiment", "--config", "a.toml", "--preset", "sv-N50-n10000"]);
    assert!(!out.status.success());
    let out = mhcv(dir.path(), &["experiment", "--target", "gaussian", "--dim", "2", "--replicates", "1", "--n", "100"]);
    assert!(!out.status.success());
}
