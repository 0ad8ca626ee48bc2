//! Command-line surface: `fit` reads a CSV dataset and writes the fit as
//! JSON; `simulate` runs a scenario replication study and writes the
//! three-estimator summary table. Exit codes: 0 success, 1 input/run error,
//! 2 non-converged fit (result still written).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::em::{bootstrap_se, run_em, BootstrapSe, EMConfig};
use crate::error::{Error, Result};
use crate::model::{validate_dataset, Dataset, DesignSpec, FitResult, SubjectRecord};
use crate::sim::{run_replications, write_summary_csv, ScenarioSpec, StudyResult};

#[derive(Debug, Parser)]
#[command(
    name = "coxiv",
    about = "Instrumental-variable hazard-ratio estimation for the Cox model \
             with a correlated frailty, fit by Monte Carlo EM",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the estimator to a CSV dataset
    /// (columns: time,status,treatment,x1..xp,z1..zK).
    Fit(FitArgs),
    /// Run a simulation scenario and summarize the three estimators.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Frailty draws per subject (B).
    #[arg(long = "B", value_parser = clap::value_parser!(u64).range(1..))]
    b: Option<u64>,
    /// RNG seed; the seed fully determines all stochastic behavior.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Convergence tolerance on the max-norm parameter change.
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,
    /// EM iteration cap.
    #[arg(long = "max-iter", default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    max_iter: u64,
    /// Also update sigma_u each iteration (not identified; emits a warning).
    #[arg(long = "estimate-sigma-u", default_value_t = false)]
    estimate_sigma_u: bool,
    /// Redraw the frailty samples every iteration instead of freezing them.
    #[arg(long = "fresh-draws", default_value_t = false)]
    fresh_draws: bool,
    /// Output file path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format.
    #[arg(long, value_parser = ["json", "csv"], default_value = "json")]
    format: String,
    /// Worker threads for replications (default: all cores).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: Option<u64>,
}

impl CommonArgs {
    fn em_config(&self, default_b: u64) -> Result<EMConfig> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter("epsilon must be positive".into()));
        }
        Ok(EMConfig {
            draws_per_subject: self.b.unwrap_or(default_b) as usize,
            epsilon: self.epsilon,
            max_iter: self.max_iter as usize,
            frozen_draws: !self.fresh_draws,
            estimate_sigma_u: self.estimate_sigma_u,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Input CSV path.
    input: PathBuf,
    /// Number of bootstrap resamples for standard errors (0 = none).
    #[arg(long, default_value_t = 0)]
    bootstrap: u64,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario id (1..=7).
    #[arg(long)]
    scenario: u32,
    /// Sample size per replication.
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Number of replications.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    reps: u64,
    #[command(flatten)]
    common: CommonArgs,
}

/// Parses `time,status,treatment,x1..xp,z1..zK` with a mandatory header.
pub fn read_csv_dataset<P: AsRef<Path>>(path: P, design_out: &mut Option<DesignSpec>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let mut columns = headers.iter();
    for expected in ["time", "status", "treatment"] {
        match columns.next() {
            Some(h) if h.eq_ignore_ascii_case(expected) => {}
            _ => {
                return Err(Error::InputSchema(format!(
                    "missing required column `{expected}` (header must start with time,status,treatment)"
                )))
            }
        }
    }
    let mut p = 0usize;
    let mut k = 0usize;
    for h in columns {
        let h = h.trim();
        if let Some(idx) = h.strip_prefix('x').and_then(|s| s.parse::<usize>().ok()) {
            if k > 0 {
                return Err(Error::InputSchema(
                    "covariate columns x1..xp must precede instrument columns z1..zK".into(),
                ));
            }
            if idx != p + 1 {
                return Err(Error::InputSchema(format!(
                    "covariate columns must be consecutive, expected x{} found {h}",
                    p + 1
                )));
            }
            p += 1;
        } else if let Some(idx) = h.strip_prefix('z').and_then(|s| s.parse::<usize>().ok()) {
            if idx != k + 1 {
                return Err(Error::InputSchema(format!(
                    "instrument columns must be consecutive, expected z{} found {h}",
                    k + 1
                )));
            }
            k += 1;
        } else {
            return Err(Error::InputSchema(format!("unrecognized column `{h}`")));
        }
    }
    if k == 0 {
        return Err(Error::InputSchema(
            "at least one instrument column z1 is required".into(),
        ));
    }

    let parse_field = |record: usize, field: &str, raw: &str| -> Result<f64> {
        raw.trim().parse::<f64>().map_err(|_| {
            Error::InputSchema(format!("record {record}: `{field}` value `{raw}` is not numeric"))
        })
    };
    let parse_binary = |record: usize, field: &str, raw: &str| -> Result<bool> {
        match raw.trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::InputSchema(format!(
                "record {record}: `{field}` must be 0 or 1, got `{other}`"
            ))),
        }
    };

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        if row.len() != 3 + p + k {
            return Err(Error::InputSchema(format!(
                "record {i}: expected {} fields, found {}",
                3 + p + k,
                row.len()
            )));
        }
        let time = parse_field(i, "time", &row[0])?;
        let event = parse_binary(i, "status", &row[1])?;
        let treatment = parse_binary(i, "treatment", &row[2])?;
        let covariates: Vec<f64> = (0..p)
            .map(|j| parse_field(i, "x", &row[3 + j]))
            .collect::<Result<_>>()?;
        let instruments: Vec<f64> = (0..k)
            .map(|j| parse_field(i, "z", &row[3 + p + j]))
            .collect::<Result<_>>()?;
        records.push(SubjectRecord {
            time,
            event,
            treatment,
            covariates,
            instruments,
        });
    }
    let design = DesignSpec::default_for(p, k);
    let dataset = validate_dataset(records, &design)?;
    *design_out = Some(design);
    Ok(dataset)
}

#[derive(Serialize)]
struct FitOutput<'a> {
    alpha: &'a [f64],
    beta: &'a [f64],
    rho: f64,
    sigma_u: f64,
    hazard_ratio: f64,
    iterations: usize,
    converged: bool,
    final_observed_loglik: f64,
    draws_per_subject: usize,
    frozen_draws: bool,
    baseline: BaselineOut<'a>,
    bootstrap_se: Option<&'a BootstrapSe>,
    warnings: &'a [String],
}

#[derive(Serialize)]
struct BaselineOut<'a> {
    event_times: &'a [f64],
    jumps: &'a [f64],
}

fn render_fit_json(fit: &FitResult, se: Option<&BootstrapSe>) -> String {
    let out = FitOutput {
        alpha: &fit.parameters.alpha,
        beta: &fit.parameters.beta,
        rho: fit.parameters.rho,
        sigma_u: fit.parameters.sigma_u,
        hazard_ratio: fit.hazard_ratio,
        iterations: fit.iterations,
        converged: fit.converged,
        final_observed_loglik: fit.final_observed_loglik,
        draws_per_subject: fit.draws_per_subject,
        frozen_draws: fit.frozen_draws,
        baseline: BaselineOut {
            event_times: fit.baseline.event_times(),
            jumps: fit.baseline.jumps(),
        },
        bootstrap_se: se,
        warnings: &fit.warnings,
    };
    serde_json::to_string_pretty(&out).expect("serializable") + "\n"
}

fn write_output(out: &Option<PathBuf>, content: &str) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, content)?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(content.as_bytes())?;
        }
    }
    Ok(())
}

/// Plain-text table mirroring the published row layout.
pub fn render_study_table(study: &StudyResult) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "Scenario #{} (n = {}, reps = {}, truth HR = {:.3})\n",
        study.scenario, study.n, study.reps, study.truth_hazard_ratio
    ));
    s.push_str(&format!(
        "{:<22}{:>16}{:>22}{:>10}{:>10}{:>14}\n",
        "Method", "Mean(SD)", "Median(Range)", "RMSE", "failed", "nonconverged"
    ));
    for row in &study.summaries {
        s.push_str(&format!(
            "{:<22}{:>16}{:>22}{:>10.3}{:>10}{:>14}\n",
            row.estimator,
            format!("{:.3}({:.3})", row.mean, row.sd),
            format!("{:.3}({:.2}-{:.2})", row.median, row.min, row.max),
            row.rmse,
            row.n_failed,
            row.n_nonconverged,
        ));
    }
    s
}

fn cmd_fit(args: &FitArgs) -> Result<i32> {
    let config = args.common.em_config(100)?;
    let mut design = None;
    let dataset = read_csv_dataset(&args.input, &mut design)?;
    let design = design.expect("set by read_csv_dataset");
    let fit = run_em(&dataset, &design, &config)?;
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
    let se = if args.bootstrap >= 2 {
        Some(bootstrap_se(&dataset, &design, &config, args.bootstrap as usize)?)
    } else {
        None
    };
    if args.common.format == "csv" {
        return Err(Error::InputSchema(
            "fit output is JSON only (baseline jumps nest poorly in CSV)".into(),
        ));
    }
    write_output(&args.common.out, &render_fit_json(&fit, se.as_ref()))?;
    Ok(if fit.converged { 0 } else { 2 })
}

fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    // published defaults: B = 40 at n = 200, B = 100 at larger n
    let default_b = if args.n <= 200 { 40 } else { 100 };
    let config = args.common.em_config(default_b)?;
    let spec = ScenarioSpec::from_id(args.scenario, args.n as usize)?;
    let study = run_replications(&spec, args.reps as usize, &config)?;
    let rendered = match args.common.format.as_str() {
        "csv" => {
            let mut buf = Vec::new();
            write_summary_csv(&mut buf, &study)?;
            String::from_utf8(buf).expect("csv is utf8")
        }
        _ => serde_json::to_string_pretty(&study).expect("serializable") + "\n",
    };
    match &args.common.out {
        Some(path) => {
            std::fs::write(path, &rendered)?;
            print!("{}", render_study_table(&study));
        }
        None => {
            print!("{}", render_study_table(&study));
            print!("{rendered}");
        }
    }
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<i32> {
    let jobs = match &cli.command {
        Command::Fit(args) => args.common.jobs,
        Command::Simulate(args) => args.common.jobs,
    };
    let run = move || match &cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match jobs {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads as usize)
            .build()
            .map_err(|e| Error::InvalidParameter(e.to_string()))?
            .install(run),
        None => run(),
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version with success exit codes
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn csv_schema_round_trip() {
        let f = write_csv(
            "time,status,treatment,x1,z1\n1.0,1,1,0.5,2.0\n2.0,0,0,-0.5,0.7\n3.0,1,0,0.1,1.1\n",
        );
        let mut design = None;
        let ds = read_csv_dataset(f.path(), &mut design).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.p(), 1);
        assert_eq!(ds.k(), 1);
        assert!(design.is_some());
    }

    #[test]
    fn csv_missing_status_column_is_named() {
        let f = write_csv("time,treatment,x1,z1\n1.0,1,0.5,2.0\n");
        let mut design = None;
        let err = read_csv_dataset(f.path(), &mut design).unwrap_err();
        assert!(err.to_string().contains("status"), "{err}");
    }

    #[test]
    fn csv_rejects_non_binary_status() {
        let f = write_csv("time,status,treatment,z1\n1.0,2,1,0.5\n");
        let mut design = None;
        let err = read_csv_dataset(f.path(), &mut design).unwrap_err();
        assert!(err.to_string().contains("status"), "{err}");
    }

    #[test]
    fn csv_requires_instrument_column() {
        let f = write_csv("time,status,treatment,x1\n1.0,1,1,0.5\n");
        let mut design = None;
        let err = read_csv_dataset(f.path(), &mut design).unwrap_err();
        assert!(err.to_string().contains("instrument"), "{err}");
    }

    #[test]
    fn unknown_flags_are_rejected() {
        let code = run(["coxiv", "simulate", "--scenario", "1", "--bogus", "3"]);
        assert_eq!(code, 1);
    }

    #[test]
    fn invalid_scenario_exits_one() {
        let code = run(["coxiv", "simulate", "--scenario", "8", "--reps", "1", "--n", "30"]);
        assert_eq!(code, 1);
    }
}
