use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use nalgebra::DMatrix;

use bfdecomp::io::bundle::{load_problem, ProblemBundle};
use bfdecomp::io::report::{read_report, to_json_bytes, write_weights_csv};
use bfdecomp::pipeline::{fit_variances, run, smooth_records, PipelineOptions, SmoothRequest};
use bfdecomp_cli::check::{run_suite, Suite};
use bfdecomp_cli::serve::{serve, AppState};

/// Borrowing-factor decomposition of hierarchical-model fitted values.
#[derive(Parser)]
#[command(name = "bfdecomp", version)]
struct Cli {
    /// CSV data file with a header row.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// JSON model spec.
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also write the dense N x N weight matrix as headerless CSV.
    #[arg(long, global = true, value_name = "PATH")]
    full_weights: Option<PathBuf>,
    /// JSON array of observation indices treated as influential.
    #[arg(long, global = true, value_name = "JSON")]
    points: Option<String>,
    #[arg(long, global = true, default_value_t = 8080)]
    port: u16,
    /// Worker threads; 1 disables the parallel path.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the per-observation report.
    Decompose {
        /// Include the influence section.
        #[arg(long)]
        influence: bool,
    },
    /// Write only the influence section.
    Influence,
    /// Run an oracle suite on the loaded model, or on seeded synthetic
    /// models when no data is given.
    Check {
        #[arg(value_enum)]
        suite: Suite,
    },
    /// Fit the variance parameters by restricted likelihood.
    FitVariance,
    /// Smooth three record fields onto a 50 x 50 grid.
    Smooth {
        #[arg(long)]
        x: String,
        #[arg(long)]
        y: String,
        #[arg(long)]
        value: String,
        /// Read records from an existing report instead of fitting.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Serve the explorer API.
    Serve {
        /// Serve a finished report (static mode).
        #[arg(long, conflicts_with_all = ["data", "spec"])]
        report: Option<PathBuf>,
        /// Fit once and disable recompute.
        #[arg(long = "static")]
        static_mode: bool,
    },
}

impl Cli {
    fn bundle(&self) -> anyhow::Result<ProblemBundle> {
        let (Some(data), Some(spec)) = (&self.data, &self.spec) else {
            bail!(Usage("--data and --spec are required".into()));
        };
        load_problem(data, spec)
            .with_context(|| format!("loading {} with spec {}", data.display(), spec.display()))
    }

    fn points(&self) -> anyhow::Result<Vec<usize>> {
        match &self.points {
            None => Ok(Vec::new()),
            Some(text) => serde_json::from_str(text).map_err(|e| {
                Usage(format!("--points must be a JSON array of indices: {e}")).into()
            }),
        }
    }

    fn options(&self) -> anyhow::Result<PipelineOptions> {
        Ok(PipelineOptions {
            keep_full: self.full_weights.is_some(),
            parallel: self.threads != Some(1),
            influential: self.points()?,
            ..Default::default()
        })
    }

    fn emit(&self, bytes: &[u8]) -> anyhow::Result<()> {
        match &self.out {
            Some(p) => std::fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
            None => Ok(std::io::stdout().write_all(bytes)?),
        }
    }

    fn emit_json<T: serde::Serialize>(&self, value: &T) -> anyhow::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.emit(&bytes)
    }
}

/// Invalid invocation; exits with the validation code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// An oracle disagreed with the engine.
#[derive(Debug)]
struct CheckFailed;

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("oracle check exceeded its tolerance")
    }
}

impl std::error::Error for CheckFailed {}

fn write_full_weights(path: &Path, w: &DMatrix<f64>) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_weights_csv(w, BufWriter::new(file))?;
    Ok(())
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    #[cfg(feature = "parallel")]
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }

    match &cli.command {
        Command::Decompose { influence } => {
            let bundle = cli.bundle()?;
            let opts = PipelineOptions {
                influence: *influence,
                ..cli.options()?
            };
            let out = run(&bundle, &opts)?;
            if let (Some(path), Some(w)) = (&cli.full_weights, &out.weights) {
                write_full_weights(path, w)?;
            }
            cli.emit(&to_json_bytes(&out.report)?)
        }
        Command::Influence => {
            let bundle = cli.bundle()?;
            let opts = PipelineOptions {
                influence: true,
                ..cli.options()?
            };
            let out = run(&bundle, &opts)?;
            if let (Some(path), Some(w)) = (&cli.full_weights, &out.weights) {
                write_full_weights(path, w)?;
            }
            cli.emit_json(&out.report.influence)
        }
        Command::Check { suite } => {
            let given = if cli.data.is_some() || cli.spec.is_some() {
                let bundle = cli.bundle()?;
                let (model, _) = fit_variances(&bundle, &Default::default())?;
                Some((model, bundle.response))
            } else {
                None
            };
            let outcome = run_suite(*suite, given)?;
            cli.emit_json(&outcome)?;
            if !outcome.pass {
                return Err(CheckFailed.into());
            }
            Ok(())
        }
        Command::FitVariance => {
            let bundle = cli.bundle()?;
            let (_, est) = fit_variances(&bundle, &Default::default())?;
            let Some(est) = est else {
                bail!(Usage(
                    "the spec fixes every variance; nothing to fit".into()
                ));
            };
            let params: BTreeMap<&str, f64> =
                est.params.iter().map(|(n, v)| (n.as_str(), *v)).collect();
            cli.emit_json(&serde_json::json!({
                "params": params,
                "log_restricted_likelihood": est.log_restricted_likelihood,
                "iterations": est.iterations,
                "converged": est.converged,
                "warnings": est.warnings,
            }))
        }
        Command::Smooth {
            x,
            y,
            value,
            report,
        } => {
            let request = SmoothRequest {
                x: x.clone(),
                y: y.clone(),
                value: value.clone(),
            };
            let grid = match report {
                Some(path) => smooth_records(&read_report(path)?.records, &request)?,
                None => {
                    let opts = PipelineOptions {
                        smooth: Some(request),
                        ..cli.options()?
                    };
                    let out = run(&cli.bundle()?, &opts)?;
                    out.report.grid.expect("grid was requested")
                }
            };
            cli.emit_json(&grid)
        }
        Command::Serve {
            report,
            static_mode,
        } => {
            let state = match report {
                Some(path) => AppState::from_report(&read_report(path)?)?,
                None => AppState::from_bundle(cli.bundle()?, cli.options()?, !static_mode)?,
            };
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(serve(state, cli.port))?;
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 3;
    }
    match err.downcast_ref::<bfdecomp::Error>() {
        Some(e) if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
