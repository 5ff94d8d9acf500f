//! `frc`: batch front-end for risk-curve estimation and sensitivity analysis.
//!
//! Every command reads one JSON run configuration, applies command-line
//! overrides (flag > file > default), writes `<command>.resolved.json` and
//! then CSV tables with JSON metadata sidecars into `output_dir`.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use commands::{Command, Run};
use config::{parse_assignment, RunConfig};
use error::{CliError, EXIT_CONFIG};

#[derive(Parser, Debug)]
#[command(name = "frc", version, about = "Functional risk curves with Gaussian-process metamodels")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; every command derives its own sub-seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Threshold `s` on the output.
    #[arg(long, global = true, allow_negative_numbers = true)]
    threshold: Option<f64>,

    /// Override any configuration key, e.g. `--set sobol.n_pf=2000`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a design of experiments (and evaluate the analytic model if configured).
    SimulateDesign {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_parser = ["lhs", "mc"])]
        scheme: Option<String>,
    },
    /// Fit the kriging metamodel to a dataset.
    FitGp {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        multistarts: Option<usize>,
    },
    /// Risk curve with double Monte-Carlo uncertainty bands.
    Curve {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        n_clt: Option<usize>,
    },
    /// Classical Berens / Box-Cox curve from the dataset.
    Berens {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_parser = ["log", "boxcox"])]
        transform: Option<String>,
    },
    /// Sobol' indices of the risk curve.
    Sobol {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_parser = ["aggregated", "pointwise", "inverse"])]
        flavor: Option<String>,
        /// Level of the inverse flavor.
        #[arg(long)]
        p: Option<f64>,
        /// Abscissa of the pointwise flavor.
        #[arg(long, allow_negative_numbers = true)]
        a: Option<f64>,
        #[arg(long)]
        n_pf: Option<usize>,
        #[arg(long)]
        bootstrap: Option<usize>,
    },
    /// Perturbed-law indices.
    Pli {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Perturbed input (0-based); repeat for several.
        #[arg(long = "input")]
        inputs: Vec<usize>,
        #[arg(long, value_parser = ["mean", "variance"])]
        moment: Option<String>,
        #[arg(long, allow_negative_numbers = true)]
        a: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_parser = ["delta", "bootstrap"])]
        ci: Option<String>,
    },
    /// Closed-form reference values for the analytic model.
    Oracle,
}

fn push<T: serde::Serialize>(out: &mut Vec<(String, Value)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push((key.to_string(), json!(v)));
    }
}

impl Cli {
    fn overrides(&self) -> Result<Vec<(String, Value)>, CliError> {
        let mut o = self.set.iter().map(|s| parse_assignment(s)).collect::<Result<Vec<_>, _>>()?;
        push(&mut o, "seed", self.seed);
        push(&mut o, "output_dir", self.output_dir.as_ref());
        push(&mut o, "threshold", self.threshold);
        match &self.command {
            Cmd::SimulateDesign { n, scheme } => {
                push(&mut o, "design.n", *n);
                push(&mut o, "design.scheme", scheme.as_ref());
            }
            Cmd::FitGp { dataset, model, multistarts } => {
                push(&mut o, "dataset", dataset.as_ref());
                push(&mut o, "model", model.as_ref());
                push(&mut o, "gp.multistarts", *multistarts);
            }
            Cmd::Curve { model, n, m, n_clt } => {
                push(&mut o, "model", model.as_ref());
                push(&mut o, "curve.n", *n);
                push(&mut o, "curve.m", *m);
                push(&mut o, "curve.n_clt", *n_clt);
            }
            Cmd::Berens { dataset, transform } => {
                push(&mut o, "dataset", dataset.as_ref());
                push(&mut o, "berens.transform", transform.as_ref().map(|k| json!({ "kind": k })));
            }
            Cmd::Sobol { model, flavor, p, a, n_pf, bootstrap } => {
                push(&mut o, "model", model.as_ref());
                push(&mut o, "sobol.flavor", flavor.as_ref());
                push(&mut o, "sobol.p", *p);
                push(&mut o, "sobol.a", *a);
                push(&mut o, "sobol.n_pf", *n_pf);
                push(&mut o, "sobol.bootstrap", *bootstrap);
            }
            Cmd::Pli { model, inputs, moment, a, n, ci } => {
                push(&mut o, "model", model.as_ref());
                push(&mut o, "pli.inputs", (!inputs.is_empty()).then_some(inputs));
                push(&mut o, "pli.moment", moment.as_ref());
                if a.is_some() {
                    push(&mut o, "pli.a", *a);
                    o.push(("pli.a_grid".into(), Value::Null));
                }
                push(&mut o, "pli.n", *n);
                push(&mut o, "pli.ci", ci.as_ref());
            }
            Cmd::Oracle => {}
        }
        Ok(o)
    }

    fn command(&self) -> Command {
        match self.command {
            Cmd::SimulateDesign { .. } => Command::SimulateDesign,
            Cmd::FitGp { .. } => Command::FitGp,
            Cmd::Curve { .. } => Command::Curve,
            Cmd::Berens { .. } => Command::Berens,
            Cmd::Sobol { .. } => Command::Sobol,
            Cmd::Pli { .. } => Command::Pli,
            Cmd::Oracle => Command::Oracle,
        }
    }
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let config = RunConfig::load(cli.config.as_deref(), &cli.overrides()?)?;
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::config("--threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::config("--threads", e))?;
    }
    Run::new(cli.command(), config, rayon::current_num_threads()).execute()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match run(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
