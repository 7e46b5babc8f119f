use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pep_core::commands::{self, Method};
use pep_core::config::RunConfig;
use pep_core::data::DatasetDescriptor;
use pep_core::{Error, SplitTag};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "pep", version, about = "Parameter ensembling by perturbation")]
struct Cli {
    /// Config file (`key = value` with `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.epochs=30`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    output: Option<String>,
    /// `idx:<images>,<labels>` or `blobs:K,n,D,spread,seed`.
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct MethodArgs {
    #[arg(long)]
    method: String,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    temperature: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write one checkpoint per epoch plus metrics.csv.
    Train {
        #[arg(long)]
        epochs: Option<String>,
    },
    /// Golden-section search for sigma* on the validation split.
    PepSearch {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sigma_low: Option<String>,
        #[arg(long)]
        sigma_high: Option<String>,
        #[arg(long)]
        iterations: Option<String>,
        #[arg(long)]
        members: Option<String>,
    },
    /// Calibration metrics and reliability bins for one method.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        method: MethodArgs,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Curvature quantities and the predicted, direct and observed gains.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sigma: Option<String>,
        #[arg(long, default_value = "validation")]
        split: String,
    },
    /// Overfit gap against PEP gain for every epoch checkpoint.
    OverfitProbe {
        /// Defaults to `<output>/checkpoints`.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Symmetrized KLD between in- and out-of-distribution confidences.
    Ood {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        method: MethodArgs,
        #[arg(long)]
        in_dataset: Option<String>,
        #[arg(long)]
        out_dataset: Option<String>,
    },
    /// Baseline, temperature scaling and PEP side by side on the test split.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
    exit_code: u8,
}

fn split_tag(s: &str) -> Result<SplitTag, Error> {
    SplitTag::parse(s).ok_or_else(|| Error::Config {
        key: "split".into(),
        detail: format!("expected train, validation or test, got `{s}`"),
    })
}

fn apply(config: &mut RunConfig, pairs: &[(&str, &Option<String>)]) -> Result<(), Error> {
    for (key, value) in pairs {
        if let Some(v) = value {
            config.set(key, v)?;
        }
    }
    Ok(())
}

fn print<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summaries serialize"));
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for pair in &cli.overrides {
        config.set_pair(pair)?;
    }
    apply(
        &mut config,
        &[
            ("seed", &cli.seed),
            ("output", &cli.output),
            ("data.dataset", &cli.dataset),
        ],
    )?;

    match cli.command {
        Command::Train { epochs } => {
            apply(&mut config, &[("train.epochs", &epochs)])?;
            print(&commands::cmd_train(&config)?.0);
        }
        Command::PepSearch {
            checkpoint,
            sigma_low,
            sigma_high,
            iterations,
            members,
        } => {
            apply(
                &mut config,
                &[
                    ("search.sigma_low", &sigma_low),
                    ("search.sigma_high", &sigma_high),
                    ("search.iterations", &iterations),
                    ("search.members", &members),
                ],
            )?;
            print(&commands::cmd_pep_search(&config, &checkpoint)?);
        }
        Command::Evaluate {
            checkpoint,
            method,
            split,
        } => {
            apply(
                &mut config,
                &[
                    ("perturb.sigma", &method.sigma),
                    ("ts.temperature", &method.temperature),
                ],
            )?;
            let m = Method::resolve(&method.method, &config)?;
            let report = commands::cmd_evaluate(&config, &checkpoint, m, split_tag(&split)?)?;
            print(&report);
        }
        Command::Probe {
            checkpoint,
            sigma,
            split,
        } => {
            apply(&mut config, &[("perturb.sigma", &sigma)])?;
            print(&commands::cmd_probe(&config, &checkpoint, split_tag(&split)?)?);
        }
        Command::OverfitProbe { checkpoints } => {
            let dir = checkpoints.unwrap_or_else(|| commands::checkpoint_dir(&config));
            print(&commands::cmd_overfit_probe(&config, &dir)?.0);
        }
        Command::Ood {
            checkpoint,
            method,
            in_dataset,
            out_dataset,
        } => {
            apply(
                &mut config,
                &[
                    ("perturb.sigma", &method.sigma),
                    ("ts.temperature", &method.temperature),
                ],
            )?;
            let m = Method::resolve(&method.method, &config)?;
            let inside = in_dataset.as_deref().map(DatasetDescriptor::parse).transpose()?;
            let outside = out_dataset.as_deref().map(DatasetDescriptor::parse).transpose()?;
            print(&commands::cmd_ood(
                &config,
                &checkpoint,
                m,
                inside.as_ref(),
                outside.as_ref(),
            )?);
        }
        Command::Report { checkpoint } => {
            print(&commands::cmd_report(&config, &checkpoint)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let body = ErrorBody {
                kind: "usage",
                message: e.to_string().trim().to_string(),
                exit_code: 1,
            };
            eprintln!("{}", serde_json::to_string(&body).expect("error body serializes"));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let body = ErrorBody {
                kind: e.kind(),
                message: e.to_string(),
                exit_code: code,
            };
            eprintln!("{}", serde_json::to_string(&body).expect("error body serializes"));
            ExitCode::from(code)
        }
    }
}
