//! `fineformer`: synthetic benchmark generation, training, evaluation, and
//! numerical diagnostics for the desk-scale action recognition models.

mod commands;
mod config;

use std::path::Path;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::commands::Failure;
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "fineformer", version, about = "CNN-Transformer action recognition at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic benchmark dataset
    #[command(name = "gen-data")]
    GenData(RunArgs),
    /// Train the configured model on a generated dataset
    Train(RunArgs),
    /// Evaluate a checkpoint on the test split
    Eval(RunArgs),
    /// Check every primitive and both architectures against finite differences
    Gradcheck(RunArgs),
    /// Text-token attention diagnostic for a trained cross encoder
    #[command(name = "attn-report")]
    AttnReport(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file: key = value lines under [data]/[model]/[train]/[eval]/[paths]
    #[arg(long, value_name = "PATH")]
    config: std::path::PathBuf,
    /// Override one key, e.g. --set train.lr=0.01 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for reports, checkpoints, and the resolved config
    #[arg(long, value_name = "DIR")]
    out: Option<std::path::PathBuf>,
}

fn run(cmd: &Cmd) -> Result<(), Failure> {
    let (args, f): (&RunArgs, fn(&RunConfig, Option<&Path>) -> Result<(), Failure>) = match cmd {
        Cmd::GenData(a) => (a, commands::gen_data),
        Cmd::Train(a) => (a, commands::train_model),
        Cmd::Eval(a) => (a, commands::eval_checkpoint),
        Cmd::Gradcheck(a) => (a, commands::gradient_suite),
        Cmd::AttnReport(a) => (a, commands::attention_report),
    };
    let cfg = RunConfig::load(&args.config, &args.set).map_err(Failure::from)?;
    f(&cfg, args.out.as_deref())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            let first = rendered
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid usage");
            eprintln!("{first} (try 'fineformer --help')");
            return ExitCode::from(1);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
