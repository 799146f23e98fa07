mod commands;
mod experiment;
mod manifest;
mod traces;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{
    gen_data, hyperbolicity_cmd, report_cmd, train_qme_cmd, train_rl_cmd, transform_cmd,
    GenDataArgs, HyperbolicityArgs, ReportArgs, TrainQmeArgs, TrainRlArgs, TransformArgs,
};
use experiment::{experiment_cmd, ExperimentArgs};

/// Bad flags or an invalid configuration; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Parser)]
#[command(
    name = "qme",
    version,
    about = "Quantum metric encoding for offline RL"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect an offline pendulum dataset.
    GenData(GenDataArgs),
    /// Fit the encoder circuit to a dataset.
    TrainQme(TrainQmeArgs),
    /// Rewrite a dataset with a baseline or QME transform.
    Transform(TransformArgs),
    /// Train offline agents and record evaluation traces.
    TrainRl(TrainRlArgs),
    /// Aggregate trace directories into a results table.
    Report(ReportArgs),
    /// Delta-hyperbolicity of a dataset's states.
    Hyperbolicity(HyperbolicityArgs),
    /// Run the full pipeline from a JSON configuration.
    Experiment(ExperimentArgs),
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<UsageError>()
            || matches!(
                e.downcast_ref::<qme_core::Error>(),
                Some(
                    qme_core::Error::InvalidConfig(_)
                        | qme_core::Error::InvalidArchitecture(_)
                        | qme_core::Error::BadLiftDim(_)
                )
            )
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainQme(a) => train_qme_cmd(a),
        Command::Transform(a) => transform_cmd(a),
        Command::TrainRl(a) => train_rl_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Hyperbolicity(a) => hyperbolicity_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_usage(&err) { 2 } else { 1 })
        }
    }
}
