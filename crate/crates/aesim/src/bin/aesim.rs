use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use aesim::commands;
use aesim::config::ExperimentConfig;
use aesim::error::Error;
use aesim::ltr::LossKind;

/// Search-engine simulation platform: synthetic world, virtual users,
/// imitation-learned feedback, and learning-to-rank experiments.
#[derive(Parser)]
#[command(name = "aesim", version, about)]
struct Cli {
    /// Path to the experiment config file (TOML).
    #[arg(short, long, global = true, default_value = "configs/default.toml")]
    config: PathBuf,

    /// Overwrite existing stage outputs.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the item catalog and ground-truth user oracle.
    GenWorld,
    /// Train the WGAN-GP virtual-user generator.
    TrainUserGen,
    /// Train the GAIL feedback policy on oracle demonstrations.
    TrainFeedback,
    /// Log the three-stage biased train/test datasets.
    PrepareData,
    /// Estimate position propensities by probing the feedback policy.
    BiasProbe,
    /// Train one ranking model.
    TrainRanker {
        /// Loss family to train.
        #[arg(long, value_enum)]
        loss: LossArg,
        /// Apply inverse-propensity de-biasing.
        #[arg(long)]
        ips: bool,
    },
    /// Score all trained rankers on the test logs.
    Evaluate,
    /// Render the consolidated report tables and figure data.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Pointwise,
    Pairwise,
    Listmle,
    Gsf,
    Dlcm,
}

impl From<LossArg> for LossKind {
    fn from(a: LossArg) -> Self {
        match a {
            LossArg::Pointwise => LossKind::PointwiseCe,
            LossArg::Pairwise => LossKind::PairwiseLogistic,
            LossArg::Listmle => LossKind::Listmle,
            LossArg::Gsf => LossKind::Gsf,
            LossArg::Dlcm => LossKind::Dlcm,
        }
    }
}

fn run(cli: &Cli) -> aesim::error::Result<()> {
    let config = ExperimentConfig::load(&cli.config)?;
    config.validate()?;
    match &cli.command {
        Command::GenWorld => commands::cmd_gen_world(&config, cli.force),
        Command::TrainUserGen => commands::cmd_train_user_gen(&config, cli.force),
        Command::TrainFeedback => commands::cmd_train_feedback(&config, cli.force),
        Command::PrepareData => commands::cmd_prepare_data(&config, cli.force),
        Command::BiasProbe => commands::cmd_bias_probe(&config, cli.force),
        Command::TrainRanker { loss, ips } => {
            commands::cmd_train_ranker(&config, (*loss).into(), *ips, cli.force)
        }
        Command::Evaluate => commands::cmd_evaluate(&config, cli.force),
        Command::Report => commands::cmd_report(&config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                // Contract/usage violations: bad config, refusal to
                // overwrite, missing upstream stage.
                Error::InvalidArgument(_) | Error::MissingArtifact(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
