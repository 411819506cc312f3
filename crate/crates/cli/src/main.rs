use std::path::PathBuf;
use std::process::ExitCode;

use cfrc_cli::{run, Backend, Command, Context};
use cfrc_surrogate::dataset::Stage;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "cfrc", version, about = "Fiber-composite stress and damage surrogate pipeline")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-case work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Damage1,
    Damage2,
    Uts,
    Necking,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Damage1 => Stage::Damage1,
            StageArg::Damage2 => Stage::Damage2,
            StageArg::Uts => Stage::Uts,
            StageArg::Necking => Stage::Necking,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate random fiber layouts.
    GenMicro,
    /// Run the material oracle on every layout.
    Simulate,
    /// Split cases and fit normalization statistics.
    BuildDataset,
    /// Train one stage (all four in order when --stage is absent).
    Train {
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
    },
    /// Roll out the test cases.
    Rollout {
        #[arg(long, value_enum, default_value = "unet")]
        backend: Backend,
    },
    /// Score rolled-out cases against the simulations.
    Evaluate {
        #[arg(long, value_enum, default_value = "unet")]
        backend: Backend,
    },
    /// Write summary and figures.
    Report {
        #[arg(long, value_enum, default_value = "unet")]
        backend: Backend,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let Some(config) = cli.config else {
        eprintln!("error: --config is required");
        return ExitCode::from(2);
    };
    let command = match cli.command {
        Cmd::GenMicro => Command::GenMicro,
        Cmd::Simulate => Command::Simulate,
        Cmd::BuildDataset => Command::BuildDataset,
        Cmd::Train { stage } => Command::Train(stage.map(Stage::from)),
        Cmd::Rollout { backend } => Command::Rollout(backend),
        Cmd::Evaluate { backend } => Command::Evaluate(backend),
        Cmd::Report { backend } => Command::Report(backend),
    };
    let result = Context::load(&config, cli.seed, cli.jobs, cli.out).and_then(|ctx| run(&command, &ctx));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
