//! `evoq`: command-line front end.
//!
//! Exit status is 0 on success, 1 when a command fails at runtime and 2 on a
//! usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "evoq",
    version,
    about = "Self-training pairwise quality ranking engine"
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Precedence, lowest first: built-in
/// defaults, the config file, `EVOQ_*` environment variables, these flags.
#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub output: Option<PathBuf>,
    /// Scale factor applied to corpus size and pairs per round.
    #[arg(long, global = true, value_name = "FACTOR")]
    pub desk_scale: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    /// builtin, bridge:unix:<path> or bridge:cmd:<command>.
    #[arg(long, global = true, value_name = "BACKEND")]
    pub backend: Option<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Quality,
    Estimate,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic training corpus and holdout set.
    WorldGen,
    /// Offline stage only: vote on one round's pair set.
    Vote {
        /// Round whose pair regime and seeds to use.
        #[arg(long, default_value_t = 1)]
        round: usize,
        /// Policy checkpoint; the configured initial policy when omitted.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Run one full round (voting and training) from a checkpoint.
    Train {
        #[arg(long, default_value_t = 1)]
        round: usize,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Run all rounds and write a run directory.
    Evolve,
    /// Score a checkpoint against the holdout set.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Print the per-round metrics table of a finished run.
    Report {
        /// Run directory containing round_<t>/metrics.json.
        run_dir: PathBuf,
    },
    /// Serve the in-process policy over the bridge protocol.
    ServeBridge {
        /// Listen on a unix socket for one session instead of stdio.
        #[arg(long, value_name = "PATH")]
        socket: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Evolve once per voting budget and compare final metrics.
    AblateK {
        /// Budgets to sweep.
        #[arg(long = "ks", value_delimiter = ',', default_values_t = evoq_core::ablation::DEFAULT_KS)]
        ks: Vec<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::WorldGen => commands::world_gen(&cli.common),
        Command::Vote { round, checkpoint } => {
            commands::vote(&cli.common, round, checkpoint.as_deref())
        }
        Command::Train { round, checkpoint } => {
            commands::train(&cli.common, round, checkpoint.as_deref())
        }
        Command::Evolve => commands::evolve(&cli.common),
        Command::Eval { checkpoint } => commands::eval(&cli.common, checkpoint.as_deref()),
        Command::Report { run_dir } => commands::report(&run_dir),
        Command::ServeBridge { socket, checkpoint } => {
            commands::serve_bridge(&cli.common, socket.as_deref(), checkpoint.as_deref())
        }
        Command::AblateK { ks } => commands::ablate_k(&cli.common, &ks),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
