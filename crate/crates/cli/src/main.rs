use clap::{Parser, Subcommand};
use oclab_cli::runner;
use oclab_cli::CliError;
use std::path::PathBuf;

/// Online continual learning lab for synthetic speech-like streams.
///
/// Output root precedence: --out flag, then the OCLAB_OUT environment
/// variable, then out_dir from the config file.
#[derive(Parser)]
#[command(name = "oclab", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the starting checkpoint on the base task and save it.
    Pretrain {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt over the scheduled stream for every seed and evaluate.
    Run {
        config: PathBuf,
        /// Reuse a saved starting checkpoint instead of pretraining.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Component study: pseudo-label source, pass count, distillation.
    Ablate {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid-search hyperparameters on displaced held-out tasks.
    Tune {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds per grid point, taken from the front of the seed list.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Pairwise significance tests across saved run artifacts.
    Compare {
        /// Artifact directories or artifact.json files (at least two).
        #[arg(num_args = 2.., required = true)]
        artifacts: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a saved checkpoint on the configured test splits.
    Eval {
        config: PathBuf,
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Pretrain { config, out } => runner::cmd_pretrain(&config, out.as_deref())?,
        Cmd::Run {
            config,
            checkpoint,
            out,
        } => runner::cmd_run(&config, checkpoint.as_deref(), out.as_deref())?,
        Cmd::Ablate { config, out } => runner::cmd_ablate(&config, out.as_deref())?,
        Cmd::Tune { config, out, seeds } => runner::cmd_tune(&config, out.as_deref(), seeds)?,
        Cmd::Compare { artifacts, out } => runner::cmd_compare(&artifacts, out.as_deref())?,
        Cmd::Eval {
            config,
            checkpoint,
            out,
        } => runner::cmd_eval(&config, &checkpoint, out.as_deref())?,
    };
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
