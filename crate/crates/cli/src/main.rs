use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sail_core::diffusion::AdaptationMode;
use sail_core::harness::{cmd_eval, cmd_plot, cmd_sail, cmd_train, inspect_episode, RunConfig};
use sail_core::planner::ControlMode;
use sail_core::sail::FilterMode;
use sail_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sail",
    version,
    about = "Self-improving visual planners on a toy pushing task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build demonstration corpora and train the in-domain model, general model and IDM.
    Train(RunArgs),
    /// Run the self-improvement loop from trained checkpoints.
    Sail(RunArgs),
    /// Evaluate checkpoints on the configured tasks without finetuning.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// In-domain checkpoint to evaluate instead of the trained one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render metrics files into an SVG chart.
    Plot {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Pretty-print an episode file.
    InspectEpisode { path: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    adaptation: Option<String>,
    #[arg(long)]
    filter: Option<String>,
    #[arg(long)]
    ctrl: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    rollouts: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(a) = &self.adaptation {
            cfg.sail.adaptation = a.parse::<AdaptationMode>()?;
        }
        if let Some(f) = &self.filter {
            cfg.sail.filter = f.parse::<FilterMode>()?;
        }
        if let Some(c) = &self.ctrl {
            cfg.sail.ctrl = c.parse::<ControlMode>()?;
        }
        if let Some(k) = self.iterations {
            cfg.sail.iterations = k;
        }
        if let Some(n) = self.rollouts {
            cfg.sail.rollouts = n;
        }
        cfg.resolved()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let paths = cmd_train(&args.config()?)?;
            println!("{}", paths.theta.parent().unwrap_or(&paths.theta).display());
        }
        Command::Sail(args) => {
            let dir = cmd_sail(&args.config()?)?;
            println!("{}", dir.display());
        }
        Command::Eval { run, checkpoint } => {
            let (dir, rows) = cmd_eval(&run.config()?, checkpoint.as_deref())?;
            for r in rows {
                println!(
                    "{}: {}/{} ({:.3})",
                    r.task, r.n_success, r.n_rollouts, r.success_rate
                );
            }
            println!("{}", dir.display());
        }
        Command::Plot { metrics, output } => {
            let svg = cmd_plot(&metrics)?;
            match output {
                Some(p) => std::fs::write(&p, svg).map_err(|e| Error::io(&p, e))?,
                None => print!("{svg}"),
            }
        }
        Command::InspectEpisode { path } => print!("{}", inspect_episode(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                log::error!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
