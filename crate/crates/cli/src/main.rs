use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use pinn_cli::eval::{parse_shuffle, EvalOptions};
use pinn_cli::probe::ProbeOptions;
use pinn_cli::train::TrainOptions;
use pinn_cli::{env_for, find_config, load_agent, thread_pool};
use pinn_core::perturb::ShuffleSchedule;
use pinn_demo::{AppState, ServedAgent};

#[derive(Parser)]
#[command(name = "pinn", version, about = "Train, evaluate and inspect permutation-invariant agents")]
struct Cli {
    /// Worker threads for roll-outs and training (default: all CPUs).
    #[arg(long, global = true, env = "PINN_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the trainer described by an experiment config.
    Train {
        config: PathBuf,
        /// Run directory (default: the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
        /// Continue the run in an existing directory.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
    },
    /// Mean return of a checkpoint under perturbations.
    Eval(EvalArgs),
    /// Inspect what an agent attends to or encodes.
    Probe {
        /// latent-equality, r2, attention or project2d.
        name: String,
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Episodes or trials (per-probe default).
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Steps per episode (attention: steps to run; project2d: cap, 0 = whole episode).
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Attention: save an overlay every this many steps.
        #[arg(long, default_value_t = 20)]
        every: usize,
    },
    /// Re-run a saved trace and check it reproduces exactly.
    Replay {
        trace: PathBuf,
        /// Write PGM frames here.
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        every: usize,
    },
    /// Serve a checkpoint to WebSocket clients at /session.
    Serve {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = pinn_demo::server::DEFAULT_BUFFER)]
        buffer: usize,
    },
}

#[derive(Args)]
struct Target {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Experiment config (default: config.json next to the checkpoint).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    target: Target,
    #[arg(long)]
    episodes: Option<usize>,
    /// First episode seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Reshuffle schedule: never, once or a step count; repeat for several conditions.
    #[arg(long = "shuffle-every", value_parser = parse_shuffle)]
    shuffle: Vec<ShuffleSchedule>,
    /// Copies of each observation channel.
    #[arg(long)]
    duplicate: Option<usize>,
    #[arg(long)]
    noise_channels: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Fraction of channels hidden; repeat for several conditions.
    #[arg(long)]
    occlude: Vec<f64>,
    /// Write eval.csv, episodes.csv and manifest.json here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    /// Save the first episode as a replayable trace.
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let pool = thread_pool(cli.workers)?;
    match cli.command {
        Command::Train {
            config,
            out,
            force,
            resume,
        } => {
            let opts = TrainOptions { out, force, resume };
            let dir = pool.install(|| pinn_cli::train::train(&config, &opts))?;
            println!("run written to {}", dir.display());
        }
        Command::Eval(a) => {
            let opts = EvalOptions {
                checkpoint: a.target.checkpoint,
                config: a.target.config,
                episodes: a.episodes,
                seed: a.seed,
                shuffle: a.shuffle,
                duplicate: a.duplicate,
                noise_channels: a.noise_channels,
                noise_sigma: a.noise_sigma,
                occlude: a.occlude,
                out: a.out,
                force: a.force,
                trace: a.trace,
            };
            pool.install(|| pinn_cli::eval::eval(&opts))?;
        }
        Command::Probe {
            name,
            target,
            out,
            force,
            episodes,
            seed,
            steps,
            every,
        } => {
            let opts = ProbeOptions {
                checkpoint: target.checkpoint,
                config: target.config,
                episodes,
                seed,
                out,
                force,
                steps,
                every,
            };
            let report = pool.install(|| pinn_cli::probe::probe(&name, &opts))?;
            for (k, v) in &report.metrics {
                println!("{k:<28} {v:.6}");
            }
            for f in &report.flags {
                println!("note: {f}");
            }
        }
        Command::Replay {
            trace,
            frames,
            every,
        } => {
            let outcome = pinn_cli::replay::replay(&trace, frames.as_deref(), every)?;
            println!(
                "replayed {} steps exactly; {} frames written",
                outcome.steps, outcome.frames_written
            );
        }
        Command::Serve {
            target,
            addr,
            seed,
            buffer,
        } => {
            // everything is loaded before the port is bound
            let agent = load_agent(&target.checkpoint)?;
            let config = find_config(target.config.as_deref(), &target.checkpoint)?;
            let env = env_for(&agent, config.as_ref())?;
            let name = target
                .checkpoint
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "agent".into());
            let served = ServedAgent {
                name,
                agent: Arc::new(agent),
                env,
            };
            let state = Arc::new(AppState::new(vec![served], seed).with_buffer(buffer));
            tokio::runtime::Runtime::new()?.block_on(pinn_demo::serve(state, addr))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
