//! Experiment driver behind the `pinn` binary.

pub mod config;
pub mod eval;
pub mod manifest;
pub mod probe;
pub mod render;
pub mod replay;
pub mod train;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use pinn_core::agents::{Agent, AgentConfig};
use pinn_core::envs::{CartpoleConfig, EnvConfig, MinipongConfig};

pub use config::ExperimentConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CONFIG_FILE: &str = "config.json";

/// Thread pool for roll-outs; `None` uses `PINN_WORKERS` or the number of CPUs.
pub fn thread_pool(workers: Option<usize>) -> anyhow::Result<rayon::ThreadPool> {
    let n = match workers {
        Some(n) => n,
        None => match std::env::var("PINN_WORKERS") {
            Ok(v) => v
                .parse()
                .with_context(|| format!("PINN_WORKERS must be a positive integer, got `{v}`"))?,
            Err(_) => 0,
        },
    };
    Ok(rayon::ThreadPoolBuilder::new().num_threads(n).build()?)
}

pub fn load_agent(path: &Path) -> anyhow::Result<Agent> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Ok(Agent::load(path)?)
}

/// Experiment config for a checkpoint: the explicit one, else `config.json` beside it.
pub fn find_config(
    explicit: Option<&Path>,
    checkpoint: &Path,
) -> anyhow::Result<Option<ExperimentConfig>> {
    let candidate: Option<PathBuf> = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None => checkpoint
            .parent()
            .map(|d| d.join(CONFIG_FILE))
            .filter(|p| p.exists()),
    };
    candidate
        .map(|p| ExperimentConfig::load(&p).map_err(Into::into))
        .transpose()
}

/// Environment the agent plays: from the config if known, else the variant's default.
pub fn env_for(agent: &Agent, config: Option<&ExperimentConfig>) -> anyhow::Result<EnvConfig> {
    let env = match config {
        Some(c) => c.env,
        None => match agent.config() {
            AgentConfig::PiMinipong(_) => EnvConfig::Minipong(MinipongConfig::default()),
            _ => EnvConfig::Cartpole(CartpoleConfig::default()),
        },
    };
    let ok = matches!(
        (agent.config(), env),
        (AgentConfig::PiMinipong(_), EnvConfig::Minipong(_))
            | (AgentConfig::PiCartpole(_) | AgentConfig::Fnn(_), EnvConfig::Cartpole(_))
    );
    if !ok {
        bail!("{} agent cannot act in {}", agent.variant(), env.name());
    }
    Ok(env)
}

/// Creates `dir` for fresh output. An existing non-empty directory is an error unless
/// `force` (wipe it) or `keep` (reuse it) is set.
pub fn prepare_dir(dir: &Path, force: bool, keep: bool) -> anyhow::Result<()> {
    let occupied = dir.exists()
        && std::fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .next()
            .is_some();
    if occupied && !keep {
        if !force {
            bail!(
                "{} already exists; pass --force to overwrite it",
                dir.display()
            );
        }
        std::fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}
