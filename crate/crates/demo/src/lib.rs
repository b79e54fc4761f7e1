//! Live demo server: streams an agent's episodes over a WebSocket and takes
//! perturbation commands from the client.

pub mod protocol;
pub mod server;
pub mod session;

use std::path::Path;

use pinn_core::agents::{Agent, AgentConfig};
use pinn_core::envs::{CartpoleConfig, EnvConfig, MinipongConfig};

pub use protocol::{parse_command, Command, Frame, Image, Message};
pub use server::{router, serve, spawn, AppState, Outbox, ServedAgent};
pub use session::Session;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment an agent plays when no experiment config says otherwise.
pub fn default_env(agent: &Agent) -> EnvConfig {
    match agent.config() {
        AgentConfig::PiMinipong(_) => EnvConfig::Minipong(MinipongConfig::default()),
        _ => EnvConfig::Cartpole(CartpoleConfig::default()),
    }
}

/// The `env` entry of an experiment config next to a checkpoint, if there is one.
pub fn sibling_env(checkpoint: &Path) -> anyhow::Result<Option<EnvConfig>> {
    let Some(path) = checkpoint.parent().map(|d| d.join("config.json")) else {
        return Ok(None);
    };
    if !path.exists() {
        return Ok(None);
    }
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    match value.get("env") {
        Some(env) => Ok(Some(serde_json::from_value(env.clone())?)),
        None => Ok(None),
    }
}
