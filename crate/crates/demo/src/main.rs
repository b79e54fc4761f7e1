use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::Parser;
use pinn_core::agents::Agent;
use pinn_demo::{default_env, serve, sibling_env, AppState, ServedAgent};

/// Streams agents playing live; connect to ws://HOST:PORT/session.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Checkpoints to serve, as `name=path` or a bare path (named by file stem).
    #[arg(required = true)]
    checkpoints: Vec<String>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frames buffered per client before the oldest are dropped.
    #[arg(long, default_value_t = pinn_demo::server::DEFAULT_BUFFER)]
    buffer: usize,
}

fn load(spec: &str) -> anyhow::Result<ServedAgent> {
    let (name, path) = match spec.split_once('=') {
        Some((n, p)) => (n.to_string(), PathBuf::from(p)),
        None => {
            let p = PathBuf::from(spec);
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned());
            (stem.unwrap_or_else(|| spec.into()), p)
        }
    };
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    let agent = Agent::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let env = sibling_env(&path)?.unwrap_or_else(|| default_env(&agent));
    Ok(ServedAgent {
        name,
        agent: Arc::new(agent),
        env,
    })
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let agents = args
        .checkpoints
        .iter()
        .map(|s| load(s))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let state = Arc::new(AppState::new(agents, args.seed).with_buffer(args.buffer));
    tokio::runtime::Runtime::new()?.block_on(serve(state, args.addr))?;
    Ok(())
}
