//! Saved episodes and `pinn replay`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use pinn_core::envs::{write_pgm, Action, EnvConfig};
use pinn_core::perturb::{run_episode, EpisodeOptions, EpisodeTrace, PerturbationPlan, TraceDetail};
use serde::{Deserialize, Serialize};

use crate::load_agent;
use crate::manifest::sha256_file;
use crate::render;

/// Everything needed to re-run an episode and check it against the recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFile {
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub env: EnvConfig,
    pub plan: PerturbationPlan,
    pub seed: u64,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub total_return: f64,
}

impl TraceFile {
    pub fn new(
        checkpoint: &Path,
        env: EnvConfig,
        plan: PerturbationPlan,
        trace: &EpisodeTrace,
    ) -> anyhow::Result<Self> {
        let checkpoint = std::fs::canonicalize(checkpoint)
            .with_context(|| format!("resolving {}", checkpoint.display()))?;
        Ok(Self {
            checkpoint_sha256: sha256_file(&checkpoint)?,
            checkpoint,
            env,
            plan,
            seed: trace.seed,
            actions: trace.actions(),
            rewards: trace.steps.iter().map(|s| s.reward).collect(),
            total_return: trace.total_return,
        })
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, serde_json::to_string(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayOutcome {
    pub steps: usize,
    pub frames_written: usize,
}

/// Re-runs a saved episode, failing on the first step whose action or reward differs.
/// With `frames`, writes every `every`-th unperturbed frame as PGM.
pub fn replay(path: &Path, frames: Option<&Path>, every: usize) -> anyhow::Result<ReplayOutcome> {
    let file = TraceFile::load(path)?;
    let digest = sha256_file(&file.checkpoint)?;
    if digest != file.checkpoint_sha256 {
        bail!(
            "{} changed since the trace was recorded",
            file.checkpoint.display()
        );
    }
    let agent = load_agent(&file.checkpoint)?;
    let options = EpisodeOptions {
        detail: if frames.is_some() {
            TraceDetail::Full
        } else {
            TraceDetail::Minimal
        },
        ..Default::default()
    };
    let trace = run_episode(&agent, &file.env, &file.plan, file.seed, &options)?;
    if trace.len() != file.actions.len() {
        bail!(
            "replay ran {} steps, recording has {}",
            trace.len(),
            file.actions.len()
        );
    }
    for (t, step) in trace.steps.iter().enumerate() {
        if step.action != file.actions[t] || step.reward != file.rewards[t] {
            bail!("replay diverged at step {t}");
        }
    }
    let mut written = 0;
    if let Some(dir) = frames {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (t, step) in trace.steps.iter().enumerate().step_by(every.max(1)) {
            let raw = step.raw_obs.as_ref().expect("full detail");
            let img = render::frame(&file.env, raw)?;
            write_pgm(&dir.join(format!("frame_{t:05}.pgm")), &img)?;
            written += 1;
        }
    }
    Ok(ReplayOutcome {
        steps: trace.len(),
        frames_written: written,
    })
}
