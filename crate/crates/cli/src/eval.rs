//! `pinn eval`: returns under one or more perturbation conditions.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use chrono::Utc;
use pinn_core::agents::Agent;
use pinn_core::envs::EnvConfig;
use pinn_core::perturb::{
    batch_eval, eval_seeds, run_episode, BatchResult, EpisodeOptions, PerturbationPlan,
    ShuffleSchedule,
};

use crate::manifest::write_manifest;
use crate::replay::TraceFile;
use crate::{env_for, find_config, load_agent, prepare_dir};

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub config: Option<PathBuf>,
    pub episodes: Option<usize>,
    /// First episode seed.
    pub seed: Option<u64>,
    /// One condition per entry (crossed with `occlude`); empty keeps the config's.
    pub shuffle: Vec<ShuffleSchedule>,
    pub duplicate: Option<usize>,
    pub noise_channels: Option<usize>,
    pub noise_sigma: Option<f64>,
    pub occlude: Vec<f64>,
    /// Directory for `eval.csv`, `episodes.csv` and the manifest.
    pub out: Option<PathBuf>,
    pub force: bool,
    /// Save the first episode of the first condition for `pinn replay`.
    pub trace: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionResult {
    pub plan: PerturbationPlan,
    pub result: BatchResult,
}

/// `never`, `0` and `inf` mean no shuffling, `once` shuffles at the start only, and an
/// integer `t` reshuffles every `t` steps.
pub fn parse_shuffle(s: &str) -> Result<ShuffleSchedule, String> {
    match s.trim() {
        "never" | "inf" | "0" => Ok(ShuffleSchedule::Never),
        "once" => Ok(ShuffleSchedule::Once),
        t => t
            .parse::<usize>()
            .map(ShuffleSchedule::every)
            .map_err(|_| format!("expected `never`, `once` or a step count, got `{t}`")),
    }
}

/// Perturbation plans for every requested condition.
pub fn conditions(base: &PerturbationPlan, opts: &EvalOptions) -> Vec<PerturbationPlan> {
    let mut base = base.clone();
    if let Some(d) = opts.duplicate {
        base.duplication = d;
    }
    if let Some(n) = opts.noise_channels {
        base.noise_channels = n;
    }
    if let Some(s) = opts.noise_sigma {
        base.noise_sigma = s;
    }
    let shuffles = if opts.shuffle.is_empty() {
        vec![base.shuffle.clone()]
    } else {
        opts.shuffle.clone()
    };
    let occlusions = if opts.occlude.is_empty() {
        vec![base.occlusion_ratio]
    } else {
        opts.occlude.clone()
    };
    let mut out = Vec::new();
    for s in &shuffles {
        for &o in &occlusions {
            out.push(PerturbationPlan {
                shuffle: s.clone(),
                occlusion_ratio: o,
                ..base.clone()
            });
        }
    }
    out
}

/// Evaluates `agent` on the same seeds under every plan.
pub fn evaluate(
    agent: &Agent,
    env: &EnvConfig,
    plans: &[PerturbationPlan],
    seeds: &[u64],
) -> anyhow::Result<Vec<ConditionResult>> {
    let continuous = matches!(env, EnvConfig::Cartpole(_));
    plans
        .iter()
        .map(|plan| {
            plan.validate(continuous)
                .with_context(|| format!("{} agent", agent.variant()))?;
            Ok(ConditionResult {
                plan: plan.clone(),
                result: batch_eval(agent, env, plan, seeds)?,
            })
        })
        .collect()
}

pub fn eval(opts: &EvalOptions) -> anyhow::Result<Vec<ConditionResult>> {
    let started = Utc::now();
    let agent = load_agent(&opts.checkpoint)?;
    let config = find_config(opts.config.as_deref(), &opts.checkpoint)?;
    let env = env_for(&agent, config.as_ref())?;
    let base = config.as_ref().map(|c| c.perturbation.clone()).unwrap_or_default();
    let episodes = opts
        .episodes
        .or(config.as_ref().map(|c| c.eval.episodes))
        .unwrap_or(100);
    if episodes == 0 {
        bail!("--episodes must be positive");
    }
    let first_seed = opts
        .seed
        .or(config.as_ref().map(|c| c.eval_seed()))
        .unwrap_or(0);
    let seeds = eval_seeds(first_seed, episodes);
    let plans = conditions(&base, opts);
    let results = evaluate(&agent, &env, &plans, &seeds)?;
    for r in &results {
        println!(
            "{:<40} mean {:>9.3} std {:>9.3} over {} episodes",
            condition_label(&r.plan),
            r.result.mean,
            r.result.std,
            r.result.returns.len()
        );
    }
    if let Some(path) = &opts.trace {
        let trace = run_episode(&agent, &env, &plans[0], seeds[0], &EpisodeOptions::default())?;
        TraceFile::new(&opts.checkpoint, env, plans[0].clone(), &trace)?.save(path)?;
    }
    if let Some(dir) = &opts.out {
        prepare_dir(dir, opts.force, false)?;
        write_summary_csv(&dir.join("eval.csv"), &results)?;
        write_episodes_csv(&dir.join("episodes.csv"), &results)?;
        write_manifest(dir, "eval", config.as_ref().map(|c| c.hash()), started)?;
    }
    Ok(results)
}

pub fn condition_label(plan: &PerturbationPlan) -> String {
    let mut parts = vec![format!("shuffle={}", plan.shuffle.label())];
    if plan.duplication != 1 {
        parts.push(format!("dup={}", plan.duplication));
    }
    if plan.noise_channels > 0 {
        parts.push(format!("noise={}x{}", plan.noise_channels, plan.noise_sigma));
    }
    if plan.occlusion_ratio > 0.0 {
        parts.push(format!("occlude={}", plan.occlusion_ratio));
    }
    parts.join(" ")
}

const PLAN_COLUMNS: [&str; 5] = [
    "shuffle",
    "duplication",
    "noise_channels",
    "noise_sigma",
    "occlusion_ratio",
];

fn plan_fields(plan: &PerturbationPlan) -> Vec<String> {
    vec![
        plan.shuffle.label(),
        plan.duplication.to_string(),
        plan.noise_channels.to_string(),
        plan.noise_sigma.to_string(),
        plan.occlusion_ratio.to_string(),
    ]
}

pub fn write_summary_csv(path: &Path, results: &[ConditionResult]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = PLAN_COLUMNS.to_vec();
    header.extend(["episodes", "mean", "std"]);
    w.write_record(&header)?;
    for r in results {
        let mut row = plan_fields(&r.plan);
        row.extend([
            r.result.returns.len().to_string(),
            r.result.mean.to_string(),
            r.result.std.to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_episodes_csv(path: &Path, results: &[ConditionResult]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = PLAN_COLUMNS.to_vec();
    header.extend(["seed", "return"]);
    w.write_record(&header)?;
    for r in results {
        for (seed, ret) in r.result.seeds.iter().zip(&r.result.returns) {
            let mut row = plan_fields(&r.plan);
            row.extend([seed.to_string(), ret.to_string()]);
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
