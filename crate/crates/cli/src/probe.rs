//! `pinn probe`.

use std::path::PathBuf;

use anyhow::{bail, Context};
use chrono::Utc;
use pinn_core::agents::Agent;
use pinn_core::envs::EnvConfig;
use pinn_core::numerics::{RealMat, SeededRng};
use pinn_core::perturb::{eval_seeds, run_episode, EpisodeOptions, PerturbationPlan, TraceDetail};
use pinn_core::probes::*;

use crate::manifest::write_manifest;
use crate::{env_for, find_config, load_agent, prepare_dir, render};

#[derive(Clone, Debug, Default)]
pub struct ProbeOptions {
    pub checkpoint: PathBuf,
    pub config: Option<PathBuf>,
    /// Episodes (or trials) to sample; per-probe default when absent.
    pub episodes: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
    pub force: bool,
    /// Attention probe: steps to run and the spacing of saved overlays.
    pub steps: usize,
    pub every: usize,
}

pub fn probe(name: &str, opts: &ProbeOptions) -> anyhow::Result<ProbeReport> {
    if !PROBES.contains(&name) {
        return Err(ProbeError::UnknownProbe(name.into()).into());
    }
    let started = Utc::now();
    let agent = load_agent(&opts.checkpoint)?;
    let config = find_config(opts.config.as_deref(), &opts.checkpoint)?;
    let env = env_for(&agent, config.as_ref())?;
    prepare_dir(&opts.out, opts.force, false)?;
    let mut report = ProbeReport::new(name);
    report.inputs.push(opts.checkpoint.display().to_string());
    match name {
        "latent-equality" => latent_probe(&agent, &env, opts, &mut report)?,
        "r2" => r2(&agent, &env, opts, &mut report)?,
        "attention" => attention(&agent, &env, opts, &mut report)?,
        "project2d" => projection(&agent, &env, opts, &mut report)?,
        _ => unreachable!(),
    }
    report.artifacts.sort();
    report.save(&opts.out.join("report.json"))?;
    write_manifest(&opts.out, &format!("probe {name}"), config.map(|c| c.hash()), started)?;
    Ok(report)
}

fn latent_probe(
    agent: &Agent,
    env: &EnvConfig,
    opts: &ProbeOptions,
    report: &mut ProbeReport,
) -> anyhow::Result<()> {
    if !agent.is_permutation_invariant() {
        report.flags.push("agent is not permutation invariant".into());
    }
    let trials = opts.episodes.unwrap_or(20);
    let n = pinn_core::envs::Env::new(env).observe().len();
    let root = SeededRng::new(opts.seed);
    let path = opts.out.join("latent_equality.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["seed", "max_abs_diff"])?;
    let mut worst: f64 = 0.0;
    for k in 0..trials as u64 {
        let seed = root.derive_seed("episode", k);
        let perm = root.derive("permutation", k).permutation(n);
        let diff = latent_equality(agent, env, seed, &perm, None)?;
        worst = worst.max(diff);
        report.inputs.push(format!("seed {seed}"));
        w.write_record([seed.to_string(), diff.to_string()])?;
    }
    w.flush()?;
    report.metric("max_abs_diff", worst);
    report.artifacts.push(path);
    Ok(())
}

fn r2(
    agent: &Agent,
    env: &EnvConfig,
    opts: &ProbeOptions,
    report: &mut ProbeReport,
) -> anyhow::Result<()> {
    if !matches!(env, EnvConfig::Cartpole(_)) || !agent.is_permutation_invariant() {
        bail!("the r2 probe needs a permutation-invariant CartPole agent");
    }
    let seeds = eval_seeds(opts.seed, opts.episodes.unwrap_or(10));
    let traces = shuffled_traces(agent, env, &seeds)?;
    let (latents, inputs) = latent_and_inputs(&traces)?;
    let res = r2_probe(&latents, &inputs)?;
    if res.ridge {
        report.flags.push(format!("rank-deficient latents; ridge {RIDGE_LAMBDA}"));
    }
    report.inputs.extend(seeds.iter().map(|s| format!("seed {s}")));
    report.metric("samples", latents.rows() as f64);
    for (name, v) in CARTPOLE_INPUTS.iter().zip(&res.r2) {
        report.metric(format!("r2_{name}"), *v);
    }
    let path = opts.out.join("r2.csv");
    write_r2_csv(&path, &CARTPOLE_INPUTS, &res.r2)?;
    report.artifacts.push(path);
    Ok(())
}

fn attention(
    agent: &Agent,
    env: &EnvConfig,
    opts: &ProbeOptions,
    report: &mut ProbeReport,
) -> anyhow::Result<()> {
    let EnvConfig::Minipong(cfg) = env else {
        bail!("the attention probe needs a MiniPong agent");
    };
    let options = EpisodeOptions {
        detail: TraceDetail::Full,
        max_steps: Some(opts.steps.max(1)),
        ..Default::default()
    };
    let trace = run_episode(agent, env, &PerturbationPlan::identity(), opts.seed, &options)?;
    report.inputs.push(format!("seed {}", opts.seed));
    let path = opts.out.join("attention.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["step", "unique_patches", "patches"])?;
    let mut counts = Vec::new();
    for (t, step) in trace.steps.iter().enumerate().step_by(opts.every.max(1)) {
        let attn = step.attention.as_ref().context("trace lacks attention")?;
        let patches = unique_patches(&attention_argmax(attn));
        counts.push(patches.len() as f64);
        let list: Vec<String> = patches.iter().map(|p| p.to_string()).collect();
        w.write_record([t.to_string(), patches.len().to_string(), list.join(" ")])?;
        let frame = render::frame(env, step.raw_obs.as_ref().expect("full detail"))?;
        let pgm = opts.out.join(format!("attention_{t:05}.pgm"));
        pinn_core::envs::write_pgm(&pgm, &saliency_overlay(&frame, cfg.patch, &patches))?;
        report.artifacts.push(pgm);
    }
    w.flush()?;
    report.artifacts.push(path);
    let (mean, _) = pinn_core::perturb::mean_std(&counts);
    report.metric("mean_unique_patches", mean);
    report.metric("max_unique_patches", counts.iter().copied().fold(0.0, f64::max));
    report.metric("latents", agent_rows(agent) as f64);
    Ok(())
}

fn agent_rows(agent: &Agent) -> usize {
    match agent {
        Agent::PiMinipong(a) => a.config.layer.num_latents,
        Agent::PiCartpole(a) => a.layer.config().num_latents,
        Agent::Fnn(_) => 0,
    }
}

fn projection(
    agent: &Agent,
    env: &EnvConfig,
    opts: &ProbeOptions,
    report: &mut ProbeReport,
) -> anyhow::Result<()> {
    let seeds = eval_seeds(opts.seed, opts.episodes.unwrap_or(10));
    let options = EpisodeOptions {
        detail: TraceDetail::Latents,
        max_steps: (opts.steps > 0).then_some(opts.steps),
        ..Default::default()
    };
    let mut rows = Vec::new();
    let mut meta = Vec::new();
    let mut width = 0;
    for &seed in &seeds {
        let trace = run_episode(agent, env, &PerturbationPlan::identity(), seed, &options)?;
        for (t, step) in trace.steps.iter().enumerate() {
            let latent = step.latent.as_ref().expect("latents recorded");
            width = latent.len();
            rows.extend_from_slice(latent.data());
            meta.push((seed, t, step.action.as_f64()));
        }
    }
    let points = RealMat::from_vec(meta.len(), width, rows)?;
    let proj = project2d(&points)?;
    report.inputs.extend(seeds.iter().map(|s| format!("seed {s}")));
    report.flags.push("linear PCA projection, not t-SNE".into());
    if proj.zero_variance {
        report.flags.push("latents have zero variance".into());
    }
    report.metric("explained_variance", proj.explained);
    report.metric("points", meta.len() as f64);
    let path = opts.out.join("projection.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["seed", "step", "action", "pc1", "pc2"])?;
    for (i, (seed, t, a)) in meta.iter().enumerate() {
        w.write_record([
            seed.to_string(),
            t.to_string(),
            a.to_string(),
            proj.coords.get(i, 0).to_string(),
            proj.coords.get(i, 1).to_string(),
        ])?;
    }
    w.flush()?;
    report.artifacts.push(path);
    Ok(())
}
