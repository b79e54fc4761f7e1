//! Observation perturbations and the episode runner.
//!
//! The pipeline for every step is: duplicate → append noise channels → occlude → permute.
//! Occlusion masks are drawn once per episode; permutations follow a [`ShuffleSchedule`].

use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

use crate::agents::{Agent, AgentError, PolicyState, StepInfo};
use crate::attention::ObservationSet;
use crate::envs::{Action, Env, EnvConfig, EnvError};
use crate::numerics::{RealMat, SeededRng};

/// Latent gain applied to continuous attention agents that see more channels than they
/// were trained on.
pub const EXTRA_CHANNEL_GAIN: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleSchedule {
    #[default]
    Never,
    /// One permutation drawn at step 0 and kept.
    Once,
    /// A fresh permutation at every multiple of `t`.
    Every(usize),
    /// A fresh permutation at each listed step.
    At(Vec<usize>),
}

impl ShuffleSchedule {
    /// `0` means never.
    pub fn every(t: usize) -> Self {
        if t == 0 {
            ShuffleSchedule::Never
        } else {
            ShuffleSchedule::Every(t)
        }
    }

    pub fn fires_at(&self, step: usize) -> bool {
        match self {
            ShuffleSchedule::Never => false,
            ShuffleSchedule::Once => step == 0,
            ShuffleSchedule::Every(t) => *t > 0 && step % t == 0,
            ShuffleSchedule::At(steps) => steps.contains(&step),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ShuffleSchedule::Never => "never".into(),
            ShuffleSchedule::Once => "once".into(),
            ShuffleSchedule::Every(t) => format!("every_{t}"),
            ShuffleSchedule::At(s) => format!(
                "at_{}",
                s.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("_")
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationPlan {
    pub shuffle: ShuffleSchedule,
    pub duplication: usize,
    pub noise_channels: usize,
    pub noise_sigma: f64,
    pub occlusion_ratio: f64,
    /// Mixed into every episode seed.
    pub seed: u64,
}

impl Default for PerturbationPlan {
    fn default() -> Self {
        Self {
            shuffle: ShuffleSchedule::Never,
            duplication: 1,
            noise_channels: 0,
            noise_sigma: 0.1,
            occlusion_ratio: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PerturbError {
    #[error("occlusion ratio {0} must lie in [0, 1)")]
    OcclusionRatio(f64),
    #[error("duplication factor must be at least 1")]
    Duplication,
    #[error("{0} is only valid for scalar (continuous) observations")]
    ContinuousOnly(&'static str),
    #[error("occlusion is only valid for patch (visual) observations")]
    VisualOnly,
    #[error("noise sigma {0} must be finite and non-negative")]
    NoiseSigma(f64),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

impl PerturbationPlan {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.shuffle == ShuffleSchedule::Never
            && self.duplication == 1
            && self.noise_channels == 0
            && self.occlusion_ratio == 0.0
    }

    /// Checks the plan against the observation kind (`continuous` = scalar components).
    pub fn validate(&self, continuous: bool) -> Result<(), PerturbError> {
        if !(0.0..1.0).contains(&self.occlusion_ratio) {
            return Err(PerturbError::OcclusionRatio(self.occlusion_ratio));
        }
        if self.duplication == 0 {
            return Err(PerturbError::Duplication);
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(PerturbError::NoiseSigma(self.noise_sigma));
        }
        if continuous {
            if self.occlusion_ratio > 0.0 {
                return Err(PerturbError::VisualOnly);
            }
        } else {
            if self.duplication != 1 {
                return Err(PerturbError::ContinuousOnly("duplication"));
            }
            if self.noise_channels > 0 {
                return Err(PerturbError::ContinuousOnly("noise channels"));
            }
        }
        Ok(())
    }

    /// Channel count seen by the agent for `base` raw components.
    pub fn channel_count(&self, base: usize) -> usize {
        let n = base * self.duplication + self.noise_channels;
        n - occluded_count(n, self.occlusion_ratio)
    }
}

fn occluded_count(n: usize, ratio: f64) -> usize {
    let drop = (ratio * n as f64).round() as usize;
    drop.min(n.saturating_sub(1))
}

/// Per-episode perturbation state.
#[derive(Clone, Debug)]
pub struct Perturber {
    plan: PerturbationPlan,
    perm: Option<Vec<usize>>,
    visible: Option<Vec<usize>>,
    perm_rng: SeededRng,
    noise_rng: SeededRng,
    occlusion_rng: SeededRng,
}

/// Output of one [`Perturber::apply`].
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbed {
    pub obs: ObservationSet,
    /// `obs[i] = pre_permutation[permutation[i]]`.
    pub permutation: Vec<usize>,
    /// Indices (into the duplicated + noise channels) that survived occlusion.
    pub visible: Vec<usize>,
}

impl Perturber {
    pub fn new(plan: PerturbationPlan, episode_seed: u64) -> Self {
        let root = SeededRng::new(episode_seed ^ plan.seed.rotate_left(17));
        Self {
            perm_rng: root.derive("permutation", 0),
            noise_rng: root.derive("noise", 0),
            occlusion_rng: root.derive("occlusion", 0),
            plan,
            perm: None,
            visible: None,
        }
    }

    pub fn plan(&self) -> &PerturbationPlan {
        &self.plan
    }

    pub fn plan_mut(&mut self) -> &mut PerturbationPlan {
        &mut self.plan
    }

    /// Draws a new permutation on the next apply.
    pub fn request_shuffle(&mut self, n: usize) -> Vec<usize> {
        let p = self.perm_rng.permutation(n);
        self.perm = Some(p.clone());
        p
    }

    /// Replaces the occlusion mask with an explicit visible set.
    pub fn set_visible(&mut self, visible: Option<Vec<usize>>) {
        self.visible = visible;
    }

    /// Forces a permutation of the visible channels until the schedule redraws it.
    pub fn set_permutation(&mut self, perm: Option<Vec<usize>>) {
        self.perm = perm;
    }

    pub fn current_permutation(&self) -> Option<&[usize]> {
        self.perm.as_deref()
    }

    pub fn apply(&mut self, obs: &ObservationSet, step: usize) -> Perturbed {
        let plan = &self.plan;
        if plan.is_identity() && self.perm.is_none() && self.visible.is_none() {
            return Perturbed {
                obs: obs.clone(),
                permutation: (0..obs.len()).collect(),
                visible: (0..obs.len()).collect(),
            };
        }
        let width = obs.component_len();
        let base = obs.len();
        let total = base * plan.duplication + plan.noise_channels;

        let mut rows = RealMat::zeros(total, width);
        for d in 0..plan.duplication {
            for i in 0..base {
                rows.row_mut(d * base + i).copy_from_slice(obs.component(i));
            }
        }
        for i in base * plan.duplication..total {
            for v in rows.row_mut(i) {
                *v = self.noise_rng.normal(0.0, plan.noise_sigma);
            }
        }

        if self.visible.as_ref().map_or(true, |v| v.iter().any(|&i| i >= total)) {
            self.visible = Some(if plan.occlusion_ratio > 0.0 {
                let keep = total - occluded_count(total, plan.occlusion_ratio);
                self.occlusion_rng.sample_indices(total, keep)
            } else {
                (0..total).collect()
            });
        }
        let visible = self.visible.clone().unwrap();
        let n = visible.len();

        if plan.shuffle.fires_at(step) || self.perm.as_ref().is_some_and(|p| p.len() != n) {
            self.perm = Some(self.perm_rng.permutation(n));
        }
        let permutation = self.perm.clone().unwrap_or_else(|| (0..n).collect());
        let order: Vec<usize> = permutation.iter().map(|&i| visible[i]).collect();
        Perturbed {
            obs: ObservationSet::from_rows(rows.select_rows(&order)).expect("at least one channel"),
            permutation,
            visible,
        }
    }
}

/// How much of each step to keep in an [`EpisodeTrace`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub enum TraceDetail {
    /// Actions, rewards, permutations.
    #[default]
    Minimal,
    /// Plus latents and policy outputs.
    Latents,
    /// Plus raw/perturbed observations and attention matrices.
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub permutation: Vec<usize>,
    pub action: Action,
    pub reward: f64,
    pub output: Vec<f64>,
    pub latent: Option<RealMat>,
    pub attention: Option<RealMat>,
    pub raw_obs: Option<ObservationSet>,
    pub perturbed_obs: Option<ObservationSet>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub seed: u64,
    pub latent_gain: f64,
    pub visible: Vec<usize>,
    pub steps: Vec<TraceStep>,
    pub total_return: f64,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action).collect()
    }
}

/// Gain applied to the latent under `plan` for `agent` seeing `base` raw channels.
pub fn latent_gain_for(agent: &Agent, plan: &PerturbationPlan, base: usize) -> f64 {
    if matches!(agent, Agent::PiCartpole(_)) && plan.channel_count(base) > base {
        EXTRA_CHANNEL_GAIN
    } else {
        1.0
    }
}

/// Environment reset seed for an episode seed.
pub fn env_seed(episode_seed: u64) -> u64 {
    SeededRng::new(episode_seed).derive_seed("env", 0)
}

#[derive(Clone, Debug, Default)]
pub struct EpisodeOptions {
    pub detail: TraceDetail,
    /// Permute the recurrent state together with the first observation (invariance
    /// checks). With zero initial states this is a no-op, but it keeps the composite
    /// exact for any initial state.
    pub joint_state_permutation: bool,
    /// Override for the automatic latent gain.
    pub latent_gain: Option<f64>,
    /// Stop after this many steps even if the env is not done.
    pub max_steps: Option<usize>,
}

/// A live episode that can be stepped one action at a time.
pub struct EpisodeRunner<A: Borrow<Agent>> {
    pub agent: A,
    pub env: Env,
    pub perturber: Perturber,
    pub state: PolicyState,
    pub prev_action: Option<Action>,
    pub latent_gain: f64,
    pub step: usize,
    pub total_return: f64,
    joint_permute: bool,
}

#[derive(Clone, Debug)]
pub struct RunnerStep {
    pub raw: ObservationSet,
    pub perturbed: Perturbed,
    pub action: Action,
    pub info: StepInfo,
    pub reward: f64,
    pub done: bool,
}

impl<A: Borrow<Agent>> EpisodeRunner<A> {
    pub fn new(
        agent: A,
        env_cfg: &EnvConfig,
        plan: &PerturbationPlan,
        seed: u64,
        options: &EpisodeOptions,
    ) -> Result<Self, PerturbError> {
        let mut env = Env::new(env_cfg);
        plan.validate(matches!(env_cfg, EnvConfig::Cartpole(_)))?;
        env.reset(env_seed(seed));
        let base = env.observe().len();
        let gain = options
            .latent_gain
            .unwrap_or_else(|| latent_gain_for(agent.borrow(), plan, base));
        let state = agent.borrow().initial_state(plan.channel_count(base));
        Ok(Self {
            agent,
            state,
            env,
            perturber: Perturber::new(plan.clone(), seed),
            prev_action: None,
            latent_gain: gain,
            step: 0,
            total_return: 0.0,
            joint_permute: options.joint_state_permutation,
        })
    }

    pub fn is_done(&self) -> bool {
        self.env.is_done()
    }

    pub fn step_once(&mut self) -> Result<RunnerStep, PerturbError> {
        let raw = self.env.observe();
        let perturbed = self.perturber.apply(&raw, self.step);
        if self.step == 0 && self.joint_permute {
            self.state = self.state.permuted(&perturbed.permutation);
        }
        if let Some(slots) = self.state.slots() {
            if slots != perturbed.obs.len() {
                // channel count changed (e.g. a new occlusion mask): fresh state
                self.state = self.agent.borrow().initial_state(perturbed.obs.len());
            }
        }
        let (action, info) =
            self.agent
                .borrow()
                .act(&perturbed.obs, self.prev_action, &mut self.state, self.latent_gain)?;
        let (reward, done) = self.env.step(action)?;
        self.prev_action = Some(action);
        self.total_return += reward;
        self.step += 1;
        Ok(RunnerStep {
            raw,
            perturbed,
            action,
            info,
            reward,
            done,
        })
    }
}

/// Runs one full episode under `plan`.
pub fn run_episode(
    agent: &Agent,
    env_cfg: &EnvConfig,
    plan: &PerturbationPlan,
    seed: u64,
    options: &EpisodeOptions,
) -> Result<EpisodeTrace, PerturbError> {
    let mut runner = EpisodeRunner::new(agent, env_cfg, plan, seed, options)?;
    let mut steps = Vec::new();
    let limit = options.max_steps.unwrap_or(usize::MAX);
    while !runner.is_done() && runner.step < limit {
        let s = runner.step_once()?;
        let d = options.detail;
        steps.push(TraceStep {
            permutation: s.perturbed.permutation,
            action: s.action,
            reward: s.reward,
            output: if d >= TraceDetail::Latents { s.info.output } else { Vec::new() },
            latent: (d >= TraceDetail::Latents).then_some(s.info.latent),
            attention: if d >= TraceDetail::Full { s.info.attention } else { None },
            raw_obs: (d >= TraceDetail::Full).then_some(s.raw),
            perturbed_obs: (d >= TraceDetail::Full).then_some(s.perturbed.obs),
        });
    }
    Ok(EpisodeTrace {
        seed,
        latent_gain: runner.latent_gain,
        visible: runner.perturber.visible.clone().unwrap_or_default(),
        steps,
        total_return: runner.total_return,
    })
}

/// Episode return only, without storing a trace.
pub fn episode_return(
    agent: &Agent,
    env_cfg: &EnvConfig,
    plan: &PerturbationPlan,
    seed: u64,
) -> Result<f64, PerturbError> {
    let mut runner = EpisodeRunner::new(agent, env_cfg, plan, seed, &EpisodeOptions::default())?;
    while !runner.is_done() {
        runner.step_once()?;
    }
    Ok(runner.total_return)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchResult {
    pub mean: f64,
    pub std: f64,
    pub seeds: Vec<u64>,
    pub returns: Vec<f64>,
}

/// Mean and population std of returns over `seeds`. Episodes run on the current rayon
/// pool; results do not depend on the worker count.
pub fn batch_eval(
    agent: &Agent,
    env_cfg: &EnvConfig,
    plan: &PerturbationPlan,
    seeds: &[u64],
) -> Result<BatchResult, PerturbError> {
    use rayon::prelude::*;
    let returns = seeds
        .par_iter()
        .map(|&s| episode_return(agent, env_cfg, plan, s))
        .collect::<Result<Vec<_>, _>>()?;
    let (mean, std) = mean_std(&returns);
    Ok(BatchResult {
        mean,
        std,
        seeds: seeds.to_vec(),
        returns,
    })
}

/// Mean and population standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Evaluation seeds `base, base+1, …`.
pub fn eval_seeds(base: u64, episodes: usize) -> Vec<u64> {
    (0..episodes as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Writes one CSV row per episode.
pub fn write_results_csv(
    path: &std::path::Path,
    experiment_id: &str,
    plan: &PerturbationPlan,
    result: &BatchResult,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "experiment_id",
        "shuffle",
        "duplication",
        "noise_channels",
        "noise_sigma",
        "occlusion_ratio",
        "plan_seed",
        "seed",
        "episode",
        "return",
    ])?;
    for (i, (seed, ret)) in result.seeds.iter().zip(&result.returns).enumerate() {
        w.write_record([
            experiment_id.to_string(),
            plan.shuffle.label(),
            plan.duplication.to_string(),
            plan.noise_channels.to_string(),
            plan.noise_sigma.to_string(),
            plan.occlusion_ratio.to_string(),
            plan.seed.to_string(),
            seed.to_string(),
            i.to_string(),
            ret.to_string(),
        ])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn five() -> ObservationSet {
        ObservationSet::scalars(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap()
    }

    #[test]
    fn identity_plan_is_identity() {
        let mut p = Perturber::new(PerturbationPlan::identity(), 1);
        for t in 0..5 {
            assert_eq!(p.apply(&five(), t).obs, five());
        }
    }

    #[test]
    fn duplication_preserves_multiset() {
        let plan = PerturbationPlan {
            duplication: 2,
            shuffle: ShuffleSchedule::Once,
            ..Default::default()
        };
        let out = Perturber::new(plan, 2).apply(&five(), 0);
        let mut v = out.obs.values().to_vec();
        v.sort_by(f64::total_cmp);
        assert_eq!(v, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 5.0, 5.0]);
    }

    #[test]
    fn noise_channels_appended() {
        let plan = PerturbationPlan {
            noise_channels: 5,
            noise_sigma: 0.1,
            ..Default::default()
        };
        let out = Perturber::new(plan, 3).apply(&five(), 0);
        assert_eq!(out.obs.len(), 10);
        assert_eq!(&out.obs.values()[..5], five().values());
        assert!(out.obs.values()[5..].iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn occlusion_keeps_at_least_one() {
        assert_eq!(occluded_count(196, 0.5), 98);
        assert_eq!(occluded_count(4, 0.99), 3);
        let plan = PerturbationPlan {
            occlusion_ratio: 0.5,
            ..Default::default()
        };
        assert_eq!(plan.channel_count(196), 98);
    }

    #[test]
    fn occlusion_mask_fixed_within_episode() {
        let plan = PerturbationPlan {
            occlusion_ratio: 0.5,
            ..Default::default()
        };
        let obs = ObservationSet::from_rows(RealMat::from_fn(20, 2, |i, _| i as f64)).unwrap();
        let mut p = Perturber::new(plan.clone(), 5);
        let first = p.apply(&obs, 0).visible;
        for t in 1..10 {
            assert_eq!(p.apply(&obs, t).visible, first);
        }
        let other = Perturber::new(plan, 6).apply(&obs, 0).visible;
        assert_ne!(first, other);
    }

    #[test]
    fn invalid_plans_rejected() {
        let p = PerturbationPlan {
            occlusion_ratio: 1.0,
            ..Default::default()
        };
        assert!(matches!(p.validate(false), Err(PerturbError::OcclusionRatio(_))));
        let p = PerturbationPlan {
            duplication: 2,
            ..Default::default()
        };
        assert!(matches!(p.validate(false), Err(PerturbError::ContinuousOnly(_))));
        let p = PerturbationPlan {
            occlusion_ratio: 0.2,
            ..Default::default()
        };
        assert!(matches!(p.validate(true), Err(PerturbError::VisualOnly)));
    }

    #[test]
    fn schedule_firing() {
        assert!(!ShuffleSchedule::every(0).fires_at(0));
        let s = ShuffleSchedule::Every(25);
        assert!(s.fires_at(0) && s.fires_at(50) && !s.fires_at(26));
        assert!(ShuffleSchedule::At(vec![100]).fires_at(100));
    }

    #[test]
    fn mean_std_single() {
        assert_eq!(mean_std(&[3.5]), (3.5, 0.0));
    }
}
