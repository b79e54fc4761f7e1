//! Behavior cloning: teacher roll-outs into a dataset, then gradient training of a
//! student with Adam on an MSE loss.
//!
//! Recurrent students train on windows of consecutive steps with a fresh state per
//! window; feed-forward students train on shuffled single records. Visual students see
//! a random patch occlusion per batch.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agents::{
    Agent, AgentConfig, AgentError, CartpoleVars, MinipongVars, PiCartpoleAgent,
    PiMinipongAgent,
};
use crate::attention::{AttentionError, ObservationSet};
use crate::container::{Container, ContainerError};
use crate::envs::minipong::{render_key, scripted_expert, MinipongConfig};
use crate::envs::{patchify, Action, Env, EnvConfig, EnvError, FrameStack};
use crate::numerics::{argmax, NumericsError, RealMat, SeededRng, Tape, Var};
use crate::perturb::PerturbationPlan;

pub const DATASET_TAG: &str = "bc_dataset";
pub const STATE_TAG: &str = "bc_state";
pub const HISTORY_HEADER: [&str; 4] = ["epoch", "loss", "grad_norm", "agreement"];

/// Samples per tape; batches are split into chunks of this size.
const MICRO_BATCH: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum BcError {
    #[error("invalid BC config: {0}")]
    Config(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("non-finite loss at batch {batch}")]
    NonFinite { batch: u64 },
    #[error("holdout set is empty")]
    EmptyHoldout,
    #[error("{path}: {reason}")]
    Dataset { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Scalar observations, one action as target.
    Continuous,
    /// MiniPong render keys, teacher logits as target.
    Visual,
}

/// Teacher roll-outs grouped by episode. Each episode is a `T × (obs + prev + target)`
/// matrix with rows in time order. Visual observations are stored as render keys
/// `[ball_x, ball_y, agent_y, opponent_y]` and rebuilt into patches on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct BcDataset {
    pub kind: DatasetKind,
    pub env: EnvConfig,
    pub obs_width: usize,
    pub prev_width: usize,
    pub target_width: usize,
    pub episodes: Vec<RealMat>,
}

/// One time step of a dataset.
#[derive(Clone, Copy, Debug)]
pub struct Record<'a> {
    pub obs: &'a [f64],
    pub prev: &'a [f64],
    pub target: &'a [f64],
}

impl BcDataset {
    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn num_records(&self) -> usize {
        self.episodes.iter().map(RealMat::rows).sum()
    }

    pub fn episode_len(&self, e: usize) -> usize {
        self.episodes[e].rows()
    }

    pub fn record(&self, e: usize, t: usize) -> Record<'_> {
        let row = self.episodes[e].row(t);
        let (obs, rest) = row.split_at(self.obs_width);
        let (prev, target) = rest.split_at(self.prev_width);
        Record { obs, prev, target }
    }

    /// `(episode, step)` of every record, in order.
    pub fn index(&self) -> Vec<(usize, usize)> {
        (0..self.episodes.len())
            .flat_map(|e| (0..self.episode_len(e)).map(move |t| (e, t)))
            .collect()
    }

    /// Splits off the last `fraction` of episodes (at least one when there are two or more).
    pub fn split_holdout(&self, fraction: f64) -> (BcDataset, BcDataset) {
        let n = self.episodes.len();
        let hold = if n < 2 {
            0
        } else {
            ((fraction * n as f64).round() as usize).clamp(1, n - 1)
        };
        let mut train = self.clone();
        let mut holdout = self.clone();
        holdout.episodes = train.episodes.split_off(n - hold);
        (train, holdout)
    }

    /// Teacher action counts (argmax of targets); continuous targets count by sign.
    pub fn action_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.target_width.max(2)];
        for ep in &self.episodes {
            for t in 0..ep.rows() {
                let target = &ep.row(t)[self.obs_width + self.prev_width..];
                counts[target_class(self.kind, target)] += 1;
            }
        }
        counts
    }

    fn minipong(&self) -> Result<MinipongConfig, BcError> {
        match self.env {
            EnvConfig::Minipong(c) => Ok(c),
            _ => Err(BcError::Mismatch("dataset does not hold MiniPong records".into())),
        }
    }

    /// Patch observation for record `(e, t)`, rebuilt from the last `k` render keys.
    pub fn visual_obs(&self, e: usize, t: usize) -> Result<ObservationSet, BcError> {
        let cfg = self.minipong()?;
        let mut stack = FrameStack::new(cfg.frames, cfg.size, cfg.size);
        for s in (t + 1).saturating_sub(cfg.frames)..=t {
            let k = self.record(e, s).obs;
            stack.push(render_key(
                &cfg,
                [k[0] as i32, k[1] as i32, k[2] as i32, k[3] as i32],
            ));
        }
        Ok(patchify(&stack, cfg.patch).map_err(EnvError::from)?)
    }

    pub fn to_container(&self) -> Container {
        Container::new(
            DATASET_TAG,
            json!({
                "kind": self.kind,
                "env": self.env,
                "obs_width": self.obs_width,
                "prev_width": self.prev_width,
                "target_width": self.target_width,
                "lengths": self.episodes.iter().map(RealMat::rows).collect::<Vec<_>>(),
            }),
            self.episodes.iter().map(|e| e.data().to_vec()).collect(),
        )
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self, BcError> {
        let bad = |reason: String| BcError::Dataset {
            path: path.to_path_buf(),
            reason,
        };
        if c.tag != DATASET_TAG {
            return Err(bad(format!("expected a BC dataset, found `{}`", c.tag)));
        }
        let field = |name: &str| -> Result<serde_json::Value, BcError> {
            c.header
                .get(name)
                .cloned()
                .ok_or_else(|| bad(format!("missing header field `{name}`")))
        };
        let parse = |name: &str| -> Result<usize, BcError> {
            serde_json::from_value(field(name)?).map_err(|e| bad(format!("{name}: {e}")))
        };
        let kind: DatasetKind =
            serde_json::from_value(field("kind")?).map_err(|e| bad(format!("kind: {e}")))?;
        let env: EnvConfig =
            serde_json::from_value(field("env")?).map_err(|e| bad(format!("env: {e}")))?;
        let lengths: Vec<usize> = serde_json::from_value(field("lengths")?)
            .map_err(|e| bad(format!("lengths: {e}")))?;
        let (obs_width, prev_width, target_width) =
            (parse("obs_width")?, parse("prev_width")?, parse("target_width")?);
        let width = obs_width + prev_width + target_width;
        if lengths.len() != c.blocks.len() {
            return Err(bad(format!(
                "{} episode lengths for {} blocks",
                lengths.len(),
                c.blocks.len()
            )));
        }
        let episodes = lengths
            .iter()
            .zip(&c.blocks)
            .map(|(&len, block)| {
                RealMat::from_vec(len, width, block.clone())
                    .map_err(|_| bad(format!("block of {} values is not {len}×{width}", block.len())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            kind,
            env,
            obs_width,
            prev_width,
            target_width,
            episodes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), BcError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, BcError> {
        let c = Container::load(path)?;
        Self::from_container(&c, path)
    }
}

fn target_class(kind: DatasetKind, target: &[f64]) -> usize {
    match kind {
        DatasetKind::Continuous => usize::from(target[0] >= 0.0),
        DatasetKind::Visual => argmax(target),
    }
}

/// Source of expert behavior.
#[derive(Clone, Debug)]
pub enum Teacher {
    /// Any agent acting greedily; its policy output is the target.
    Agent(Agent),
    /// Privileged MiniPong controller emitting pseudo-logits.
    ScriptedExpert,
}

/// Seed for episode `e` of a collection run.
pub fn collection_seed(seed: u64, e: usize) -> u64 {
    SeededRng::new(seed).derive_seed("bc_episode", e as u64)
}

/// Rolls out `teacher` for `episodes` episodes and records every step.
pub fn collect(
    teacher: &Teacher,
    env_cfg: &EnvConfig,
    episodes: usize,
    seed: u64,
) -> Result<BcDataset, BcError> {
    let (kind, obs_width, prev_width, target_width) = match (env_cfg, teacher) {
        (EnvConfig::Cartpole(_), Teacher::Agent(a)) if a.config().is_continuous() => {
            (DatasetKind::Continuous, 5, 1, 1)
        }
        (EnvConfig::Minipong(_), Teacher::ScriptedExpert | Teacher::Agent(Agent::PiMinipong(_))) => {
            (DatasetKind::Visual, 4, 3, crate::envs::minipong::NUM_ACTIONS)
        }
        _ => {
            return Err(BcError::Mismatch(format!(
                "teacher cannot act in {}",
                env_cfg.name()
            )))
        }
    };
    let width = obs_width + prev_width + target_width;
    let mut env = Env::new(env_cfg);
    let mut out = Vec::with_capacity(episodes);
    for e in 0..episodes {
        env.reset(collection_seed(seed, e));
        let mut rows: Vec<f64> = Vec::new();
        let mut prev: Option<Action> = None;
        let mut state = match teacher {
            Teacher::Agent(a) => a.initial_state(env.observe().len()),
            Teacher::ScriptedExpert => crate::agents::PolicyState::Stateless,
        };
        while !env.is_done() {
            let (obs_part, action, target) = match (&env, teacher) {
                (Env::Minipong(m), Teacher::ScriptedExpert) => {
                    let (a, logits) = scripted_expert(&m.config, &m.state);
                    let key = m.state.render_key().map(f64::from);
                    (key.to_vec(), Action::Discrete(a), logits.to_vec())
                }
                (_, Teacher::Agent(agent)) => {
                    let obs = env.observe();
                    let (action, info) = agent.act(&obs, prev, &mut state, 1.0)?;
                    let obs_part = match &env {
                        Env::Minipong(m) => m.state.render_key().map(f64::from).to_vec(),
                        Env::Cartpole(_) => obs.values().to_vec(),
                    };
                    let target = match kind {
                        DatasetKind::Continuous => vec![action.as_f64()],
                        DatasetKind::Visual => info.output,
                    };
                    (obs_part, action, target)
                }
                _ => unreachable!("checked above"),
            };
            rows.extend_from_slice(&obs_part);
            rows.extend(encode_prev(kind, prev));
            rows.extend_from_slice(&target);
            env.step(action)?;
            prev = Some(action);
        }
        let len = rows.len() / width;
        out.push(RealMat::from_vec(len, width, rows).expect("rows have the record width"));
    }
    Ok(BcDataset {
        kind,
        env: *env_cfg,
        obs_width,
        prev_width,
        target_width,
        episodes: out,
    })
}

fn encode_prev(kind: DatasetKind, prev: Option<Action>) -> Vec<f64> {
    match kind {
        DatasetKind::Continuous => vec![prev.map_or(0.0, |a| a.as_f64())],
        DatasetKind::Visual => {
            let mut v = vec![0.0; crate::envs::minipong::NUM_ACTIONS];
            if let Some(Action::Discrete(i)) = prev {
                v[i] = 1.0;
            }
            v
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with bias correction over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Scales `grads` so their Euclidean norm is at most `max_norm`; returns the norm before
/// clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcConfig {
    pub lr: f64,
    /// Records (feed-forward) or windows (recurrent) per batch.
    pub batch_size: usize,
    pub clip_norm: f64,
    pub epochs: usize,
    /// Std of Gaussian noise on the previous action fed to recurrent students.
    pub action_noise: f64,
    /// Per-batch occlusion ratio is drawn uniformly from this range.
    pub occlusion: [f64; 2],
    /// BPTT window for recurrent students.
    pub window: usize,
    pub seed: u64,
    /// Cap on batches per epoch; `None` is one full pass.
    pub batches_per_epoch: Option<usize>,
    /// Cap on holdout records scored after each epoch; `None` scores all.
    pub agreement_records: Option<usize>,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            clip_norm: 0.5,
            epochs: 10,
            action_noise: 0.03,
            occlusion: [0.0, 0.0],
            window: 32,
            seed: 0,
            batches_per_epoch: None,
            agreement_records: None,
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<(), BcError> {
        let bad = |m: &str| Err(BcError::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.window == 0 {
            return bad("batch_size, epochs and window must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(self.action_noise >= 0.0 && self.action_noise.is_finite()) {
            return bad("action_noise must be non-negative");
        }
        let [lo, hi] = self.occlusion;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return bad("occlusion range must satisfy 0 ≤ lo ≤ hi < 1");
        }
        if self.batches_per_epoch == Some(0) {
            return bad("batches_per_epoch must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcEpochRecord {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Mean pre-clip gradient norm.
    pub grad_norm: f64,
    pub agreement: Option<f64>,
}

impl BcEpochRecord {
    fn csv_row(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            self.loss.to_string(),
            self.grad_norm.to_string(),
            self.agreement.map_or(String::new(), |a| a.to_string()),
        ]
    }
}

/// Resumable training state.
#[derive(Clone, Debug)]
pub struct BcState {
    pub student: Agent,
    pub adam: Adam,
    pub epoch: usize,
    pub batch: u64,
    pub history: Vec<BcEpochRecord>,
    /// Loss of every batch so far.
    pub batch_losses: Vec<f64>,
}

impl BcState {
    pub fn new(student: Agent, cfg: &BcConfig) -> Self {
        let n = student.genome().len();
        Self {
            student,
            adam: Adam::new(n, cfg.lr),
            epoch: 0,
            batch: 0,
            history: Vec::new(),
            batch_losses: Vec::new(),
        }
    }

    pub fn to_container(&self, cfg: &BcConfig) -> Container {
        let genome = self.student.genome();
        Container::new(
            STATE_TAG,
            json!({
                "student": self.student.config(),
                "manifest": genome.manifest,
                "config": cfg,
                "epoch": self.epoch,
                "batch": self.batch,
                "adam_t": self.adam.t,
                "history": self.history,
            }),
            vec![
                genome.values,
                self.adam.m.clone(),
                self.adam.v.clone(),
                self.batch_losses.clone(),
            ],
        )
    }

    pub fn from_container(c: &Container, path: &Path, cfg: &BcConfig) -> Result<Self, BcError> {
        let bad = |reason: String| BcError::Dataset {
            path: path.to_path_buf(),
            reason,
        };
        if c.tag != STATE_TAG || c.blocks.len() != 4 {
            return Err(bad("not a BC training state".into()));
        }
        let h = &c.header;
        let student_cfg: AgentConfig = serde_json::from_value(h["student"].clone())
            .map_err(|e| bad(format!("student: {e}")))?;
        let manifest = serde_json::from_value(h["manifest"].clone())
            .map_err(|e| bad(format!("manifest: {e}")))?;
        let genome = crate::agents::AgentGenome::new(c.blocks[0].clone(), manifest)
            .map_err(|e| bad(e.to_string()))?;
        let student = Agent::from_genome(&student_cfg, &genome)?;
        let mut adam = Adam::new(genome.len(), cfg.lr);
        adam.m = c.blocks[1].clone();
        adam.v = c.blocks[2].clone();
        adam.t = h["adam_t"].as_u64().ok_or_else(|| bad("adam_t".into()))?;
        if adam.m.len() != genome.len() || adam.v.len() != genome.len() {
            return Err(bad("optimizer moments do not match the student".into()));
        }
        Ok(Self {
            student,
            adam,
            epoch: h["epoch"].as_u64().ok_or_else(|| bad("epoch".into()))? as usize,
            batch: h["batch"].as_u64().ok_or_else(|| bad("batch".into()))?,
            history: serde_json::from_value(h["history"].clone())
                .map_err(|e| bad(format!("history: {e}")))?,
            batch_losses: c.blocks[3].clone(),
        })
    }
}

/// Training units: single records, or windows `(episode, start, len)`.
#[derive(Clone, Copy, Debug)]
struct Unit {
    episode: usize,
    start: usize,
    len: usize,
}

fn units(data: &BcDataset, recurrent: bool, window: usize) -> Vec<Unit> {
    let mut out = Vec::new();
    for e in 0..data.num_episodes() {
        let t_max = data.episode_len(e);
        if recurrent {
            for start in (0..t_max).step_by(window) {
                out.push(Unit {
                    episode: e,
                    start,
                    len: window.min(t_max - start),
                });
            }
        } else {
            out.extend((0..t_max).map(|t| Unit {
                episode: e,
                start: t,
                len: 1,
            }));
        }
    }
    out
}

fn check_student(student: &Agent, data: &BcDataset) -> Result<(), BcError> {
    let ok = match (student, data.kind) {
        (Agent::PiCartpole(_) | Agent::Fnn(_), DatasetKind::Continuous) => true,
        (Agent::PiMinipong(a), DatasetKind::Visual) => {
            let cfg = data.minipong()?;
            a.config.layer.patch == cfg.patch && a.config.layer.frames == cfg.frames
        }
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(BcError::Mismatch(format!(
            "{} student cannot learn from a {:?} dataset",
            student.variant(),
            data.kind
        )))
    }
}

/// Flattens tape gradients for `params` (genome order); missing leaves count as zero.
fn flat_grads(tape: &Tape, loss: Var, params: &[Var]) -> Result<Vec<f64>, BcError> {
    let grads = tape.grad(loss)?;
    let mut out = Vec::new();
    for &p in params {
        match grads.get(p) {
            Some(g) => out.extend_from_slice(g.data()),
            None => out.extend(std::iter::repeat(0.0).take(tape.value(p).len())),
        }
    }
    Ok(out)
}

/// Loss of the visual student on `samples`, each `(observation, prev one-hot, logits)`.
pub fn visual_loss(
    tape: &mut Tape,
    agent: &PiMinipongAgent,
    vars: &MinipongVars,
    samples: &[(ObservationSet, Vec<f64>, Vec<f64>)],
) -> Result<Var, BcError> {
    let q = agent.layer.tape_queries(tape, &vars.layer);
    let mut feats = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len() * 3);
    for (obs, prev, target) in samples {
        let msg = agent.layer.messages(obs, prev)?;
        feats.push(agent.tape_features(tape, vars, q, &msg));
        targets.extend_from_slice(target);
    }
    let f = tape.concat_rows(&feats);
    let logits = agent.tape_logits(tape, vars, f);
    let width = targets.len() / samples.len();
    let target = tape.constant(RealMat::from_vec(samples.len(), width, targets)?);
    Ok(tape.mse(logits, target))
}

/// Loss of a recurrent continuous student over windows of `(obs, prev, target)` steps,
/// each window starting from zero state.
pub fn recurrent_loss(
    tape: &mut Tape,
    agent: &PiCartpoleAgent,
    vars: &CartpoleVars,
    windows: &[Vec<(Vec<f64>, f64, f64)>],
) -> Var {
    let hidden = agent.layer.config().hidden;
    let mut outs = Vec::new();
    let mut targets = Vec::new();
    for window in windows {
        let n = window[0].0.len();
        let mut h = tape.constant(RealMat::zeros(n, hidden));
        let mut c = tape.constant(RealMat::zeros(n, hidden));
        for (obs, prev, target) in window {
            let obs = RealMat::column_vector(obs);
            let prev = RealMat::filled(obs.rows(), 1, *prev);
            let (a, h2, c2) = agent.tape_step(tape, vars, &obs, &prev, h, c);
            outs.push(a);
            targets.push(*target);
            h = h2;
            c = c2;
        }
    }
    let pred = tape.concat_rows(&outs);
    let target = tape.constant(RealMat::column_vector(&targets));
    tape.mse(pred, target)
}

/// Gradient of the batch-mean loss for `units`, computed in micro-batches on the rayon
/// pool and summed in a fixed order.
fn batch_gradient(
    student: &Agent,
    data: &BcDataset,
    batch: &[Unit],
    rng: &mut SeededRng,
    cfg: &BcConfig,
) -> Result<(f64, Vec<f64>), BcError> {
    let total_steps: usize = batch.iter().map(|u| u.len).sum();
    // Occlusion mask and action noise are drawn up front so results do not depend on
    // how the work is scheduled.
    let visible = match (student, data.kind) {
        (Agent::PiMinipong(_), DatasetKind::Visual) => {
            let [lo, hi] = cfg.occlusion;
            let ratio = if hi > lo { rng.uniform(lo, hi) } else { lo };
            let n = data.minipong()?.num_patches();
            let plan = PerturbationPlan {
                occlusion_ratio: ratio,
                ..Default::default()
            };
            let keep = plan.channel_count(n);
            (keep < n).then(|| rng.sample_indices(n, keep))
        }
        _ => None,
    };
    let noise: Vec<Vec<f64>> = batch
        .iter()
        .map(|u| {
            (0..u.len)
                .map(|_| {
                    if cfg.action_noise > 0.0 {
                        rng.normal(0.0, cfg.action_noise)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let chunks: Vec<(usize, &[Unit])> = batch
        .chunks(MICRO_BATCH)
        .enumerate()
        .map(|(i, c)| (i * MICRO_BATCH, c))
        .collect();
    let parts = chunks
        .par_iter()
        .map(|&(offset, units)| -> Result<(f64, Vec<f64>), BcError> {
            let mut tape = Tape::new();
            let steps: usize = units.iter().map(|u| u.len).sum();
            let (loss, params) = match student {
                Agent::PiMinipong(a) => {
                    let vars = a.register(&mut tape);
                    let samples = units
                        .iter()
                        .map(|u| {
                            let obs = data.visual_obs(u.episode, u.start)?;
                            let obs = match &visible {
                                Some(v) => obs.select(v)?,
                                None => obs,
                            };
                            let r = data.record(u.episode, u.start);
                            Ok((obs, r.prev.to_vec(), r.target.to_vec()))
                        })
                        .collect::<Result<Vec<_>, BcError>>()?;
                    (visual_loss(&mut tape, a, &vars, &samples)?, vars.params())
                }
                Agent::PiCartpole(a) => {
                    let vars = a.register(&mut tape);
                    let windows: Vec<Vec<(Vec<f64>, f64, f64)>> = units
                        .iter()
                        .enumerate()
                        .map(|(k, u)| {
                            (0..u.len)
                                .map(|i| {
                                    let r = data.record(u.episode, u.start + i);
                                    let prev = r.prev[0] + noise[offset + k][i];
                                    (r.obs.to_vec(), prev, r.target[0])
                                })
                                .collect()
                        })
                        .collect();
                    (recurrent_loss(&mut tape, a, &vars, &windows), vars.params())
                }
                Agent::Fnn(a) => {
                    let vars = a.register(&mut tape);
                    let w = data.obs_width;
                    let mut x = Vec::with_capacity(units.len() * w);
                    let mut y = Vec::with_capacity(units.len());
                    for u in units {
                        let r = data.record(u.episode, u.start);
                        x.extend_from_slice(r.obs);
                        y.push(r.target[0]);
                    }
                    let x = tape.constant(RealMat::from_vec(units.len(), w, x)?);
                    let pred = a.tape_forward(&mut tape, &vars, x);
                    let target = tape.constant(RealMat::column_vector(&y));
                    (tape.mse(pred, target), vars.params())
                }
            };
            let weight = steps as f64 / total_steps as f64;
            let weighted = tape.scale(loss, weight);
            let value = tape.value(weighted).get(0, 0);
            if !value.is_finite() {
                return Ok((value, Vec::new()));
            }
            Ok((value, flat_grads(&tape, weighted, &params)?))
        })
        .collect::<Result<Vec<_>, BcError>>()?;

    let mut loss = 0.0;
    let mut grad: Vec<f64> = Vec::new();
    for (l, g) in parts {
        loss += l;
        if g.is_empty() {
            continue;
        }
        if grad.is_empty() {
            grad = g;
        } else {
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    Ok((loss, grad))
}

/// Runs the remaining epochs of `state`. `on_epoch` sees each finished epoch.
pub fn train_bc(
    state: &mut BcState,
    data: &BcDataset,
    holdout: Option<&BcDataset>,
    cfg: &BcConfig,
    on_epoch: &mut dyn FnMut(&BcState) -> Result<(), BcError>,
) -> Result<(), BcError> {
    cfg.validate()?;
    check_student(&state.student, data)?;
    let recurrent = matches!(state.student, Agent::PiCartpole(_));
    let all = units(data, recurrent, cfg.window);
    if all.is_empty() {
        return Err(BcError::Mismatch("dataset has no records".into()));
    }
    let manifest = state.student.genome().manifest;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order_rng = SeededRng::new(cfg.seed).derive("epoch", epoch as u64);
        let order = order_rng.permutation(all.len());
        let mut batches: Vec<Vec<Unit>> = order
            .chunks(cfg.batch_size)
            .map(|c| c.iter().map(|&i| all[i]).collect())
            .collect();
        if let Some(cap) = cfg.batches_per_epoch {
            batches.truncate(cap);
        }
        let (mut loss_sum, mut norm_sum) = (0.0, 0.0);
        for batch in &batches {
            let mut rng = SeededRng::new(cfg.seed).derive("batch", state.batch);
            let (loss, mut grad) = batch_gradient(&state.student, data, batch, &mut rng, cfg)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(BcError::NonFinite { batch: state.batch });
            }
            norm_sum += clip_global_norm(&mut grad, cfg.clip_norm);
            let mut values = state.student.genome().values;
            state.adam.step(&mut values, &grad);
            state.student = state.student.with_values(&values, &manifest)?;
            state.batch_losses.push(loss);
            loss_sum += loss;
            state.batch += 1;
        }
        let agreement = match holdout {
            Some(h) => Some(agreement(&state.student, h, cfg.agreement_records)?),
            None => None,
        };
        let n = batches.len() as f64;
        state.history.push(BcEpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / n,
            grad_norm: norm_sum / n,
            agreement,
        });
        state.epoch += 1;
        log::info!(
            "bc epoch {} loss {:.6} agreement {:?}",
            epoch + 1,
            loss_sum / n,
            agreement
        );
        on_epoch(state)?;
    }
    Ok(())
}

/// Fraction of holdout records where the student's action class matches the teacher's.
/// Recurrent students run each episode from its start with the teacher's previous
/// actions. `limit` caps the number of records scored (evenly strided for feed-forward
/// students, whole leading episodes for recurrent ones).
pub fn agreement(
    student: &Agent,
    holdout: &BcDataset,
    limit: Option<usize>,
) -> Result<f64, BcError> {
    check_student(student, holdout)?;
    let total = holdout.num_records();
    if total == 0 {
        return Err(BcError::EmptyHoldout);
    }
    let cap = limit.unwrap_or(total).clamp(1, total);
    let hits: Vec<(usize, usize)> = match student {
        Agent::PiCartpole(a) => {
            let mut scored = 0;
            let mut out = Vec::new();
            for e in 0..holdout.num_episodes() {
                if scored >= cap {
                    break;
                }
                let mut states = a.layer.zero_states(holdout.obs_width);
                let mut hit = 0;
                for t in 0..holdout.episode_len(e) {
                    let r = holdout.record(e, t);
                    let obs = ObservationSet::scalars(r.obs)?;
                    let (act, _) = a.act(&obs, r.prev[0], &mut states, 1.0)?;
                    hit += usize::from((act >= 0.0) == (r.target[0] >= 0.0));
                }
                scored += holdout.episode_len(e);
                out.push((hit, holdout.episode_len(e)));
            }
            out
        }
        _ => {
            let index = holdout.index();
            let stride = (total / cap).max(1);
            let picked: Vec<(usize, usize)> = index.into_iter().step_by(stride).take(cap).collect();
            picked
                .par_iter()
                .map(|&(e, t)| -> Result<(usize, usize), BcError> {
                    let r = holdout.record(e, t);
                    let class = match student {
                        Agent::PiMinipong(a) => {
                            let obs = holdout.visual_obs(e, t)?;
                            let (act, _) = a.act(&obs, r.prev)?;
                            act
                        }
                        Agent::Fnn(a) => {
                            let (act, _) = a.act(&ObservationSet::scalars(r.obs)?)?;
                            usize::from(act >= 0.0)
                        }
                        Agent::PiCartpole(_) => unreachable!(),
                    };
                    Ok((usize::from(class == target_class(holdout.kind, r.target)), 1))
                })
                .collect::<Result<Vec<_>, BcError>>()?
        }
    };
    let (hit, n) = hits
        .iter()
        .fold((0, 0), |(h, n), &(a, b)| (h + a, n + b));
    Ok(hit as f64 / n as f64)
}

pub fn write_history_csv(path: &Path, history: &[BcEpochRecord]) -> Result<(), BcError> {
    let io = |e: std::io::Error| BcError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    w.write_record(HISTORY_HEADER).map_err(|e| io(e.into()))?;
    for rec in history {
        w.write_record(rec.csv_row()).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

/// Trains `student` in `dir`, writing `bc_state.pinn` and `history.csv` after every epoch
/// and `best.pinn` at the end. Resumes from `bc_state.pinn` if present.
pub fn train_student(
    student: &Agent,
    data: &BcDataset,
    holdout: Option<&BcDataset>,
    cfg: &BcConfig,
    dir: &Path,
) -> Result<BcState, BcError> {
    let state_path = dir.join("bc_state.pinn");
    let mut state = if state_path.exists() {
        let c = Container::load_tagged(&state_path, STATE_TAG)?;
        BcState::from_container(&c, &state_path, cfg)?
    } else {
        BcState::new(student.clone(), cfg)
    };
    train_bc(&mut state, data, holdout, cfg, &mut |s| {
        s.to_container(cfg).save(&state_path)?;
        write_history_csv(&dir.join("history.csv"), &s.history)
    })?;
    state.to_container(cfg).save(&state_path)?;
    write_history_csv(&dir.join("history.csv"), &state.history)?;
    state.student.save(&dir.join("best.pinn"))?;
    Ok(state)
}
