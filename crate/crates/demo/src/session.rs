//! One interactive episode stream, driven synchronously so it can be tested without a socket.

use std::sync::Arc;

use pinn_core::agents::Agent;
use pinn_core::attention::ObservationSet;
use pinn_core::envs::{pgm_bytes, Env, EnvConfig};
use pinn_core::numerics::SeededRng;
use pinn_core::perturb::{latent_gain_for, EpisodeOptions, EpisodeRunner, PerturbationPlan};
use pinn_core::probes::{attention_argmax, unique_patches};
use serde_json::json;

use crate::protocol::{Command, Frame, Image, Message};

pub const DEFAULT_HZ: f64 = 20.0;
pub const MAX_HZ: f64 = 1000.0;
/// MiniPong frames carry the full image this often.
pub const IMAGE_EVERY: usize = 5;
pub const MAX_NOISE_CHANNELS: usize = 100;

/// Whether `agent` can act in `env`.
pub fn compatible(agent: &Agent, env: &EnvConfig) -> bool {
    matches!(
        (agent, env),
        (Agent::PiMinipong(_), EnvConfig::Minipong(_))
            | (Agent::PiCartpole(_) | Agent::Fnn(_), EnvConfig::Cartpole(_))
    )
}

pub struct Session {
    pub id: u64,
    pub agent_name: String,
    env_cfg: EnvConfig,
    runner: EpisodeRunner<Arc<Agent>>,
    seeds: SeededRng,
    episode: u64,
    episode_seed: u64,
    occluded: Vec<usize>,
    pub paused: bool,
    pub hz: f64,
}

impl Session {
    pub fn open(
        id: u64,
        agent_name: &str,
        agent: Arc<Agent>,
        env: EnvConfig,
        seed: u64,
    ) -> Result<Self, String> {
        if !compatible(&agent, &env) {
            return Err(format!(
                "{} agent cannot act in {}",
                agent.variant(),
                env.name()
            ));
        }
        let seeds = SeededRng::new(seed);
        let episode_seed = seeds.derive_seed("episode", 0);
        let runner = new_runner(agent, &env, episode_seed)?;
        Ok(Self {
            id,
            agent_name: agent_name.into(),
            env_cfg: env,
            runner,
            seeds,
            episode: 0,
            episode_seed,
            occluded: Vec::new(),
            paused: true,
            hz: DEFAULT_HZ,
        })
    }

    pub fn env(&self) -> &EnvConfig {
        &self.env_cfg
    }

    pub fn agent(&self) -> &Agent {
        &self.runner.agent
    }

    pub fn episode_seed(&self) -> u64 {
        self.episode_seed
    }

    pub fn step(&self) -> usize {
        self.runner.step
    }

    pub fn is_done(&self) -> bool {
        self.runner.is_done()
    }

    pub fn hello(&self) -> Message {
        Message::Session {
            session_id: self.id,
            agent: self.agent_name.clone(),
            variant: self.agent().variant().into(),
            env: self.env_cfg.name().into(),
            hz: self.hz,
            paused: self.paused,
        }
    }

    fn base_channels(&self) -> usize {
        self.runner.env.observe().len()
    }

    /// Channels after duplication and noise, before occlusion.
    fn total_channels(&self) -> usize {
        self.runner.perturber.plan().channel_count(self.base_channels())
    }

    fn visible_set(&self) -> Vec<usize> {
        (0..self.total_channels())
            .filter(|i| !self.occluded.contains(i))
            .collect()
    }

    fn sync_visible(&mut self) {
        let v = (!self.occluded.is_empty()).then(|| self.visible_set());
        self.runner.perturber.set_visible(v);
    }

    /// Frame for the state before any step of the episode.
    pub fn initial_frame(&self) -> Frame {
        let raw = self.runner.env.observe();
        Frame {
            episode: self.episode,
            step: 0,
            action: None,
            reward: 0.0,
            score: 0.0,
            done: self.runner.is_done(),
            paused: self.paused,
            permutation: Vec::new(),
            visible: Vec::new(),
            raw: summarize(&raw),
            observation: Vec::new(),
            latent: Vec::new(),
            latent_shape: [0, 0],
            attended: Vec::new(),
            image: self.image(),
            dropped: 0,
        }
    }

    fn image(&self) -> Option<Image> {
        match &self.runner.env {
            Env::Minipong(e) => {
                let f = e.frames().latest();
                Some(Image {
                    width: f.cols(),
                    height: f.rows(),
                    pixels: pgm_body(f),
                })
            }
            Env::Cartpole(_) => None,
        }
    }

    fn score(&self) -> f64 {
        match &self.runner.env {
            Env::Minipong(e) => e.state.score() as f64,
            Env::Cartpole(_) => self.runner.total_return,
        }
    }

    /// One environment step. Pauses itself when the episode ends.
    pub fn advance(&mut self) -> Result<Frame, String> {
        if self.runner.is_done() {
            self.paused = true;
            return Err("episode finished; send reset".into());
        }
        let s = self.runner.step_once().map_err(|e| e.to_string())?;
        if s.done {
            self.paused = true;
        }
        let attended = s
            .info
            .attention
            .as_ref()
            .map(|a| unique_patches(&attention_argmax(a)))
            .unwrap_or_default();
        let step = self.runner.step;
        let image = match self.runner.env {
            Env::Minipong(_) if step % IMAGE_EVERY == 0 || s.done => self.image(),
            _ => None,
        };
        Ok(Frame {
            episode: self.episode,
            step,
            action: Some(s.action.as_f64()),
            reward: s.reward,
            score: self.score(),
            done: s.done,
            paused: self.paused,
            permutation: s.perturbed.permutation,
            visible: s.perturbed.visible,
            raw: summarize(&s.raw),
            observation: summarize(&s.perturbed.obs),
            latent_shape: [s.info.latent.rows(), s.info.latent.cols()],
            latent: s.info.latent.data().to_vec(),
            attended,
            image,
            dropped: 0,
        })
    }

    /// Applies a command at a step boundary. Returns the replies; a `step_once` reply
    /// is the new frame.
    pub fn handle(&mut self, cmd: Command) -> Vec<Message> {
        let name = cmd.name().to_string();
        let ack = |detail: serde_json::Value| Message::Ack {
            command: name.clone(),
            detail,
        };
        let error = |message: String| vec![Message::Error { message }];
        match cmd {
            Command::Shuffle => {
                let n = self.visible_set().len();
                let perm = self.runner.perturber.request_shuffle(n);
                vec![ack(json!({ "permutation": perm }))]
            }
            Command::Occlude { indices } => {
                let total = self.total_channels();
                if let Some(&bad) = indices.iter().find(|&&i| i >= total) {
                    return error(format!("channel {bad} out of range (0..{total})"));
                }
                let mut occluded = indices;
                occluded.sort_unstable();
                occluded.dedup();
                if occluded.len() >= total {
                    return error("at least one channel must stay visible".into());
                }
                self.occluded = occluded;
                self.sync_visible();
                vec![ack(json!({ "occluded": self.occluded, "visible": self.visible_set() }))]
            }
            Command::Noise { count, sigma } => {
                if !matches!(self.env_cfg, EnvConfig::Cartpole(_)) {
                    return error("noise channels need a continuous-observation env".into());
                }
                if count > MAX_NOISE_CHANNELS || !sigma.is_finite() || sigma < 0.0 {
                    return error(format!(
                        "noise needs count <= {MAX_NOISE_CHANNELS} and a finite sigma >= 0"
                    ));
                }
                let base = self.base_channels();
                let plan = self.runner.perturber.plan_mut();
                plan.noise_channels = count;
                plan.noise_sigma = sigma;
                let plan = plan.clone();
                let total = plan.channel_count(base);
                self.occluded.retain(|&i| i < total);
                if self.occluded.len() >= total {
                    self.occluded.clear();
                }
                self.runner.latent_gain = latent_gain_for(&self.runner.agent, &plan, base);
                self.sync_visible();
                vec![ack(json!({
                    "count": count,
                    "sigma": sigma,
                    "latent_gain": self.runner.latent_gain,
                }))]
            }
            Command::Pause => {
                self.paused = true;
                vec![ack(json!({ "paused": true }))]
            }
            Command::Resume => {
                if self.runner.is_done() {
                    return error("episode finished; send reset".into());
                }
                self.paused = false;
                vec![ack(json!({ "paused": false }))]
            }
            Command::StepOnce => match self.advance() {
                Ok(f) => vec![Message::Frame(f)],
                Err(e) => error(e),
            },
            Command::Reset { seed } => {
                self.episode += 1;
                let seed = seed.unwrap_or_else(|| self.seeds.derive_seed("episode", self.episode));
                match new_runner(self.runner.agent.clone(), &self.env_cfg, seed) {
                    Ok(r) => {
                        self.runner = r;
                        self.episode_seed = seed;
                        self.occluded.clear();
                        self.paused = true;
                        vec![
                            ack(json!({ "episode": self.episode, "seed": seed })),
                            Message::Frame(self.initial_frame()),
                        ]
                    }
                    Err(e) => error(e),
                }
            }
            Command::SetSpeed { hz } => {
                if !(hz > 0.0 && hz <= MAX_HZ) {
                    return error(format!("hz must be in (0, {MAX_HZ}]"));
                }
                self.hz = hz;
                vec![ack(json!({ "hz": hz }))]
            }
        }
    }
}

fn new_runner(
    agent: Arc<Agent>,
    env: &EnvConfig,
    seed: u64,
) -> Result<EpisodeRunner<Arc<Agent>>, String> {
    EpisodeRunner::new(
        agent,
        env,
        &PerturbationPlan::identity(),
        seed,
        &EpisodeOptions::default(),
    )
    .map_err(|e| e.to_string())
}

/// One number per channel: the value itself for scalars, the mean for patches.
fn summarize(obs: &ObservationSet) -> Vec<f64> {
    (0..obs.len())
        .map(|i| {
            let c = obs.component(i);
            c.iter().sum::<f64>() / c.len() as f64
        })
        .collect()
}

fn pgm_body(frame: &pinn_core::numerics::RealMat) -> Vec<u8> {
    let bytes = pgm_bytes(frame);
    let header = bytes.len() - frame.rows() * frame.cols();
    bytes[header..].to_vec()
}
