//! Policies built on the attention-neuron layer, plus a fixed-input baseline.

pub mod genome;

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attention::{
    uniform_init, AttentionError, ContinuousConfig, ContinuousLayer, ContinuousParams,
    ContinuousVars, NeuronStates, ObservationSet, VisualConfig, VisualLayer, VisualMessages,
    VisualParams, VisualVars,
};
use crate::container::{Container, ContainerError};
use crate::envs::Action;
use crate::numerics::{argmax, ops, ConvGeom, RealMat, SeededRng, Tape, Var};

pub use genome::{flatten, manifest_len, AgentGenome, GenomeError, TensorSpec};

pub const CHECKPOINT_TAG: &str = "agent";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinipongHeadConfig {
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub conv1_stride: usize,
    pub conv2_channels: usize,
    pub conv2_kernel: usize,
    pub conv2_stride: usize,
    pub hidden: usize,
}

impl Default for MinipongHeadConfig {
    fn default() -> Self {
        Self {
            conv1_channels: 64,
            conv1_kernel: 4,
            conv1_stride: 2,
            conv2_channels: 64,
            conv2_kernel: 3,
            conv2_stride: 1,
            hidden: 512,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiMinipongConfig {
    #[serde(default)]
    pub layer: VisualConfig,
    #[serde(default)]
    pub head: MinipongHeadConfig,
}

impl Default for PiMinipongConfig {
    fn default() -> Self {
        Self {
            layer: VisualConfig::default(),
            head: MinipongHeadConfig::default(),
        }
    }
}

impl PiMinipongConfig {
    /// Convolution geometries for the latent grid, or an error if `M` is not square or
    /// the kernels do not fit.
    pub fn geometry(&self) -> Result<(ConvGeom, ConvGeom), AgentError> {
        let g = self
            .layer
            .grid_side()
            .ok_or(AgentError::Architecture(format!(
                "latent count {} is not a perfect square",
                self.layer.num_latents
            )))?;
        let c1 = ConvGeom {
            in_h: g,
            in_w: g,
            in_c: self.layer.latent_dim,
            out_c: self.head.conv1_channels,
            kernel: self.head.conv1_kernel,
            stride: self.head.conv1_stride,
        };
        c1.validate()
            .map_err(|e| AgentError::Architecture(e.to_string()))?;
        let c2 = ConvGeom {
            in_h: c1.out_h(),
            in_w: c1.out_w(),
            in_c: c1.out_c,
            out_c: self.head.conv2_channels,
            kernel: self.head.conv2_kernel,
            stride: self.head.conv2_stride,
        };
        c2.validate()
            .map_err(|e| AgentError::Architecture(e.to_string()))?;
        Ok((c1, c2))
    }

    pub fn feature_len(&self) -> Result<usize, AgentError> {
        let (_, c2) = self.geometry()?;
        Ok(c2.out_h() * c2.out_w() * c2.out_c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FnnConfig {
    pub inputs: usize,
    pub hidden: usize,
}

impl Default for FnnConfig {
    fn default() -> Self {
        Self {
            inputs: 5,
            hidden: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentConfig {
    PiCartpole(ContinuousConfig),
    PiMinipong(PiMinipongConfig),
    Fnn(FnnConfig),
}

impl AgentConfig {
    pub fn variant(&self) -> &'static str {
        match self {
            AgentConfig::PiCartpole(_) => "pi_cartpole",
            AgentConfig::PiMinipong(_) => "pi_minipong",
            AgentConfig::Fnn(_) => "fnn",
        }
    }

    /// Whether the policy consumes continuous (CartPole) observations.
    pub fn is_continuous(&self) -> bool {
        !matches!(self, AgentConfig::PiMinipong(_))
    }

    pub fn manifest(&self) -> Result<Vec<TensorSpec>, AgentError> {
        Ok(Agent::zeros(self)?.genome().manifest)
    }

    pub fn genome_len(&self) -> Result<usize, AgentError> {
        Ok(manifest_len(&self.manifest()?))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("{agent} cannot consume this observation: {reason}")]
    Observation { agent: &'static str, reason: String },
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("{path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

/// Per-episode recurrent state.
#[derive(Clone, Debug, PartialEq)]
pub enum PolicyState {
    Recurrent(NeuronStates),
    Stateless,
}

impl PolicyState {
    /// Joint reordering used by the start-of-episode invariance checks.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        match self {
            PolicyState::Recurrent(s) => PolicyState::Recurrent(s.permuted(perm)),
            PolicyState::Stateless => PolicyState::Stateless,
        }
    }

    pub fn slots(&self) -> Option<usize> {
        match self {
            PolicyState::Recurrent(s) => Some(s.len()),
            PolicyState::Stateless => None,
        }
    }
}

/// Side outputs of one policy step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    /// Attention latent (or FNN hidden layer as an `H×1` column).
    pub latent: RealMat,
    /// `M×N` attention matrix; absent for the FNN.
    pub attention: Option<RealMat>,
    /// Squashed action (CartPole) or logits (MiniPong).
    pub output: Vec<f64>,
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PiCartpoleAgent {
    pub layer: ContinuousLayer,
    /// `1×M`.
    pub head_w: RealMat,
    pub head_b: RealMat,
}

#[derive(Clone, Copy, Debug)]
pub struct CartpoleVars {
    pub layer: ContinuousVars,
    pub head_w: Var,
    pub head_b: Var,
}

impl CartpoleVars {
    /// Parameter leaves in genome order.
    pub fn params(&self) -> Vec<Var> {
        let l = &self.layer;
        vec![l.lstm_w, l.lstm_b, l.w_q, l.w_k, self.head_w, self.head_b]
    }

    pub fn from_params(p: &[Var]) -> Self {
        Self {
            layer: ContinuousVars {
                lstm_w: p[0],
                lstm_b: p[1],
                w_q: p[2],
                w_k: p[3],
            },
            head_w: p[4],
            head_b: p[5],
        }
    }
}

impl PiCartpoleAgent {
    fn tensors(&self) -> Vec<(&'static str, &RealMat)> {
        let mut t: Vec<_> = self.layer.params().tensors().to_vec();
        t.push(("head_w", &self.head_w));
        t.push(("head_b", &self.head_b));
        t
    }

    fn with_params(&self, values: &[f64], manifest: &[TensorSpec]) -> Result<Self, AgentError> {
        let mut params = self.layer.params().clone();
        let mut head_w = self.head_w.clone();
        let mut head_b = self.head_b.clone();
        {
            let mut t: Vec<(&str, &mut RealMat)> = params.tensors_mut().into_iter().collect();
            t.push(("head_w", &mut head_w));
            t.push(("head_b", &mut head_b));
            genome::unflatten_into(values, manifest, &mut t)?;
        }
        Ok(Self {
            layer: ContinuousLayer::new(*self.layer.config(), params)?,
            head_w,
            head_b,
        })
    }

    pub fn act(
        &self,
        obs: &ObservationSet,
        prev_action: f64,
        states: &mut NeuronStates,
        latent_gain: f64,
    ) -> Result<(f64, StepInfo), AgentError> {
        let mut out = self.layer.forward(obs, &[prev_action], states)?;
        if latent_gain != 1.0 {
            out.latent = out.latent.scale(latent_gain);
        }
        let z: f64 = self
            .head_w
            .data()
            .iter()
            .zip(out.latent.data())
            .map(|(w, m)| w * m)
            .sum::<f64>()
            + self.head_b.get(0, 0);
        let a = z.tanh();
        Ok((
            a,
            StepInfo {
                latent: out.latent,
                attention: Some(out.attention),
                output: vec![a],
            },
        ))
    }

    pub fn register(&self, tape: &mut Tape) -> CartpoleVars {
        let p = self.layer.params();
        CartpoleVars {
            layer: ContinuousVars {
                lstm_w: tape.param(p.lstm_w.clone()),
                lstm_b: tape.param(p.lstm_b.clone()),
                w_q: tape.param(p.w_q.clone()),
                w_k: tape.param(p.w_k.clone()),
            },
            head_w: tape.param(self.head_w.clone()),
            head_b: tape.param(self.head_b.clone()),
        }
    }

    /// Tape version of one step; returns `(action 1×1, h', c')`.
    pub fn tape_step(
        &self,
        tape: &mut Tape,
        vars: &CartpoleVars,
        obs: &RealMat,
        prev_action: &RealMat,
        h: Var,
        c: Var,
    ) -> (Var, Var, Var) {
        let (latent, h2, c2) = self.layer.tape_step(tape, &vars.layer, obs, prev_action, h, c);
        let z = tape.matmul(vars.head_w, latent);
        let z = tape.add(z, vars.head_b);
        (tape.tanh(z), h2, c2)
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PiMinipongAgent {
    pub config: PiMinipongConfig,
    pub layer: VisualLayer,
    pub conv1_w: RealMat,
    pub conv1_b: RealMat,
    pub conv2_w: RealMat,
    pub conv2_b: RealMat,
    pub fc1_w: RealMat,
    pub fc1_b: RealMat,
    pub fc2_w: RealMat,
    pub fc2_b: RealMat,
    geom: (ConvGeom, ConvGeom),
}

#[derive(Clone, Copy, Debug)]
pub struct MinipongVars {
    pub layer: VisualVars,
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

impl MinipongVars {
    /// Parameter leaves in genome order.
    pub fn params(&self) -> Vec<Var> {
        let l = &self.layer;
        vec![
            l.w_q,
            l.w_k,
            l.w_v,
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.fc1_w,
            self.fc1_b,
            self.fc2_w,
            self.fc2_b,
        ]
    }

    pub fn from_params(p: &[Var]) -> Self {
        Self {
            layer: VisualVars {
                w_q: p[0],
                w_k: p[1],
                w_v: p[2],
            },
            conv1_w: p[3],
            conv1_b: p[4],
            conv2_w: p[5],
            conv2_b: p[6],
            fc1_w: p[7],
            fc1_b: p[8],
            fc2_w: p[9],
            fc2_b: p[10],
        }
    }
}

impl PiMinipongAgent {
    fn build(
        config: PiMinipongConfig,
        layer: VisualParams,
        mut init: impl FnMut(usize, usize, usize) -> RealMat,
    ) -> Result<Self, AgentError> {
        let (c1, c2) = config.geometry()?;
        let feats = c2.out_h() * c2.out_w() * c2.out_c;
        let hidden = config.head.hidden;
        let actions = config.layer.num_actions;
        let agent = Self {
            config,
            layer: VisualLayer::new(config.layer, layer)?,
            conv1_w: init(c1.patch_len(), c1.out_c, c1.patch_len()),
            conv1_b: init(1, c1.out_c, c1.patch_len()),
            conv2_w: init(c2.patch_len(), c2.out_c, c2.patch_len()),
            conv2_b: init(1, c2.out_c, c2.patch_len()),
            fc1_w: init(feats, hidden, feats),
            fc1_b: init(1, hidden, feats),
            fc2_w: init(hidden, actions, hidden),
            fc2_b: init(1, actions, hidden),
            geom: (c1, c2),
        };
        Ok(agent)
    }

    pub fn geometry(&self) -> (ConvGeom, ConvGeom) {
        self.geom
    }

    fn tensors(&self) -> Vec<(&'static str, &RealMat)> {
        let mut t: Vec<_> = self.layer.params().tensors().to_vec();
        t.extend([
            ("conv1_w", &self.conv1_w),
            ("conv1_b", &self.conv1_b),
            ("conv2_w", &self.conv2_w),
            ("conv2_b", &self.conv2_b),
            ("fc1_w", &self.fc1_w),
            ("fc1_b", &self.fc1_b),
            ("fc2_w", &self.fc2_w),
            ("fc2_b", &self.fc2_b),
        ]);
        t
    }

    fn with_params(&self, values: &[f64], manifest: &[TensorSpec]) -> Result<Self, AgentError> {
        let mut next = self.clone();
        let mut params = self.layer.params().clone();
        {
            let mut t: Vec<(&str, &mut RealMat)> = params.tensors_mut().into_iter().collect();
            t.extend([
                ("conv1_w", &mut next.conv1_w),
                ("conv1_b", &mut next.conv1_b),
                ("conv2_w", &mut next.conv2_w),
                ("conv2_b", &mut next.conv2_b),
                ("fc1_w", &mut next.fc1_w),
                ("fc1_b", &mut next.fc1_b),
                ("fc2_w", &mut next.fc2_w),
                ("fc2_b", &mut next.fc2_b),
            ]);
            genome::unflatten_into(values, manifest, &mut t)?;
        }
        next.layer = VisualLayer::new(self.config.layer, params)?;
        Ok(next)
    }

    /// CNN head on a `M×d_m` latent (read as a `g×g×d_m` grid); returns logits.
    pub fn head(&self, latent: &RealMat) -> Vec<f64> {
        let (c1, c2) = self.geom;
        let mut h = ops::conv2d(latent, &self.conv1_w, self.conv1_b.data(), &c1);
        h.data_mut().iter_mut().for_each(|v| *v = ops::relu(*v));
        let mut h = ops::conv2d(&h, &self.conv2_w, self.conv2_b.data(), &c2);
        h.data_mut().iter_mut().for_each(|v| *v = ops::relu(*v));
        let flat = h.reshaped(1, self.fc1_w.rows()).expect("feature length");
        let mut z = flat.matmul(&self.fc1_w);
        ops::add_row_bias(&mut z, self.fc1_b.data());
        z.data_mut().iter_mut().for_each(|v| *v = ops::relu(*v));
        let mut logits = z.matmul(&self.fc2_w);
        ops::add_row_bias(&mut logits, self.fc2_b.data());
        logits.into_vec()
    }

    pub fn act(
        &self,
        obs: &ObservationSet,
        prev_action: &[f64],
    ) -> Result<(usize, StepInfo), AgentError> {
        let out = self.layer.forward(obs, prev_action)?;
        let logits = self.head(&out.latent);
        Ok((
            argmax(&logits),
            StepInfo {
                latent: out.latent,
                attention: Some(out.attention),
                output: logits,
            },
        ))
    }

    pub fn register(&self, tape: &mut Tape) -> MinipongVars {
        let p = self.layer.params();
        MinipongVars {
            layer: VisualVars {
                w_q: tape.param(p.w_q.clone()),
                w_k: tape.param(p.w_k.clone()),
                w_v: tape.param(p.w_v.clone()),
            },
            conv1_w: tape.param(self.conv1_w.clone()),
            conv1_b: tape.param(self.conv1_b.clone()),
            conv2_w: tape.param(self.conv2_w.clone()),
            conv2_b: tape.param(self.conv2_b.clone()),
            fc1_w: tape.param(self.fc1_w.clone()),
            fc1_b: tape.param(self.fc1_b.clone()),
            fc2_w: tape.param(self.fc2_w.clone()),
            fc2_b: tape.param(self.fc2_b.clone()),
        }
    }

    /// Attention plus convolutions for one sample; returns a `1×F` feature row.
    pub fn tape_features(
        &self,
        tape: &mut Tape,
        vars: &MinipongVars,
        q_proj: Var,
        msg: &VisualMessages,
    ) -> Var {
        let (c1, c2) = self.geom;
        let latent = self
            .layer
            .tape_forward_with_queries(tape, &vars.layer, q_proj, msg);
        let h = tape.conv2d(latent, vars.conv1_w, vars.conv1_b, c1);
        let h = tape.relu(h);
        let h = tape.conv2d(h, vars.conv2_w, vars.conv2_b, c2);
        let h = tape.relu(h);
        tape.reshape(h, 1, self.fc1_w.rows())
    }

    /// Fully-connected part on stacked features `B×F`; returns `B×|A|` logits.
    pub fn tape_logits(&self, tape: &mut Tape, vars: &MinipongVars, features: Var) -> Var {
        let z = tape.matmul(features, vars.fc1_w);
        let z = tape.add_bias(z, vars.fc1_b);
        let z = tape.relu(z);
        let z = tape.matmul(z, vars.fc2_w);
        tape.add_bias(z, vars.fc2_b)
    }
}

// ---------------------------------------------------------------------------

/// Two-layer tanh network with a fixed input size.
#[derive(Clone, Debug, PartialEq)]
pub struct FnnBaseline {
    pub config: FnnConfig,
    pub w1: RealMat,
    pub b1: RealMat,
    pub w2: RealMat,
    pub b2: RealMat,
}

#[derive(Clone, Copy, Debug)]
pub struct FnnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FnnVars {
    /// Parameter leaves in genome order.
    pub fn params(&self) -> Vec<Var> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    pub fn from_params(p: &[Var]) -> Self {
        Self {
            w1: p[0],
            b1: p[1],
            w2: p[2],
            b2: p[3],
        }
    }
}

impl FnnBaseline {
    fn tensors(&self) -> Vec<(&'static str, &RealMat)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn with_params(&self, values: &[f64], manifest: &[TensorSpec]) -> Result<Self, AgentError> {
        let mut next = self.clone();
        genome::unflatten_into(
            values,
            manifest,
            &mut [
                ("w1", &mut next.w1),
                ("b1", &mut next.b1),
                ("w2", &mut next.w2),
                ("b2", &mut next.b2),
            ],
        )?;
        Ok(next)
    }

    pub fn act(&self, obs: &ObservationSet) -> Result<(f64, StepInfo), AgentError> {
        if obs.component_len() != 1 || obs.len() != self.config.inputs {
            return Err(AgentError::Observation {
                agent: "fnn",
                reason: format!(
                    "expects {} scalar inputs, got {}×{}",
                    self.config.inputs,
                    obs.len(),
                    obs.component_len()
                ),
            });
        }
        let x = RealMat::row_vector(obs.values());
        let mut h = x.matmul(&self.w1);
        ops::add_row_bias(&mut h, self.b1.data());
        let h = h.map(f64::tanh);
        let z = h.matmul(&self.w2).get(0, 0) + self.b2.get(0, 0);
        let a = z.tanh();
        let latent = RealMat::column_vector(h.data());
        Ok((
            a,
            StepInfo {
                latent,
                attention: None,
                output: vec![a],
            },
        ))
    }

    pub fn register(&self, tape: &mut Tape) -> FnnVars {
        FnnVars {
            w1: tape.param(self.w1.clone()),
            b1: tape.param(self.b1.clone()),
            w2: tape.param(self.w2.clone()),
            b2: tape.param(self.b2.clone()),
        }
    }

    /// Batched forward on `B×inputs`; returns `B×1` actions.
    pub fn tape_forward(&self, tape: &mut Tape, vars: &FnnVars, x: Var) -> Var {
        let h = tape.matmul(x, vars.w1);
        let h = tape.add_bias(h, vars.b1);
        let h = tape.tanh(h);
        let z = tape.matmul(h, vars.w2);
        let z = tape.add_bias(z, vars.b2);
        tape.tanh(z)
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum Agent {
    PiCartpole(PiCartpoleAgent),
    PiMinipong(PiMinipongAgent),
    Fnn(FnnBaseline),
}

impl Agent {
    fn init(config: &AgentConfig, rng: Option<&mut SeededRng>) -> Result<Self, AgentError> {
        let mut zero_rng = SeededRng::new(0);
        let random = rng.is_some();
        let rng = rng.unwrap_or(&mut zero_rng);
        let mut init = |r: usize, c: usize, fan: usize| {
            if random {
                uniform_init(r, c, fan, rng)
            } else {
                RealMat::zeros(r, c)
            }
        };
        Ok(match config {
            AgentConfig::PiCartpole(cfg) => {
                let mut params = ContinuousParams::zeros(cfg);
                let lstm_fan = params.lstm_w.rows();
                for (name, m) in params.tensors_mut() {
                    let fan = if name.starts_with("lstm") { lstm_fan } else { m.rows() };
                    *m = init(m.rows(), m.cols(), fan);
                }
                Agent::PiCartpole(PiCartpoleAgent {
                    layer: ContinuousLayer::new(*cfg, params)?,
                    head_w: init(1, cfg.num_latents, cfg.num_latents),
                    head_b: init(1, 1, cfg.num_latents),
                })
            }
            AgentConfig::PiMinipong(cfg) => {
                let mut layer = VisualParams::zeros(&cfg.layer);
                for (_, m) in layer.tensors_mut() {
                    *m = init(m.rows(), m.cols(), m.rows());
                }
                Agent::PiMinipong(PiMinipongAgent::build(*cfg, layer, &mut init)?)
            }
            AgentConfig::Fnn(cfg) => Agent::Fnn(FnnBaseline {
                config: *cfg,
                w1: init(cfg.inputs, cfg.hidden, cfg.inputs),
                b1: init(1, cfg.hidden, cfg.inputs),
                w2: init(cfg.hidden, 1, cfg.hidden),
                b2: init(1, 1, cfg.hidden),
            }),
        })
    }

    /// All parameters zero.
    pub fn zeros(config: &AgentConfig) -> Result<Self, AgentError> {
        Self::init(config, None)
    }

    /// Uniform `±1/√fan_in` initialization.
    pub fn random(config: &AgentConfig, rng: &mut SeededRng) -> Result<Self, AgentError> {
        Self::init(config, Some(rng))
    }

    pub fn from_genome(config: &AgentConfig, genome: &AgentGenome) -> Result<Self, AgentError> {
        Self::zeros(config)?.with_genome(genome)
    }

    /// Same architecture with parameters taken from `genome`.
    pub fn with_genome(&self, genome: &AgentGenome) -> Result<Self, AgentError> {
        self.with_values(&genome.values, &genome.manifest)
    }

    pub fn with_values(&self, values: &[f64], manifest: &[TensorSpec]) -> Result<Self, AgentError> {
        Ok(match self {
            Agent::PiCartpole(a) => Agent::PiCartpole(a.with_params(values, manifest)?),
            Agent::PiMinipong(a) => Agent::PiMinipong(a.with_params(values, manifest)?),
            Agent::Fnn(a) => Agent::Fnn(a.with_params(values, manifest)?),
        })
    }

    pub fn config(&self) -> AgentConfig {
        match self {
            Agent::PiCartpole(a) => AgentConfig::PiCartpole(*a.layer.config()),
            Agent::PiMinipong(a) => AgentConfig::PiMinipong(a.config),
            Agent::Fnn(a) => AgentConfig::Fnn(a.config),
        }
    }

    pub fn variant(&self) -> &'static str {
        self.config().variant()
    }

    pub fn is_permutation_invariant(&self) -> bool {
        !matches!(self, Agent::Fnn(_))
    }

    pub fn tensors(&self) -> Vec<(&'static str, &RealMat)> {
        match self {
            Agent::PiCartpole(a) => a.tensors(),
            Agent::PiMinipong(a) => a.tensors(),
            Agent::Fnn(a) => a.tensors(),
        }
    }

    pub fn genome(&self) -> AgentGenome {
        flatten(&self.tensors())
    }

    pub fn initial_state(&self, components: usize) -> PolicyState {
        match self {
            Agent::PiCartpole(a) => PolicyState::Recurrent(a.layer.zero_states(components)),
            _ => PolicyState::Stateless,
        }
    }

    /// Previous-action encoding the policy consumes (`None` at the first step).
    pub fn encode_prev_action(&self, prev: Option<Action>) -> Vec<f64> {
        match self {
            Agent::PiCartpole(_) | Agent::Fnn(_) => vec![prev.map_or(0.0, |a| a.as_f64())],
            Agent::PiMinipong(a) => {
                let mut v = vec![0.0; a.config.layer.num_actions];
                if let Some(Action::Discrete(i)) = prev {
                    if i < v.len() {
                        v[i] = 1.0;
                    }
                }
                v
            }
        }
    }

    /// One policy step. `latent_gain` scales the attention latent before the head.
    pub fn act(
        &self,
        obs: &ObservationSet,
        prev: Option<Action>,
        state: &mut PolicyState,
        latent_gain: f64,
    ) -> Result<(Action, StepInfo), AgentError> {
        match (self, state) {
            (Agent::PiCartpole(a), PolicyState::Recurrent(s)) => {
                let prev = prev.map_or(0.0, |a| a.as_f64());
                let (act, info) = a.act(obs, prev, s, latent_gain)?;
                Ok((Action::Continuous(act), info))
            }
            (Agent::PiMinipong(a), PolicyState::Stateless) => {
                let prev = self.encode_prev_action(prev);
                let (act, info) = a.act(obs, &prev)?;
                Ok((Action::Discrete(act), info))
            }
            (Agent::Fnn(a), PolicyState::Stateless) => {
                let (act, info) = a.act(obs)?;
                Ok((Action::Continuous(act), info))
            }
            (agent, _) => Err(AgentError::Observation {
                agent: agent.variant(),
                reason: "policy state does not match the agent".into(),
            }),
        }
    }

    pub fn to_container(&self) -> Container {
        let genome = self.genome();
        Container::new(
            CHECKPOINT_TAG,
            json!({
                "variant": self.variant(),
                "config": self.config(),
                "manifest": genome.manifest,
            }),
            vec![genome.values],
        )
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self, AgentError> {
        let bad = |reason: String| AgentError::Checkpoint {
            path: path.display().to_string(),
            reason,
        };
        if c.tag != CHECKPOINT_TAG {
            return Err(bad(format!("expected an agent checkpoint, found `{}`", c.tag)));
        }
        let config: AgentConfig = serde_json::from_value(c.header["config"].clone())
            .map_err(|e| bad(format!("config: {e}")))?;
        let manifest: Vec<TensorSpec> = serde_json::from_value(c.header["manifest"].clone())
            .map_err(|e| bad(format!("manifest: {e}")))?;
        if c.header["variant"] != config.variant() {
            return Err(bad(format!(
                "variant tag {} does not match config {}",
                c.header["variant"],
                config.variant()
            )));
        }
        let [values] = c.blocks.as_slice() else {
            return Err(bad(format!("expected 1 parameter block, found {}", c.blocks.len())));
        };
        let expected = manifest_len(&manifest);
        if values.len() != expected {
            return Err(bad(format!(
                "manifest describes {expected} values but the blob holds {}",
                values.len()
            )));
        }
        let genome = AgentGenome::new(values.clone(), manifest)?;
        Self::from_genome(&config, &genome).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let c = Container::load(path)?;
        Self::from_container(&c, path)
    }
}
