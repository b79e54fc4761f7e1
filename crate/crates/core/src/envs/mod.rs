//! In-house environments.

pub mod cartpole;
pub mod frames;
pub mod minipong;

use serde::{Deserialize, Serialize};

use crate::attention::ObservationSet;

pub use cartpole::{cartpole_reset, cartpole_step, Cartpole, CartpoleConfig, CartpoleState};
pub use frames::{patchify, pgm_bytes, unpatchify, write_pgm, FrameError, FrameStack};
pub use minipong::{
    minipong_render, render_key, scripted_expert, Minipong, MinipongConfig, MinipongError,
    MinipongState, OpponentPolicy,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Continuous(f64),
    Discrete(usize),
}

impl Action {
    pub fn as_f64(&self) -> f64 {
        match *self {
            Action::Continuous(a) => a,
            Action::Discrete(a) => a as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    Cartpole(CartpoleConfig),
    Minipong(MinipongConfig),
}

impl EnvConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Cartpole(_) => "cartpole",
            EnvConfig::Minipong(_) => "minipong",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("{env} cannot take a {action:?} action")]
    ActionKind { env: &'static str, action: Action },
    #[error(transparent)]
    Minipong(#[from] MinipongError),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

#[derive(Clone, Debug)]
pub enum Env {
    Cartpole(Cartpole),
    Minipong(Minipong),
}

impl Env {
    pub fn new(cfg: &EnvConfig) -> Self {
        match cfg {
            EnvConfig::Cartpole(c) => Env::Cartpole(Cartpole::new(*c)),
            EnvConfig::Minipong(c) => Env::Minipong(Minipong::new(*c)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Env::Cartpole(_) => "cartpole",
            Env::Minipong(_) => "minipong",
        }
    }

    pub fn reset(&mut self, seed: u64) {
        match self {
            Env::Cartpole(e) => e.reset(seed),
            Env::Minipong(e) => e.reset(seed),
        }
    }

    /// Unperturbed observation in canonical order.
    pub fn observe(&self) -> ObservationSet {
        match self {
            Env::Cartpole(e) => {
                ObservationSet::scalars(&e.state.observation()).expect("five readings")
            }
            Env::Minipong(e) => {
                patchify(e.frames(), e.config.patch).expect("config divisible into patches")
            }
        }
    }

    /// Applies an action; returns `(reward, done)`.
    pub fn step(&mut self, action: Action) -> Result<(f64, bool), EnvError> {
        match (self, action) {
            (Env::Cartpole(e), Action::Continuous(a)) => Ok(e.step(a)),
            (Env::Minipong(e), Action::Discrete(a)) => Ok(e.step(a)?),
            (env, action) => Err(EnvError::ActionKind {
                env: env.name(),
                action,
            }),
        }
    }

    pub fn is_done(&self) -> bool {
        match self {
            Env::Cartpole(e) => e.is_done(),
            Env::Minipong(e) => e.is_done(),
        }
    }

    pub fn step_count(&self) -> usize {
        match self {
            Env::Cartpole(e) => e.state.step_count,
            Env::Minipong(e) => e.state.step_count,
        }
    }
}
