//! Experiment configuration files.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use pinn_core::agents::{Agent, AgentConfig};
use pinn_core::bc::BcConfig;
use pinn_core::envs::EnvConfig;
use pinn_core::es::EsConfig;
use pinn_core::numerics::SeededRng;
use pinn_core::perturb::PerturbationPlan;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Published schema for experiment configs.
pub const SCHEMA: &str = include_str!("../../../configs/schema.json");

fn validator() -> &'static jsonschema::Validator {
    static V: OnceLock<jsonschema::Validator> = OnceLock::new();
    V.get_or_init(|| {
        let schema: serde_json::Value = serde_json::from_str(SCHEMA).expect("schema is JSON");
        jsonschema::validator_for(&schema).expect("schema compiles")
    })
}

/// `/a/b/0` → `a.b.0`; the root is `<root>`.
fn dotted(pointer: &str) -> String {
    let p = pointer.trim_start_matches('/').replace('/', ".");
    if p.is_empty() {
        "<root>".into()
    } else {
        p
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Syntax {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: at `{field}`: {message}")]
    Field {
        path: PathBuf,
        field: String,
        message: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Source of every random stream in the experiment.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub trainer: TrainerConfig,
    /// Default perturbation for `eval`.
    #[serde(default)]
    pub perturbation: PerturbationPlan,
    #[serde(default)]
    pub eval: EvalProtocol,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainerConfig {
    Es {
        #[serde(default)]
        es: EsConfig,
    },
    Bc {
        teacher: TeacherSpec,
        #[serde(default = "default_bc_episodes")]
        episodes: usize,
        #[serde(default = "default_holdout")]
        holdout_fraction: f64,
        #[serde(default)]
        bc: BcConfig,
    },
}

fn default_bc_episodes() -> usize {
    200
}

fn default_holdout() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherSpec {
    ScriptedExpert,
    /// Agent checkpoint, relative to the config file.
    Checkpoint(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub episodes: usize,
    /// First evaluation seed; derived from the global seed when absent.
    pub seed: Option<u64>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            episodes: 100,
            seed: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text, path)?;
        if let TrainerConfig::Bc {
            teacher: TeacherSpec::Checkpoint(p),
            ..
        } = &mut cfg.trainer
        {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Parses and validates; `path` only labels errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let field_err = |field: &str, message: String| ConfigError::Field {
            path: path.to_path_buf(),
            field: field.into(),
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|source| ConfigError::Syntax {
                path: path.to_path_buf(),
                source,
            })?;
        for section in ["es", "bc"] {
            if value.pointer(&format!("/trainer/{section}/seed")).is_some() {
                return Err(field_err(
                    &format!("trainer.{section}.seed"),
                    "trainer seeds derive from the top-level `seed`".into(),
                ));
            }
        }
        if let Some(e) = validator().iter_errors(&value).next() {
            return Err(field_err(&dotted(&e.instance_path.to_string()), e.to_string()));
        }
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let field = e.path().to_string();
            field_err(&field, e.into_inner().to_string())
        })?;
        cfg.resolve_seeds();
        cfg.validate().map_err(|(field, msg)| field_err(field, msg))?;
        Ok(cfg)
    }

    fn resolve_seeds(&mut self) {
        let root = SeededRng::new(self.seed);
        match &mut self.trainer {
            TrainerConfig::Es { es } => es.seed = self.seed,
            TrainerConfig::Bc { bc, .. } => bc.seed = root.derive_seed("bc", 0),
        }
    }

    fn validate(&self) -> Result<(), (&'static str, String)> {
        let continuous = matches!(self.env, EnvConfig::Cartpole(_));
        let compatible = match self.agent {
            AgentConfig::PiMinipong(c) => match self.env {
                EnvConfig::Minipong(m) => c.layer.patch == m.patch && c.layer.frames == m.frames,
                _ => false,
            },
            _ => continuous,
        };
        if !compatible {
            return Err((
                "agent",
                format!("{} agent cannot act in {}", self.agent.variant(), self.env.name()),
            ));
        }
        self.agent.genome_len().map_err(|e| ("agent", e.to_string()))?;
        self.perturbation
            .validate(continuous)
            .map_err(|e| ("perturbation", e.to_string()))?;
        if self.eval.episodes == 0 {
            return Err(("eval.episodes", "must be positive".into()));
        }
        match &self.trainer {
            TrainerConfig::Es { es } => es.validate().map_err(|e| ("trainer.es", e.to_string())),
            TrainerConfig::Bc {
                teacher,
                episodes,
                holdout_fraction,
                bc,
            } => {
                if *episodes < 2 {
                    return Err(("trainer.episodes", "need at least 2 episodes".into()));
                }
                if !(0.0 < *holdout_fraction && *holdout_fraction < 1.0) {
                    return Err(("trainer.holdout_fraction", "must lie in (0, 1)".into()));
                }
                if *teacher == TeacherSpec::ScriptedExpert && continuous {
                    return Err(("trainer.teacher", "the scripted expert plays MiniPong".into()));
                }
                bc.validate().map_err(|e| ("trainer.bc", e.to_string()))
            }
        }
    }

    /// The config as a user would write it: derived trainer seeds left out.
    pub fn to_value(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for section in ["es", "bc"] {
            if let Some(s) = v["trainer"].get_mut(section).and_then(|s| s.as_object_mut()) {
                s.remove("seed");
            }
        }
        v
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_value()).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval
            .seed
            .unwrap_or_else(|| SeededRng::new(self.seed).derive_seed("eval", 0))
    }

    /// Seed for teacher roll-outs.
    pub fn collection_seed(&self) -> u64 {
        SeededRng::new(self.seed).derive_seed("collect", 0)
    }

    /// Initial student weights for BC.
    pub fn initial_student(&self) -> Result<Agent, pinn_core::agents::AgentError> {
        Agent::random(&self.agent, &mut SeededRng::new(self.seed).derive("init", 0))
    }
}
