//! Full-covariance CMA-ES and the generation loop that trains agents with it.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agents::{Agent, AgentConfig, AgentError, AgentGenome};
use crate::container::{Container, ContainerError};
use crate::envs::EnvConfig;
use crate::numerics::SeededRng;
use crate::perturb::{episode_return, mean_std, PerturbError, PerturbationPlan};

/// Smallest eigenvalue allowed in the covariance before it is repaired.
pub const MIN_EIGENVALUE: f64 = 1e-14;

#[derive(Debug, thiserror::Error)]
pub enum EsError {
    #[error("population size {0} must be at least 4")]
    Population(usize),
    #[error("rollout repetitions must be at least 1")]
    Repetitions,
    #[error("expected {expected} candidates/fitnesses, got {actual}")]
    Count { expected: usize, actual: usize },
    #[error("candidate has {actual} values, expected {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Episode(#[from] PerturbError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Strategy parameters derived from `(n, λ)` following the standard defaults.
#[derive(Clone, Debug, PartialEq)]
struct Params {
    mu: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,
}

impl Params {
    fn new(n: usize, lambda: usize) -> Self {
        let nf = n as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (0..mu)
            .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - ((i + 1) as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
        let c_1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1)
            .min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        Self {
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmaState {
    lambda: usize,
    params: Params,
    pub mean: DVector<f64>,
    pub sigma: f64,
    pub cov: DMatrix<f64>,
    pub p_sigma: DVector<f64>,
    pub p_c: DVector<f64>,
    /// Eigenvectors (columns) of `cov`.
    pub basis: DMatrix<f64>,
    /// Square roots of the eigenvalues of `cov`.
    pub scales: DVector<f64>,
    pub generation: u64,
    pub evaluations: u64,
    eigen_at: u64,
    pub repairs: u64,
}

impl CmaState {
    pub fn new(mean: Vec<f64>, sigma: f64, lambda: usize) -> Result<Self, EsError> {
        if lambda < 4 {
            return Err(EsError::Population(lambda));
        }
        let n = mean.len();
        Ok(Self {
            lambda,
            params: Params::new(n, lambda),
            mean: DVector::from_vec(mean),
            sigma,
            cov: DMatrix::identity(n, n),
            p_sigma: DVector::zeros(n),
            p_c: DVector::zeros(n),
            basis: DMatrix::identity(n, n),
            scales: DVector::from_element(n, 1.0),
            generation: 0,
            evaluations: 0,
            eigen_at: 0,
            repairs: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    pub fn weights(&self) -> &[f64] {
        &self.params.weights
    }

    /// `λ` samples `mean + σ·B·D·z`, `z ~ N(0, I)`.
    pub fn ask(&self, rng: &mut SeededRng) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..self.lambda)
            .map(|_| {
                let z = DVector::from_fn(n, |i, _| self.scales[i] * rng.standard_normal());
                let y = &self.basis * z;
                (0..n).map(|i| self.mean[i] + self.sigma * y[i]).collect()
            })
            .collect()
    }

    /// Indices sorted best first; non-finite fitness ranks last, ties by index.
    pub fn ranking(fitness: &[f64]) -> Vec<usize> {
        let key = |f: f64| if f.is_finite() { f } else { f64::NEG_INFINITY };
        let mut idx: Vec<usize> = (0..fitness.len()).collect();
        idx.sort_by(|&a, &b| key(fitness[b]).total_cmp(&key(fitness[a])).then(a.cmp(&b)));
        idx
    }

    /// Update from `λ` candidates and their fitnesses (higher is better).
    pub fn tell(&mut self, candidates: &[Vec<f64>], fitness: &[f64]) -> Result<(), EsError> {
        let n = self.dim();
        if candidates.len() != self.lambda || fitness.len() != self.lambda {
            return Err(EsError::Count {
                expected: self.lambda,
                actual: candidates.len().min(fitness.len()),
            });
        }
        if let Some(c) = candidates.iter().find(|c| c.len() != n) {
            return Err(EsError::Dimension {
                expected: n,
                actual: c.len(),
            });
        }
        let bad = fitness.iter().filter(|f| !f.is_finite()).count();
        if bad > 0 {
            log::warn!("{bad} non-finite fitness values ranked last");
        }
        let p = self.params.clone();
        let order = Self::ranking(fitness);

        // steps of the selected candidates, in units of sigma
        let mut steps = DMatrix::zeros(n, p.mu);
        for (k, &i) in order.iter().take(p.mu).enumerate() {
            for d in 0..n {
                steps[(d, k)] = (candidates[i][d] - self.mean[d]) / self.sigma;
            }
        }
        let w = DVector::from_vec(p.weights.clone());
        let y_w = &steps * &w;
        self.mean += self.sigma * &y_w;

        // C^{-1/2} y_w = B D^{-1} Bᵀ y_w
        let mut coords = self.basis.tr_mul(&y_w);
        for i in 0..n {
            coords[i] /= self.scales[i];
        }
        let whitened = &self.basis * coords;
        self.p_sigma *= 1.0 - p.c_sigma;
        self.p_sigma += (p.c_sigma * (2.0 - p.c_sigma) * p.mu_eff).sqrt() * whitened;

        self.generation += 1;
        self.evaluations += self.lambda as u64;
        let ps_norm = self.p_sigma.norm();
        let decay = 1.0 - (1.0 - p.c_sigma).powi(2 * self.generation as i32);
        let h_sigma = ps_norm / decay.sqrt() / p.chi_n < 1.4 + 2.0 / (n as f64 + 1.0);
        let hs = if h_sigma { 1.0 } else { 0.0 };

        self.p_c *= 1.0 - p.c_c;
        self.p_c += hs * (p.c_c * (2.0 - p.c_c) * p.mu_eff).sqrt() * &y_w;

        let keep = 1.0 - p.c_1 - p.c_mu + (1.0 - hs) * p.c_1 * p.c_c * (2.0 - p.c_c);
        self.cov *= keep;
        self.cov.ger(p.c_1, &self.p_c, &self.p_c, 1.0);
        let mut weighted = steps.clone();
        for (k, wk) in p.weights.iter().enumerate() {
            weighted.column_mut(k).scale_mut(*wk);
        }
        self.cov.gemm(p.c_mu, &weighted, &steps.transpose(), 1.0);

        self.sigma *= ((p.c_sigma / p.d_sigma) * (ps_norm / p.chi_n - 1.0)).exp();

        let gap = (self.lambda as f64 / (p.c_1 + p.c_mu) / n as f64 / 10.0).max(1.0);
        if (self.evaluations - self.eigen_at) as f64 >= gap {
            self.refresh_eigen();
        }
        Ok(())
    }

    /// Symmetrizes the covariance, recomputes its eigensystem and repairs eigenvalues
    /// below [`MIN_EIGENVALUE`].
    pub fn refresh_eigen(&mut self) {
        self.eigen_at = self.evaluations;
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let mut values = eig.eigenvalues.clone();
        let repaired = values.iter().any(|&v| !(v >= MIN_EIGENVALUE));
        if repaired {
            self.repairs += 1;
            log::warn!("covariance repair at generation {}", self.generation);
            for v in values.iter_mut() {
                if !(*v >= MIN_EIGENVALUE) {
                    *v = MIN_EIGENVALUE;
                }
            }
            let b = &eig.eigenvectors;
            let rebuilt = b * DMatrix::from_diagonal(&values) * b.transpose();
            self.cov = (&rebuilt + rebuilt.transpose()) * 0.5;
        } else {
            self.cov = sym;
        }
        self.basis = eig.eigenvectors;
        self.scales = values.map(f64::sqrt);
    }

    pub fn max_asymmetry(&self) -> f64 {
        (&self.cov - self.cov.transpose()).amax()
    }

    /// Smallest eigenvalue of the current covariance (computed afresh).
    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.cov.clone()).eigenvalues.min()
    }

    fn header(&self) -> serde_json::Value {
        json!({
            "lambda": self.lambda,
            "dim": self.dim(),
            "sigma": self.sigma,
            "generation": self.generation,
            "evaluations": self.evaluations,
            "eigen_at": self.eigen_at,
            "repairs": self.repairs,
        })
    }

    fn blocks(&self) -> Vec<Vec<f64>> {
        vec![
            self.mean.as_slice().to_vec(),
            self.cov.as_slice().to_vec(),
            self.p_sigma.as_slice().to_vec(),
            self.p_c.as_slice().to_vec(),
            self.basis.as_slice().to_vec(),
            self.scales.as_slice().to_vec(),
        ]
    }

    fn restore(header: &serde_json::Value, blocks: &[Vec<f64>]) -> Option<Self> {
        let lambda = header["lambda"].as_u64()? as usize;
        let n = header["dim"].as_u64()? as usize;
        let [mean, cov, ps, pc, basis, scales, ..] = blocks else {
            return None;
        };
        if mean.len() != n || cov.len() != n * n || basis.len() != n * n || scales.len() != n {
            return None;
        }
        Some(Self {
            lambda,
            params: Params::new(n, lambda),
            mean: DVector::from_vec(mean.clone()),
            sigma: header["sigma"].as_f64()?,
            cov: DMatrix::from_vec(n, n, cov.clone()),
            p_sigma: DVector::from_vec(ps.clone()),
            p_c: DVector::from_vec(pc.clone()),
            basis: DMatrix::from_vec(n, n, basis.clone()),
            scales: DVector::from_vec(scales.clone()),
            generation: header["generation"].as_u64()?,
            evaluations: header["evaluations"].as_u64()?,
            eigen_at: header["eigen_at"].as_u64()?,
            repairs: header["repairs"].as_u64()?,
        })
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsConfig {
    pub population: usize,
    pub repetitions: usize,
    pub generations: u64,
    pub sigma_init: f64,
    pub seed: u64,
    /// Evaluate the distribution mean on held-out seeds every this many generations
    /// (0 disables).
    pub validate_every: u64,
    pub validation_episodes: usize,
    /// Write the resumable state every this many generations.
    pub checkpoint_every: u64,
    /// Stop early once the validated return reaches this value.
    pub target_return: Option<f64>,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self {
            population: 64,
            repetitions: 8,
            generations: 2000,
            sigma_init: 0.1,
            seed: 0,
            validate_every: 25,
            validation_episodes: 32,
            checkpoint_every: 25,
            target_return: None,
        }
    }
}

impl EsConfig {
    pub fn validate(&self) -> Result<(), EsError> {
        if self.population < 4 {
            return Err(EsError::Population(self.population));
        }
        if self.repetitions == 0 {
            return Err(EsError::Repetitions);
        }
        Ok(())
    }
}

/// Something CMA-ES can score. `seeds` are shared across the population.
pub trait Fitness: Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, genome: &[f64], seed: u64) -> Result<f64, EsError>;
}

/// Episode return of an agent built from the genome.
pub struct AgentFitness {
    pub template: Agent,
    pub env: EnvConfig,
    pub plan: PerturbationPlan,
}

impl AgentFitness {
    pub fn new(config: &AgentConfig, env: EnvConfig) -> Result<Self, EsError> {
        Ok(Self {
            template: Agent::zeros(config)?,
            env,
            plan: PerturbationPlan::identity(),
        })
    }

    pub fn agent(&self, values: &[f64]) -> Result<Agent, EsError> {
        let manifest = self.template.genome().manifest;
        Ok(self.template.with_values(values, &manifest)?)
    }
}

impl Fitness for AgentFitness {
    fn dim(&self) -> usize {
        self.template.genome().len()
    }

    fn evaluate(&self, genome: &[f64], seed: u64) -> Result<f64, EsError> {
        let agent = self.agent(genome)?;
        Ok(episode_return(&agent, &self.env, &self.plan, seed)?)
    }
}

/// `−‖x‖²`, ignoring the seed.
pub struct Sphere(pub usize);

impl Fitness for Sphere {
    fn dim(&self) -> usize {
        self.0
    }

    fn evaluate(&self, genome: &[f64], _seed: u64) -> Result<f64, EsError> {
        Ok(-genome.iter().map(|x| x * x).sum::<f64>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: u64,
    /// Best fitness seen so far.
    pub best: f64,
    pub gen_best: f64,
    pub mean: f64,
    pub std: f64,
    /// Mean return of the distribution mean on validation seeds, when evaluated.
    pub validation: Option<f64>,
}

pub const HISTORY_HEADER: [&str; 6] = ["generation", "best", "gen_best", "mean", "std", "validation"];

impl GenerationRecord {
    fn csv_row(&self) -> [String; 6] {
        [
            self.generation.to_string(),
            self.best.to_string(),
            self.gen_best.to_string(),
            self.mean.to_string(),
            self.std.to_string(),
            self.validation.map_or(String::new(), |v| v.to_string()),
        ]
    }
}

/// Everything needed to resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct EsCheckpoint {
    pub state: CmaState,
    pub best_fitness: f64,
    pub best_genome: Vec<f64>,
    pub best_validation: f64,
    pub validated_genome: Vec<f64>,
    pub history: Vec<GenerationRecord>,
}

pub const ES_TAG: &str = "es_state";

impl EsCheckpoint {
    pub fn to_container(&self, config: &EsConfig) -> Container {
        let mut blocks = self.state.blocks();
        blocks.push(self.best_genome.clone());
        blocks.push(self.validated_genome.clone());
        Container::new(
            ES_TAG,
            json!({
                "config": config,
                "cma": self.state.header(),
                "best_fitness": finite_or_null(self.best_fitness),
                "best_validation": finite_or_null(self.best_validation),
                "history": self.history,
            }),
            blocks,
        )
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self, EsError> {
        let bad = |reason: &str| EsError::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if c.tag != ES_TAG {
            return Err(bad("not an ES state file"));
        }
        let state = CmaState::restore(&c.header["cma"], &c.blocks).ok_or(bad("corrupt CMA state"))?;
        let [.., best, validated] = c.blocks.as_slice() else {
            return Err(bad("missing genome blocks"));
        };
        let history: Vec<GenerationRecord> = serde_json::from_value(c.header["history"].clone())
            .map_err(|e| bad(&e.to_string()))?;
        Ok(Self {
            state,
            best_fitness: c.header["best_fitness"].as_f64().unwrap_or(f64::NEG_INFINITY),
            best_genome: best.clone(),
            best_validation: c.header["best_validation"].as_f64().unwrap_or(f64::NEG_INFINITY),
            validated_genome: validated.clone(),
            history,
        })
    }
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        serde_json::Value::Null
    }
}

/// Rollout seeds shared by the whole population in `generation`.
pub fn generation_seeds(seed: u64, generation: u64, repetitions: usize) -> Vec<u64> {
    let root = SeededRng::new(seed);
    (0..repetitions as u64)
        .map(|r| root.derive_seed("rollout", generation * repetitions as u64 + r))
        .collect()
}

/// Fixed held-out seeds for validating the distribution mean.
pub fn validation_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    let root = SeededRng::new(seed);
    (0..episodes as u64).map(|i| root.derive_seed("validation", i)).collect()
}

/// Mean fitness of every candidate over the shared seeds, in candidate order.
pub fn evaluate_population<F: Fitness>(
    fitness: &F,
    candidates: &[Vec<f64>],
    seeds: &[u64],
) -> Result<Vec<f64>, EsError> {
    let jobs: Vec<(usize, u64)> = (0..candidates.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let scores = jobs
        .par_iter()
        .map(|&(i, s)| fitness.evaluate(&candidates[i], s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(scores
        .chunks(seeds.len())
        .map(|c| c.iter().sum::<f64>() / seeds.len() as f64)
        .collect())
}

pub struct Trainer<'a, F: Fitness> {
    pub config: EsConfig,
    pub fitness: &'a F,
    pub checkpoint: EsCheckpoint,
}

/// Progress callback: called once per finished generation.
pub type Progress<'p> = &'p mut dyn FnMut(&GenerationRecord, &EsCheckpoint);

impl<'a, F: Fitness> Trainer<'a, F> {
    pub fn new(config: EsConfig, fitness: &'a F) -> Result<Self, EsError> {
        config.validate()?;
        let n = fitness.dim();
        let state = CmaState::new(vec![0.0; n], config.sigma_init, config.population)?;
        Ok(Self {
            config,
            fitness,
            checkpoint: EsCheckpoint {
                state,
                best_fitness: f64::NEG_INFINITY,
                best_genome: vec![0.0; n],
                best_validation: f64::NEG_INFINITY,
                validated_genome: vec![0.0; n],
                history: Vec::new(),
            },
        })
    }

    pub fn resume(config: EsConfig, fitness: &'a F, checkpoint: EsCheckpoint) -> Result<Self, EsError> {
        config.validate()?;
        if checkpoint.state.dim() != fitness.dim() {
            return Err(EsError::Dimension {
                expected: fitness.dim(),
                actual: checkpoint.state.dim(),
            });
        }
        Ok(Self {
            config,
            fitness,
            checkpoint,
        })
    }

    fn reached_target(&self) -> bool {
        self.config
            .target_return
            .is_some_and(|t| self.checkpoint.best_validation >= t)
    }

    /// Runs one generation and returns its record.
    pub fn step(&mut self) -> Result<GenerationRecord, EsError> {
        let cfg = &self.config;
        let ck = &mut self.checkpoint;
        let g = ck.state.generation;
        let mut rng = SeededRng::new(cfg.seed).derive("ask", g);
        let candidates = ck.state.ask(&mut rng);
        let seeds = generation_seeds(cfg.seed, g, cfg.repetitions);
        let scores = evaluate_population(self.fitness, &candidates, &seeds)?;
        let order = CmaState::ranking(&scores);
        let top = order[0];
        if scores[top].is_finite() && scores[top] > ck.best_fitness {
            ck.best_fitness = scores[top];
            ck.best_genome = candidates[top].clone();
        }
        let finite: Vec<f64> = scores.iter().copied().filter(|f| f.is_finite()).collect();
        let (mean, std) = mean_std(&finite);
        ck.state.tell(&candidates, &scores)?;

        let generation = ck.state.generation;
        let validation = if cfg.validate_every > 0
            && (generation % cfg.validate_every == 0 || generation == cfg.generations)
        {
            let mean_genome = ck.state.mean.as_slice().to_vec();
            let vs = validation_seeds(cfg.seed, cfg.validation_episodes);
            let v = evaluate_population(self.fitness, &[mean_genome.clone()], &vs)?[0];
            if v > ck.best_validation {
                ck.best_validation = v;
                ck.validated_genome = mean_genome;
            }
            Some(v)
        } else {
            None
        };
        let record = GenerationRecord {
            generation,
            best: ck.best_fitness,
            gen_best: scores[top],
            mean,
            std,
            validation,
        };
        ck.history.push(record.clone());
        Ok(record)
    }

    /// Runs until `config.generations` (or the target) is reached.
    pub fn run(&mut self, progress: Progress<'_>) -> Result<(), EsError> {
        while self.checkpoint.state.generation < self.config.generations && !self.reached_target() {
            let rec = self.step()?;
            progress(&rec, &self.checkpoint);
        }
        Ok(())
    }
}

pub fn write_history_csv(path: &Path, history: &[GenerationRecord]) -> Result<(), EsError> {
    let io = |e: std::io::Error| EsError::Io {
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

/// Outcome of [`train_agent`].
pub struct EsOutcome {
    pub best: Agent,
    pub checkpoint: EsCheckpoint,
    pub wall_seconds: f64,
}

/// Trains an agent, writing `history.csv`, `es_state.pinn` and `best.pinn` into `dir`.
/// Resumes from `es_state.pinn` if present.
pub fn train_agent(
    agent: &AgentConfig,
    env: EnvConfig,
    config: &EsConfig,
    dir: &Path,
    progress: Progress<'_>,
) -> Result<EsOutcome, EsError> {
    let started = Instant::now();
    let fitness = AgentFitness::new(agent, env)?;
    let state_path = dir.join("es_state.pinn");
    let mut trainer = if state_path.exists() {
        let c = Container::load_tagged(&state_path, ES_TAG)?;
        Trainer::resume(config.clone(), &fitness, EsCheckpoint::from_container(&c, &state_path)?)?
    } else {
        Trainer::new(config.clone(), &fitness)?
    };
    let save = |ck: &EsCheckpoint| -> Result<(), EsError> {
        ck.to_container(config).save(&state_path)?;
        write_history_csv(&dir.join("history.csv"), &ck.history)
    };
    let every = config.checkpoint_every.max(1);
    let mut failure = None;
    trainer.run(&mut |rec, ck| {
        progress(rec, ck);
        if rec.generation % every == 0 && failure.is_none() {
            failure = save(ck).err();
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let ck = trainer.checkpoint.clone();
    save(&ck)?;
    let genome = if ck.best_validation.is_finite() {
        &ck.validated_genome
    } else {
        &ck.best_genome
    };
    let best = fitness.agent(genome)?;
    best.save(&dir.join("best.pinn"))?;
    Ok(EsOutcome {
        best,
        checkpoint: ck,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Genome of the agent that [`train_agent`] would pick from a checkpoint.
pub fn selected_genome(agent: &AgentConfig, ck: &EsCheckpoint) -> Result<AgentGenome, EsError> {
    let values = if ck.best_validation.is_finite() {
        ck.validated_genome.clone()
    } else {
        ck.best_genome.clone()
    };
    Ok(AgentGenome::new(values, agent.manifest()?).map_err(AgentError::from)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_positive_and_normalized() {
        let s = CmaState::new(vec![0.0; 10], 1.0, 20).unwrap();
        assert_eq!(s.weights().len(), 10);
        assert!(s.weights().iter().all(|&w| w > 0.0));
        assert!((s.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.weights().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn zero_sigma_samples_equal_mean() {
        let s = CmaState::new(vec![1.5, -2.0, 0.25], 0.0, 8).unwrap();
        for c in s.ask(&mut SeededRng::new(1)) {
            assert_eq!(c, vec![1.5, -2.0, 0.25]);
        }
    }

    #[test]
    fn ranking_puts_nan_last() {
        assert_eq!(CmaState::ranking(&[1.0, f64::NAN, 3.0, 3.0]), vec![2, 3, 0, 1]);
    }

    #[test]
    fn small_population_rejected() {
        assert!(matches!(CmaState::new(vec![0.0], 1.0, 3), Err(EsError::Population(3))));
    }
}
