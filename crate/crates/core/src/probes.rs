//! Diagnostics over roll-outs: latent equality under input shuffling, linear R² probes
//! from the latent to the raw inputs, attention-argmax saliency and a PCA projection.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::agents::Agent;
use crate::envs::EnvConfig;
use crate::numerics::{argmax, RealMat};
use crate::perturb::{
    run_episode, EpisodeOptions, EpisodeRunner, EpisodeTrace, PerturbError, PerturbationPlan,
    ShuffleSchedule, TraceDetail,
};

pub const PROBES: [&str; 4] = ["latent-equality", "r2", "attention", "project2d"];
pub const RIDGE_LAMBDA: f64 = 1e-6;
pub const CARTPOLE_INPUTS: [&str; 5] = ["x", "x_dot", "cos_theta", "sin_theta", "theta_dot"];

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("unknown probe `{0}`; available: latent-equality, r2, attention, project2d")]
    UnknownProbe(String),
    #[error("{0}")]
    Input(String),
    #[error("metric `{0}` is not finite")]
    NonFinite(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Perturb(#[from] PerturbError),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ProbeError + '_ {
    move |source| ProbeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ProbeReport {
    pub probe: String,
    pub inputs: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
    pub flags: Vec<String>,
    pub artifacts: Vec<PathBuf>,
}

impl ProbeReport {
    pub fn new(probe: &str) -> Self {
        Self {
            probe: probe.into(),
            ..Default::default()
        }
    }

    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    /// Errors on the first non-finite metric.
    pub fn check(&self) -> Result<(), ProbeError> {
        match self.metrics.iter().find(|(_, v)| !v.is_finite()) {
            Some((k, _)) => Err(ProbeError::NonFinite(k.clone())),
            None => Ok(()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ProbeError> {
        self.check()?;
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }
}

// ---------------------------------------------------------------------------
// Latent equality

/// Runs two episodes from the same seed, the second with every input channel
/// reordered by `perm` from the first step (state permuted jointly). Returns the largest
/// per-step infinity-norm difference between the two latents.
pub fn latent_equality(
    agent: &Agent,
    env: &EnvConfig,
    seed: u64,
    perm: &[usize],
    max_steps: Option<usize>,
) -> Result<f64, ProbeError> {
    let plan = PerturbationPlan::identity();
    let options = EpisodeOptions {
        joint_state_permutation: true,
        ..Default::default()
    };
    let mut plain = EpisodeRunner::new(agent, env, &plan, seed, &options)?;
    let mut shuffled = EpisodeRunner::new(agent, env, &plan, seed, &options)?;
    let n = plain.env.observe().len();
    if perm.len() != n || !is_permutation(perm) {
        return Err(ProbeError::Input(format!("not a permutation of {n} channels")));
    }
    shuffled.perturber.set_permutation(Some(perm.to_vec()));
    let limit = max_steps.unwrap_or(usize::MAX);
    let mut worst: f64 = 0.0;
    while !plain.is_done() && !shuffled.is_done() && plain.step < limit {
        let a = plain.step_once()?;
        let b = shuffled.step_once()?;
        let diff = a
            .info
            .latent
            .data()
            .iter()
            .zip(b.info.latent.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        worst = worst.max(diff);
    }
    Ok(worst)
}

fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&i| i < p.len() && !std::mem::replace(&mut seen[i], true))
}

// ---------------------------------------------------------------------------
// R² probe

#[derive(Clone, Debug, PartialEq)]
pub struct R2Result {
    /// One coefficient of determination per target column.
    pub r2: Vec<f64>,
    /// The design matrix was rank-deficient and a small ridge penalty was used.
    pub ridge: bool,
}

/// Least squares with intercept from the rows of `features` to each column of
/// `targets`. Targets with zero variance get R² = 0.
pub fn r2_probe(features: &RealMat, targets: &RealMat) -> Result<R2Result, ProbeError> {
    let (n, d) = features.shape();
    if targets.rows() != n || n <= d + 1 {
        return Err(ProbeError::Input(format!(
            "need more samples than features: {n} samples, {d} features, {} targets",
            targets.rows()
        )));
    }
    let center = |m: &RealMat| {
        let mut out = DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
        for mut col in out.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        out
    };
    let x = center(features);
    let y = center(targets);
    let gram = x.transpose() * &x;
    let eig = SymmetricEigen::new(gram.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let low = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let ridge = !(low > 1e-12 * top.max(f64::MIN_POSITIVE));
    let mut system = gram;
    if ridge {
        for i in 0..d {
            system[(i, i)] += RIDGE_LAMBDA * n as f64;
        }
    }
    let rhs = x.transpose() * &y;
    let coef = match system.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => system
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| ProbeError::Input(e.to_string()))?,
    };
    let resid = &y - &x * coef;
    let r2 = (0..targets.cols())
        .map(|k| {
            let sst = y.column(k).norm_squared();
            if sst == 0.0 {
                0.0
            } else {
                1.0 - resid.column(k).norm_squared() / sst
            }
        })
        .collect();
    Ok(R2Result { r2, ridge })
}

/// Latent rows and unshuffled observation rows from traces recorded at
/// [`TraceDetail::Full`].
pub fn latent_and_inputs(traces: &[EpisodeTrace]) -> Result<(RealMat, RealMat), ProbeError> {
    let mut latents = Vec::new();
    let mut inputs = Vec::new();
    let (mut d, mut k) = (0, 0);
    for trace in traces {
        for step in &trace.steps {
            let (Some(latent), Some(raw)) = (&step.latent, &step.raw_obs) else {
                return Err(ProbeError::Input("traces lack latents or raw observations".into()));
            };
            d = latent.len();
            k = raw.len();
            latents.extend_from_slice(latent.data());
            for i in 0..raw.len() {
                inputs.push(raw.component(i)[0]);
            }
        }
    }
    let n = if d == 0 { 0 } else { latents.len() / d };
    let f = RealMat::from_vec(n, d, latents).map_err(|e| ProbeError::Input(e.to_string()))?;
    let t = RealMat::from_vec(n, k, inputs).map_err(|e| ProbeError::Input(e.to_string()))?;
    Ok((f, t))
}

/// Episodes with one random input permutation each, kept for the whole episode.
pub fn shuffled_traces(
    agent: &Agent,
    env: &EnvConfig,
    seeds: &[u64],
) -> Result<Vec<EpisodeTrace>, ProbeError> {
    let plan = PerturbationPlan {
        shuffle: ShuffleSchedule::Once,
        ..Default::default()
    };
    let options = EpisodeOptions {
        detail: TraceDetail::Full,
        ..Default::default()
    };
    seeds
        .iter()
        .map(|&s| Ok(run_episode(agent, env, &plan, s, &options)?))
        .collect()
}

pub fn write_r2_csv(path: &Path, names: &[&str], r2: &[f64]) -> Result<(), ProbeError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path)(e.into()))?;
    w.write_record(names).map_err(|e| io_err(path)(e.into()))?;
    w.write_record(r2.iter().map(|v| v.to_string()))
        .map_err(|e| io_err(path)(e.into()))?;
    w.flush().map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Attention saliency

/// Per latent row, the patch with the largest weight (lowest index on ties).
pub fn attention_argmax(attention: &RealMat) -> Vec<usize> {
    (0..attention.rows()).map(|r| argmax(attention.row(r))).collect()
}

/// Sorted distinct entries.
pub fn unique_patches(rows: &[usize]) -> Vec<usize> {
    let mut out = rows.to_vec();
    out.sort_unstable();
    out.dedup();
    out
}

/// Grayscale overlay: attended patches drawn at mid-gray, frame pixels on top in white.
pub fn saliency_overlay(frame: &RealMat, patch: usize, attended: &[usize]) -> RealMat {
    let gw = frame.cols() / patch;
    let mut out = RealMat::zeros(frame.rows(), frame.cols());
    for &i in attended {
        let (pr, pc) = (i / gw, i % gw);
        for r in 0..patch {
            for c in 0..patch {
                out.set(pr * patch + r, pc * patch + c, 0.5);
            }
        }
    }
    for r in 0..frame.rows() {
        for c in 0..frame.cols() {
            if frame.get(r, c) > 0.0 {
                out.set(r, c, 1.0);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// 2-D projection

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `n × 2`.
    pub coords: RealMat,
    /// Share of total variance on the two components, in `[0, 1]`.
    pub explained: f64,
    /// All points coincide; coordinates are zero.
    pub zero_variance: bool,
}

/// Principal-component projection of the rows of `points` onto two axes. Each axis is
/// signed so its largest-magnitude loading is positive.
pub fn project2d(points: &RealMat) -> Result<Projection, ProbeError> {
    let (n, d) = points.shape();
    if n < 3 || d == 0 {
        return Err(ProbeError::Input(format!("need at least 3 points, got {n}")));
    }
    let mut x = DMatrix::from_row_slice(n, d, points.data());
    for mut col in x.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x;
    let total = cov.trace();
    if !(total > 0.0) {
        return Ok(Projection {
            coords: RealMat::zeros(n, 2),
            explained: 0.0,
            zero_variance: true,
        });
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut coords = RealMat::zeros(n, 2);
    let mut explained = 0.0;
    for (k, &idx) in order.iter().take(2).enumerate() {
        let mut axis: DVector<f64> = eig.eigenvectors.column(idx).into_owned();
        let lead = axis.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            axis.neg_mut();
        }
        explained += eig.eigenvalues[idx].max(0.0);
        let proj = &x * axis;
        for r in 0..n {
            coords.set(r, k, proj[r]);
        }
    }
    Ok(Projection {
        coords,
        explained: (explained / total).clamp(0.0, 1.0),
        zero_variance: false,
    })
}

pub fn write_coords_csv(path: &Path, coords: &RealMat) -> Result<(), ProbeError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path)(e.into()))?;
    w.write_record(["pc1", "pc2"]).map_err(|e| io_err(path)(e.into()))?;
    for r in 0..coords.rows() {
        w.write_record(coords.row(r).iter().map(|v| v.to_string()))
            .map_err(|e| io_err(path)(e.into()))?;
    }
    w.flush().map_err(io_err(path))
}
