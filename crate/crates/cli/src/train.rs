//! `pinn train`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use chrono::Utc;
use pinn_core::bc::{collect, train_student, BcDataset, Teacher};
use pinn_core::es::train_agent;

use crate::config::{ExperimentConfig, TeacherSpec, TrainerConfig};
use crate::manifest::write_manifest;
use crate::{load_agent, prepare_dir, CONFIG_FILE};

pub const DATASET_FILE: &str = "dataset.pinn";

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Overrides the config's `output_dir`.
    pub out: Option<PathBuf>,
    /// Delete an existing run directory first.
    pub force: bool,
    /// Continue a run in an existing directory with the same config.
    pub resume: bool,
}

/// Runs the configured trainer; returns the run directory.
pub fn train(config_path: &Path, opts: &TrainOptions) -> anyhow::Result<PathBuf> {
    let cfg = ExperimentConfig::load(config_path)?;
    let dir = opts.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    run(&cfg, &dir, opts)?;
    Ok(dir)
}

pub fn run(cfg: &ExperimentConfig, dir: &Path, opts: &TrainOptions) -> anyhow::Result<()> {
    let started = Utc::now();
    let config_path = dir.join(CONFIG_FILE);
    if opts.resume && config_path.exists() {
        let previous = ExperimentConfig::load(&config_path)?;
        if previous.hash() != cfg.hash() {
            bail!(
                "{} holds a run with a different config; use --force to start over",
                dir.display()
            );
        }
    }
    prepare_dir(dir, opts.force, opts.resume)?;
    std::fs::write(&config_path, serde_json::to_string_pretty(&cfg.to_value())? + "\n")
        .with_context(|| format!("writing {}", config_path.display()))?;

    match &cfg.trainer {
        TrainerConfig::Es { es } => {
            let outcome = train_agent(&cfg.agent, cfg.env, es, dir, &mut |rec, _| {
                if rec.generation % 10 == 0 || rec.validation.is_some() {
                    log::info!(
                        "generation {} best {:.2} mean {:.2} validation {:?}",
                        rec.generation,
                        rec.best,
                        rec.mean,
                        rec.validation
                    );
                }
            })?;
            log::info!(
                "done: best validated return {:.2}",
                outcome.checkpoint.best_validation
            );
        }
        TrainerConfig::Bc {
            teacher,
            episodes,
            holdout_fraction,
            bc,
        } => {
            let dataset_path = dir.join(DATASET_FILE);
            let data = if dataset_path.exists() {
                BcDataset::load(&dataset_path)?
            } else {
                let teacher = match teacher {
                    TeacherSpec::ScriptedExpert => Teacher::ScriptedExpert,
                    TeacherSpec::Checkpoint(p) => Teacher::Agent(load_agent(p)?),
                };
                let data = collect(&teacher, &cfg.env, *episodes, cfg.collection_seed())?;
                data.save(&dataset_path)?;
                data
            };
            log::info!(
                "dataset: {} episodes, {} records, actions {:?}",
                data.num_episodes(),
                data.num_records(),
                data.action_counts()
            );
            let (train, holdout) = data.split_holdout(*holdout_fraction);
            let student = cfg.initial_student()?;
            let state = train_student(&student, &train, Some(&holdout), bc, dir)?;
            if let Some(last) = state.history.last() {
                log::info!(
                    "done: loss {:.5} holdout agreement {:?}",
                    last.loss,
                    last.agreement
                );
            }
        }
    }
    write_manifest(dir, "train", Some(cfg.hash()), started)?;
    Ok(())
}
