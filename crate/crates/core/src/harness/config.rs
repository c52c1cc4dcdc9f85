use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::agentic_q::{QConfig, QTrainConfig};
use crate::policy::PolicyConfig;
use crate::rng::{mix, tag};
use crate::swpo::SwpoConfig;
use crate::synthweb::WorldParams;

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Free-form run label used to group runs in reports.
    pub label: String,
    pub world: WorldParams,
    /// Seed of the world suite; fixed across training seeds.
    pub suite_seed: u64,
    pub train_worlds: usize,
    pub heldout_worlds: usize,
    pub tasks_per_world: usize,
    /// Training tasks that receive oracle demonstrations.
    pub sft_tasks: usize,
    pub sft_steps: usize,
    pub sft_lr: f64,
    pub policy: PolicyConfig,
    /// Rollouts per training task for stratification.
    pub n: usize,
    pub p_fault: f64,
    /// Reruns after a fault-contaminated rollout.
    pub max_retries: u32,
    pub t_max: usize,
    pub q: QConfig,
    pub q_train: QTrainConfig,
    pub swpo: SwpoConfig,
    /// Training randomness: policy init, rollouts, Q and SWPO.
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            label: "default".into(),
            world: WorldParams::default(),
            suite_seed: 0,
            train_worlds: 8,
            heldout_worlds: 25,
            tasks_per_world: 8,
            sft_tasks: 16,
            sft_steps: 100,
            sft_lr: 0.1,
            policy: PolicyConfig::default(),
            n: 8,
            p_fault: 0.1,
            max_retries: 5,
            t_max: 15,
            q: QConfig::default(),
            q_train: QTrainConfig::default(),
            swpo: SwpoConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_world_seeds(&self) -> Vec<u64> {
        (0..self.train_worlds as u64)
            .map(|i| mix(&[tag::WORLD, self.suite_seed, 0, i]))
            .collect()
    }

    /// Fresh worlds never used for training.
    pub fn heldout_world_seeds(&self) -> Vec<u64> {
        (0..self.heldout_worlds as u64)
            .map(|i| mix(&[tag::WORLD, self.suite_seed, 1, i]))
            .collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.train_worlds == 0 || self.heldout_worlds == 0 || self.tasks_per_world == 0 {
            return bad("world and task counts must be positive".into());
        }
        if self.sft_tasks == 0 || self.sft_tasks > self.train_worlds * self.tasks_per_world {
            return bad(format!("sft_tasks must be in 1..={}", self.train_worlds * self.tasks_per_world));
        }
        if self.n < 2 {
            return bad("n must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.p_fault) {
            return bad("p_fault must lie in [0, 1]".into());
        }
        if self.t_max == 0 || !(self.sft_lr > 0.0) {
            return bad("t_max and sft_lr must be positive".into());
        }
        if self.q.window == 0 {
            return bad("window must be at least 1".into());
        }
        self.swpo.clip.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let train: BTreeSet<u64> = self.train_world_seeds().into_iter().collect();
        if self.heldout_world_seeds().iter().any(|s| train.contains(s)) {
            return bad("held-out worlds overlap training worlds".into());
        }
        Ok(())
    }
}

/// Held-out task ids must not occur among training task ids.
pub fn check_disjoint<'a>(
    train: impl IntoIterator<Item = &'a str>,
    heldout: impl IntoIterator<Item = &'a str>,
) -> Result<(), HarnessError> {
    let train: BTreeSet<&str> = train.into_iter().collect();
    if let Some(id) = heldout.into_iter().find(|id| train.contains(id)) {
        return Err(HarnessError::Config(format!("held-out task {id} is also a training task")));
    }
    Ok(())
}
