//! Step-wise policy optimization: candidate groups sampled from the frozen
//! policy at stored states, scored by agentic-Q, filtered, turned into
//! advantages and weights, and fed to the clipped surrogate. No environment
//! is involved.

mod advantage;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use advantage::{
    adaptive_group_weights, advantage_sgrpo, advantage_srfpp, advantage_srloo, advantage_srloo_scaled, mean,
    population_std,
};

use crate::agentic_q::QModel;
use crate::policy::{clipped_surrogate, entropy, Policy, PolicyError, StepEmission, SurrogateTerm};
use crate::protocol::AgentStep;
use crate::rng::{stream, tag, Rng};
use crate::tensor::Adam;
use crate::trajectories::{Stratification, Trajectory, WindowedState};

#[derive(Debug, Error)]
pub enum SwpoError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("group returns have zero spread")]
    ZeroStd,
    #[error("batch advantages have zero spread")]
    ZeroBatchStd,
    #[error("empty batch")]
    EmptyBatch,
    #[error("state pool is empty")]
    EmptyPool,
    #[error("objective is not finite")]
    NonFiniteObjective,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Advantage estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "s-grpo")]
    SGrpo,
    #[serde(rename = "s-rloo")]
    SRloo,
    #[serde(rename = "s-rf++")]
    SRfpp,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::SGrpo, Variant::SRloo, Variant::SRfpp];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SGrpo => "s-grpo",
            Variant::SRloo => "s-rloo",
            Variant::SRfpp => "s-rf++",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = SwpoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| SwpoError::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub eps: f64,
    /// Adam step size for the ascent steps.
    pub lr: f64,
    pub variant: Variant,
    /// Candidates per state.
    pub k: usize,
    pub sigma_min: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps: 0.2,
            lr: 0.001,
            variant: Variant::SGrpo,
            k: 8,
            sigma_min: 0.05,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<(), SwpoError> {
        if !(self.eps > 0.0) {
            return Err(SwpoError::InvalidConfig(format!("eps must be positive, got {}", self.eps)));
        }
        if self.k < 2 {
            return Err(SwpoError::InvalidConfig(format!("K must be at least 2, got {}", self.k)));
        }
        if !(self.lr > 0.0) || !(self.sigma_min >= 0.0) {
            return Err(SwpoError::InvalidConfig("lr must be positive and sigma_min non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwpoConfig {
    pub clip: ClipConfig,
    pub iterations: usize,
    /// States drawn from the pool per iteration.
    pub states_per_iter: usize,
    /// Surrogate ascent steps against each frozen old policy.
    pub ascent_steps: usize,
    /// Identical-action and low-spread filtering. When off, only groups
    /// whose returns are exactly equal are dropped.
    pub filtering: bool,
    /// Adaptive group weights; uniform weights when off.
    pub weighting: bool,
    /// Pool states used for the entropy diagnostic.
    pub entropy_states: usize,
    pub seed: u64,
}

impl Default for SwpoConfig {
    fn default() -> Self {
        Self {
            clip: ClipConfig::default(),
            iterations: 30,
            states_per_iter: 32,
            ascent_steps: 2,
            filtering: true,
            weighting: true,
            entropy_states: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FilterReason {
    IdenticalActions,
    LowStd,
}

/// A state with its K scored candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub state_id: usize,
    pub state: WindowedState,
    pub emissions: Vec<StepEmission>,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
    pub mean_return: f64,
    pub weight: f64,
    pub discard: Option<FilterReason>,
}

impl GroupBatch {
    pub fn kept(&self) -> bool {
        self.discard.is_none()
    }
}

/// K independent samples from the frozen policy at `state`.
pub fn group_rollout(policy_old: &Policy, state: &WindowedState, k: usize, rng: &mut Rng) -> Result<Vec<StepEmission>, SwpoError> {
    if k < 2 {
        return Err(SwpoError::InvalidConfig(format!("K must be at least 2, got {k}")));
    }
    Ok((0..k).map(|_| policy_old.sample_step(&state.current, rng)).collect())
}

/// Agentic-Q returns of each candidate.
pub fn score_group(q: &QModel, state: &WindowedState, emissions: &[StepEmission]) -> Vec<f64> {
    emissions.iter().map(|e| q.predict(state, &e.step)).collect()
}

/// Discards groups whose actions are all identical (thoughts ignored) or
/// whose returns have population std below `sigma_min`.
pub fn filter_group(emissions: &[StepEmission], returns: &[f64], sigma_min: f64) -> Option<FilterReason> {
    let actions: HashSet<AgentStep> = emissions.iter().map(|e| e.step.canonical()).collect();
    if actions.len() <= 1 {
        return Some(FilterReason::IdenticalActions);
    }
    if population_std(returns) < sigma_min {
        return Some(FilterReason::LowStd);
    }
    None
}

/// Fills advantages and weights of the kept groups in place.
pub fn assign_advantages(groups: &mut [GroupBatch], variant: Variant, weighting: bool) -> Result<(), SwpoError> {
    let kept: Vec<usize> = (0..groups.len()).filter(|&i| groups[i].kept()).collect();
    if kept.is_empty() {
        return Err(SwpoError::EmptyBatch);
    }
    match variant {
        Variant::SGrpo => {
            for &i in &kept {
                groups[i].advantages = advantage_sgrpo(&groups[i].returns)?;
            }
        }
        Variant::SRloo => {
            for &i in &kept {
                groups[i].advantages = advantage_srloo(&groups[i].returns)?;
            }
        }
        Variant::SRfpp => {
            let g: Vec<Vec<f64>> = kept.iter().map(|&i| groups[i].returns.clone()).collect();
            let t: Vec<Vec<usize>> = kept
                .iter()
                .map(|&i| groups[i].emissions.iter().map(|e| e.tokens.len()).collect())
                .collect();
            for (&i, a) in kept.iter().zip(advantage_srfpp(&g, &t)?) {
                groups[i].advantages = a;
            }
        }
    }
    let means: Vec<f64> = kept.iter().map(|&i| groups[i].mean_return).collect();
    let weights = if weighting {
        adaptive_group_weights(&means)?
    } else {
        vec![1.0 / kept.len() as f64; kept.len()]
    };
    for (&i, u) in kept.iter().zip(weights) {
        groups[i].weight = u;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub objective: f64,
    pub clip_frac: f64,
    pub mean_abs_advantage: f64,
    pub tokens: usize,
}

/// The weighted clipped objective over the kept groups and its gradient.
/// Candidate `i` of group `s` carries weight `u(s) / (K · L_i)` with `L_i`
/// its token count; old log-probabilities are those recorded at sampling.
pub fn swpo_objective(policy: &Policy, groups: &[GroupBatch], eps: f64) -> (UpdateStats, Vec<f64>) {
    let mut terms = Vec::new();
    let mut abs_adv = 0.0;
    for g in groups.iter().filter(|g| g.kept()) {
        let k = g.emissions.len() as f64;
        for (e, &a) in g.emissions.iter().zip(&g.advantages) {
            abs_adv += a.abs();
            terms.push(SurrogateTerm {
                obs: &g.state.current,
                tokens: &e.tokens,
                old_log_probs: &e.log_probs,
                advantage: a,
                weight: g.weight / (k * e.tokens.len() as f64),
            });
        }
    }
    let (s, grad) = clipped_surrogate(policy, &terms, eps);
    let stats = UpdateStats {
        objective: s.objective,
        clip_frac: s.clip_frac,
        mean_abs_advantage: if terms.is_empty() { 0.0 } else { abs_adv / terms.len() as f64 },
        tokens: s.tokens,
    };
    (stats, grad)
}

/// One ascent step on the clipped objective. Returns the pre-step value.
pub fn swpo_update(policy: &mut Policy, groups: &[GroupBatch], clip: &ClipConfig, opt: &mut Adam) -> Result<UpdateStats, SwpoError> {
    let (stats, grad) = swpo_objective(policy, groups, clip.eps);
    if !stats.objective.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(SwpoError::NonFiniteObjective);
    }
    let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
    opt.step(&mut policy.params_mut().data, &descent);
    Ok(stats)
}

/// One row of the per-iteration metric log. Row 0 describes the starting
/// policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterMetrics {
    pub iter: usize,
    pub variant: String,
    pub objective: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    pub kept_groups: usize,
    pub filtered_identical: usize,
    pub filtered_lowstd: usize,
    /// Shannon entropy of the group weights u(s) over the kept groups.
    pub mean_u_entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwpoOutcome {
    pub policy: Policy,
    pub metrics: Vec<IterMetrics>,
}

impl SwpoOutcome {
    pub fn initial_entropy(&self) -> f64 {
        self.metrics[0].entropy
    }

    pub fn final_entropy(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.entropy)
    }
}

/// Windowed states of every step of every trajectory of the kept tasks.
pub fn state_pool(trajectories: &[Trajectory], strat: &Stratification) -> Vec<WindowedState> {
    trajectories
        .iter()
        .filter(|t| strat.kept.contains(&t.task_id))
        .flat_map(|t| (0..t.steps.len()).map(move |i| t.state_at(i)))
        .collect()
}

fn pool_entropy(policy: &Policy, probe: &[&crate::synthweb::Observation], seed: u64) -> Result<f64, SwpoError> {
    Ok(policy.policy_entropy(probe, &mut stream(&[tag::SWPO, seed, 0xE7]))?)
}

/// Builds the scored and filtered groups of one iteration.
pub fn build_groups(
    policy_old: &Policy,
    q: &QModel,
    pool: &[WindowedState],
    ids: &[usize],
    cfg: &SwpoConfig,
    iter: usize,
) -> Result<Vec<GroupBatch>, SwpoError> {
    let mut groups = Vec::with_capacity(ids.len());
    for (slot, &id) in ids.iter().enumerate() {
        let state = &pool[id];
        let mut rng = stream(&[tag::SWPO, cfg.seed, iter as u64, slot as u64]);
        let emissions = group_rollout(policy_old, state, cfg.clip.k, &mut rng)?;
        let returns = score_group(q, state, &emissions);
        let discard = if cfg.filtering {
            filter_group(&emissions, &returns, cfg.clip.sigma_min)
        } else if !(population_std(&returns) > 0.0) {
            Some(FilterReason::LowStd)
        } else {
            None
        };
        groups.push(GroupBatch {
            state_id: id,
            state: state.clone(),
            mean_return: mean(&returns),
            advantages: vec![0.0; returns.len()],
            returns,
            emissions,
            weight: 0.0,
            discard,
        });
    }
    groups.sort_by_key(|g| g.state_id);
    Ok(groups)
}

/// Runs `cfg.iterations` rounds of sample, score, filter, weight and
/// update. The old policy is refreshed at the start of every round.
pub fn swpo_train(policy_sft: &Policy, q: &QModel, pool: &[WindowedState], cfg: &SwpoConfig) -> Result<SwpoOutcome, SwpoError> {
    cfg.clip.validate()?;
    if pool.is_empty() {
        return Err(SwpoError::EmptyPool);
    }
    let mut policy = policy_sft.clone();
    let mut opt = Adam::new(policy.num_params(), cfg.clip.lr);
    let mut pick = stream(&[tag::SWPO, cfg.seed, 0x5A]);
    let stride = (pool.len() / cfg.entropy_states.max(1)).max(1);
    let probe: Vec<&crate::synthweb::Observation> = pool
        .iter()
        .step_by(stride)
        .take(cfg.entropy_states.max(1))
        .map(|s| &s.current)
        .collect();
    let variant = cfg.clip.variant.to_string();
    let mut metrics = vec![IterMetrics {
        iter: 0,
        variant: variant.clone(),
        objective: 0.0,
        entropy: pool_entropy(&policy, &probe, cfg.seed)?,
        clip_frac: 0.0,
        kept_groups: 0,
        filtered_identical: 0,
        filtered_lowstd: 0,
        mean_u_entropy: 0.0,
    }];
    for iter in 1..=cfg.iterations {
        let ids: Vec<usize> = (0..cfg.states_per_iter).map(|_| pick.gen_range(0..pool.len())).collect();
        let old = policy.clone();
        let mut groups = build_groups(&old, q, pool, &ids, cfg, iter)?;
        let mut counts: BTreeMap<FilterReason, usize> = BTreeMap::new();
        for g in &groups {
            if let Some(r) = g.discard {
                *counts.entry(r).or_default() += 1;
            }
        }
        let kept = groups.iter().filter(|g| g.kept()).count();
        let mut row = IterMetrics {
            iter,
            variant: variant.clone(),
            objective: 0.0,
            entropy: 0.0,
            clip_frac: 0.0,
            kept_groups: kept,
            filtered_identical: counts.get(&FilterReason::IdenticalActions).copied().unwrap_or(0),
            filtered_lowstd: counts.get(&FilterReason::LowStd).copied().unwrap_or(0),
            mean_u_entropy: 0.0,
        };
        let usable = kept > 0
            && match assign_advantages(&mut groups, cfg.clip.variant, cfg.weighting) {
                Ok(()) => true,
                Err(SwpoError::ZeroBatchStd) => false,
                Err(e) => return Err(e),
            };
        if usable {
            let u: Vec<f64> = groups.iter().filter(|g| g.kept()).map(|g| g.weight).collect();
            row.mean_u_entropy = entropy(&u);
            let mut clip_total = 0.0;
            for step in 0..cfg.ascent_steps.max(1) {
                let s = swpo_update(&mut policy, &groups, &cfg.clip, &mut opt)?;
                if step == 0 {
                    row.objective = s.objective;
                }
                clip_total += s.clip_frac;
            }
            row.clip_frac = clip_total / cfg.ascent_steps.max(1) as f64;
        } else {
            log::warn!("swpo iteration {iter}: every group was filtered; skipping update");
        }
        row.entropy = pool_entropy(&policy, &probe, cfg.seed)?;
        metrics.push(row);
    }
    Ok(SwpoOutcome { policy, metrics })
}

pub fn write_metrics_csv(path: &Path, metrics: &[IterMetrics]) -> Result<(), SwpoError> {
    let mut w = csv::Writer::from_path(path)?;
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests;
