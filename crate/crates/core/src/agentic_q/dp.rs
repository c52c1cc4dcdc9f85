//! Exact success probabilities under a fixed stochastic policy, by forward
//! enumeration of reachable environment states and backward induction.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{QError, QModel};
use crate::policy::Policy;
use crate::protocol::{serialize_agent_step, to_env_action, AgentStep};
use crate::synthweb::{
    env_action_space, env_reset, env_step, terminal_reward, EnvConfig, EnvKey, EnvState, Observation, TaskSpec, World,
};
use crate::trajectories::WindowedState;

/// Upper limit on enumerated states per evaluation.
pub const MAX_DP_STATES: usize = 200_000;

/// A stationary action distribution over canonical steps.
pub trait StepDistribution {
    fn distribution(&self, obs: &Observation) -> Vec<(AgentStep, f64)>;
}

impl StepDistribution for Policy {
    fn distribution(&self, obs: &Observation) -> Vec<(AgentStep, f64)> {
        self.action_marginals(obs)
    }
}

/// Crude bound on the number of distinct states an evaluation may visit:
/// page, scroll offset, step and the contents of every form field.
pub fn dp_state_bound(world: &World, t_max: usize) -> usize {
    let offsets = world.params.elements_per_page.max(1);
    let field_states = (crate::synthweb::VALUES.len() + 2).saturating_pow(world.params.fields as u32);
    world
        .params
        .pages
        .saturating_mul(offsets)
        .saturating_mul(t_max)
        .saturating_mul(field_states)
}

/// One reachable (state, action) pair with its exact value.
#[derive(Debug, Clone, PartialEq)]
pub struct DpPair {
    pub task_id: String,
    pub step: usize,
    pub obs: Observation,
    pub action: AgentStep,
    /// Probability of reaching the state and taking the action.
    pub visit_prob: f64,
    /// Success probability after taking the action.
    pub value: f64,
}

struct Edge {
    action: AgentStep,
    prob: f64,
    next: Result<EnvKey, u8>,
}

/// Every reachable (state, action) pair of one task, with exact success
/// probabilities under `policy`.
pub fn exact_action_values(
    world: &Arc<World>,
    task: &TaskSpec,
    policy: &dyn StepDistribution,
    env: EnvConfig,
) -> Result<Vec<DpPair>, QError> {
    let bound = dp_state_bound(world, env.t_max);
    if bound > MAX_DP_STATES {
        return Err(QError::StateSpaceTooLarge {
            bound,
            limit: MAX_DP_STATES,
        });
    }
    let space = env_action_space();
    let (s0, _) = env_reset(world, task, env)?;
    let mut layer: BTreeMap<EnvKey, (EnvState, f64)> = BTreeMap::new();
    layer.insert(s0.key(), (s0, 1.0));
    let mut layers: Vec<Vec<(EnvKey, Observation, f64, Vec<Edge>)>> = Vec::new();
    let mut cache: HashMap<Observation, Vec<(AgentStep, f64)>> = HashMap::new();
    let mut seen = 0usize;
    while !layer.is_empty() {
        seen += layer.len();
        if seen > MAX_DP_STATES {
            return Err(QError::StateSpaceTooLarge {
                bound: seen,
                limit: MAX_DP_STATES,
            });
        }
        let mut next: BTreeMap<EnvKey, (EnvState, f64)> = BTreeMap::new();
        let mut cur = Vec::with_capacity(layer.len());
        for (key, (state, mass)) in layer {
            let obs = state.observe();
            let dist = cache
                .entry(obs.clone())
                .or_insert_with(|| policy.distribution(&obs))
                .clone();
            let mut edges = Vec::with_capacity(dist.len());
            for (action, p) in dist {
                if p == 0.0 {
                    continue;
                }
                let (s2, _, terminal) = env_step(state.clone(), &to_env_action(&action, &space))?;
                let target = if terminal {
                    Err(terminal_reward(&s2, task)?)
                } else {
                    let k = s2.key();
                    next.entry(k.clone()).or_insert((s2, 0.0)).1 += mass * p;
                    Ok(k)
                };
                edges.push(Edge {
                    action,
                    prob: p,
                    next: target,
                });
            }
            cur.push((key, obs, mass, edges));
        }
        layers.push(cur);
        layer = next;
    }

    let mut values: HashMap<EnvKey, f64> = HashMap::new();
    let mut out = Vec::new();
    for cur in layers.iter().rev() {
        for (key, obs, mass, edges) in cur {
            let mut v = 0.0;
            for e in edges {
                let q = match &e.next {
                    Err(r) => f64::from(*r),
                    Ok(k) => values[k],
                };
                v += e.prob * q;
                out.push(DpPair {
                    task_id: task.task_id.clone(),
                    step: key.step,
                    obs: obs.clone(),
                    action: e.action.clone(),
                    visit_prob: mass * e.prob,
                    value: q,
                });
            }
            values.insert(key.clone(), v);
        }
    }
    out.reverse();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPair {
    pub pair_id: usize,
    pub task_id: String,
    pub step: usize,
    pub action: String,
    pub dp_value: f64,
    pub q_value: f64,
    pub visit_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub p_min: f64,
    pub pairs: Vec<CalibrationPair>,
    pub mean_abs: f64,
    pub max_abs: f64,
}

/// Compares Q predictions with exact values on every (state, action) pair
/// visited with probability at least `p_min`. Q sees the current
/// observation with an empty history.
pub fn q_eval_against_dp(
    q: &QModel,
    world: &Arc<World>,
    tasks: &[TaskSpec],
    policy: &dyn StepDistribution,
    env: EnvConfig,
    p_min: f64,
) -> Result<CalibrationReport, QError> {
    let mut pairs = Vec::new();
    for task in tasks {
        for p in exact_action_values(world, task, policy, env)? {
            if p.visit_prob < p_min {
                continue;
            }
            let q_value = q.predict(&WindowedState::new(p.obs.clone()), &p.action);
            pairs.push(CalibrationPair {
                pair_id: pairs.len(),
                task_id: p.task_id,
                step: p.step,
                action: serialize_agent_step(&p.action).replace('\n', " | "),
                dp_value: p.value,
                q_value,
                visit_prob: p.visit_prob,
            });
        }
    }
    let errs: Vec<f64> = pairs.iter().map(|p| (p.q_value - p.dp_value).abs()).collect();
    let mean_abs = if errs.is_empty() {
        0.0
    } else {
        errs.iter().sum::<f64>() / errs.len() as f64
    };
    let max_abs = errs.iter().cloned().fold(0.0, f64::max);
    Ok(CalibrationReport {
        p_min,
        pairs,
        mean_abs,
        max_abs,
    })
}

pub fn write_calibration_csv(report: &CalibrationReport, path: &Path) -> Result<(), QError> {
    let mut w = csv::Writer::from_path(path)?;
    for p in &report.pairs {
        w.serialize(p)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
