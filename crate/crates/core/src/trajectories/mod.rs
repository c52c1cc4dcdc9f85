//! Trajectory collection and curation: rollouts with fault detection and
//! reruns, backward return propagation, task stratification, windowed state
//! views and JSONL persistence.

mod store;
mod window;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use store::{load_trajectories, save_trajectories, StoreError, SCHEMA_VERSION};
pub use window::{window_state, HistoryItem, WindowedState};

use crate::protocol::{to_env_action, AgentStep, ProtocolError};
use crate::rng::Rng;
use crate::synthweb::{
    env_action_space, env_reset, env_step, inject_fault, terminal_reward, EnvConfig, Observation, SynthError,
    TaskSpec, World,
};

#[derive(Debug, Error)]
pub enum TrajError {
    #[error("trajectory for {0} has no steps")]
    IncompleteTrajectory(String),
    #[error("task {task_id} has {got} rollouts, expected {expected}")]
    UnevenRollouts {
        task_id: String,
        got: usize,
        expected: usize,
    },
    #[error("all {attempts} attempts for {task_id} were fault-contaminated")]
    RetriesExhausted {
        task_id: String,
        attempts: u32,
        last: Box<Trajectory>,
    },
    #[error(transparent)]
    Env(#[from] SynthError),
}

/// Anything that maps an agent state to a protocol step.
pub trait Agent {
    fn act(&self, state: &WindowedState, rng: &mut Rng) -> AgentStep;
}

/// Replays a fixed action list, one entry per step; WAIT once exhausted.
#[derive(Debug, Clone)]
pub struct ReplayAgent {
    pub steps: Vec<AgentStep>,
}

impl Agent for ReplayAgent {
    fn act(&self, state: &WindowedState, _rng: &mut Rng) -> AgentStep {
        self.steps
            .get(state.recent.len())
            .cloned()
            .unwrap_or_else(|| AgentStep::wait(""))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawStepRecord", into = "RawStepRecord")]
pub struct StepRecord {
    pub obs: Observation,
    pub step: AgentStep,
    pub reward: u8,
}

#[derive(Serialize, Deserialize)]
struct RawStepRecord {
    obs: Observation,
    thought: String,
    action: AgentStep,
    reward: u8,
}

impl TryFrom<RawStepRecord> for StepRecord {
    type Error = ProtocolError;

    fn try_from(r: RawStepRecord) -> Result<Self, Self::Error> {
        // The thought is stored once, at record level.
        let step = AgentStep::new(
            r.thought,
            r.action.points().to_vec(),
            r.action.action_type(),
            r.action.value().map(str::to_string),
        )?;
        Ok(Self {
            obs: r.obs,
            step,
            reward: r.reward,
        })
    }
}

impl From<StepRecord> for RawStepRecord {
    fn from(r: StepRecord) -> Self {
        RawStepRecord {
            obs: r.obs,
            thought: r.step.thought().to_string(),
            action: r.step.canonical(),
            reward: r.reward,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub rollout: u32,
    pub fault_detected: bool,
    #[serde(rename = "r_T")]
    pub r_t: u8,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn success(&self) -> bool {
        self.r_t == 1
    }

    /// Agent state before step `i`, with the full history.
    pub fn state_at(&self, i: usize) -> WindowedState {
        WindowedState {
            current: self.steps[i].obs.clone(),
            recent: self.steps[..i]
                .iter()
                .map(|r| HistoryItem {
                    obs: r.obs.clone(),
                    step: r.step.clone(),
                })
                .collect(),
        }
    }
}

/// One step of a trajectory as an independent training instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSample {
    pub task_id: String,
    pub rollout: u32,
    pub index: usize,
    pub state: WindowedState,
    pub step: AgentStep,
    #[serde(rename = "G")]
    pub ret: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollectOptions {
    pub env: EnvConfig,
    pub p_fault: f64,
}

impl Default for CollectOptions {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            p_fault: 0.0,
        }
    }
}

/// Rolls `agent` through the environment until it finishes or the horizon
/// forces termination. `p_fault > 0` schedules an absorbing fault drawn from
/// `fault_rng`; the trajectory is flagged if any observation shows it.
pub fn collect_trajectory(
    agent: &impl Agent,
    world: &Arc<World>,
    task: &TaskSpec,
    opts: CollectOptions,
    rollout: u32,
    policy_rng: &mut Rng,
    fault_rng: &mut Rng,
) -> Result<Trajectory, SynthError> {
    let (state, _) = env_reset(world, task, opts.env)?;
    let mut state = inject_fault(state, opts.p_fault, fault_rng);
    let mut obs = state.observe();
    let space = env_action_space();
    let mut agent_state = WindowedState::new(obs.clone());
    let mut steps = Vec::new();
    let mut fault_detected = obs.fault;
    loop {
        let step = agent.act(&agent_state, policy_rng);
        let (next, next_obs, terminal) = env_step(state, &to_env_action(&step, &space))?;
        state = next;
        fault_detected |= next_obs.fault;
        steps.push(StepRecord {
            obs: obs.clone(),
            step: step.clone(),
            reward: 0,
        });
        if terminal {
            break;
        }
        agent_state.recent.push(HistoryItem { obs, step });
        agent_state.current = next_obs.clone();
        obs = next_obs;
    }
    let r_t = terminal_reward(&state, task)?;
    if let Some(last) = steps.last_mut() {
        last.reward = r_t;
    }
    Ok(Trajectory {
        task_id: task.task_id.clone(),
        rollout,
        fault_detected,
        r_t,
        steps,
    })
}

/// Calls `collect(attempt)` until it yields a trajectory without a fault
/// marker, making at most `1 + max_retries` attempts.
pub fn detect_and_rerun<F>(mut collect: F, max_retries: u32) -> Result<Trajectory, TrajError>
where
    F: FnMut(u32) -> Result<Trajectory, SynthError>,
{
    let mut attempt = 0;
    loop {
        let traj = collect(attempt)?;
        if !traj.fault_detected {
            return Ok(traj);
        }
        if attempt >= max_retries {
            return Err(TrajError::RetriesExhausted {
                task_id: traj.task_id.clone(),
                attempts: attempt + 1,
                last: Box::new(traj),
            });
        }
        attempt += 1;
    }
}

/// Assigns every step the terminal outcome as its return.
pub fn propagate_returns(traj: &Trajectory) -> Result<Vec<StepSample>, TrajError> {
    if traj.steps.is_empty() {
        return Err(TrajError::IncompleteTrajectory(traj.task_id.clone()));
    }
    Ok((0..traj.steps.len())
        .map(|i| StepSample {
            task_id: traj.task_id.clone(),
            rollout: traj.rollout,
            index: i,
            state: traj.state_at(i),
            step: traj.steps[i].step.clone(),
            ret: traj.r_t,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLevel {
    pub task_id: String,
    pub successes: usize,
    pub n: usize,
    pub level: usize,
}

impl TaskLevel {
    /// Levels 0 and n carry no contrast between rollouts.
    pub fn is_informative(&self) -> bool {
        self.level > 0 && self.level < self.n
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Stratification {
    /// Every task, including excluded ones.
    pub levels: Vec<TaskLevel>,
    pub kept: BTreeSet<String>,
}

impl Stratification {
    pub fn kept_levels(&self) -> impl Iterator<Item = &TaskLevel> {
        self.levels.iter().filter(|l| self.kept.contains(&l.task_id))
    }
}

/// Ranks each task by its number of successful rollouts and keeps tasks
/// strictly between level 0 and level n.
pub fn stratify_tasks(rollouts: &BTreeMap<String, Vec<Trajectory>>, n: usize) -> Result<Stratification, TrajError> {
    let mut out = Stratification::default();
    for (task_id, trajs) in rollouts {
        if trajs.len() != n {
            return Err(TrajError::UnevenRollouts {
                task_id: task_id.clone(),
                got: trajs.len(),
                expected: n,
            });
        }
        let successes = trajs.iter().filter(|t| t.success()).count();
        let level = TaskLevel {
            task_id: task_id.clone(),
            successes,
            n,
            level: successes,
        };
        if level.is_informative() {
            out.kept.insert(task_id.clone());
        }
        out.levels.push(level);
    }
    Ok(out)
}
