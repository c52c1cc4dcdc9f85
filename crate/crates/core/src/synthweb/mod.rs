//! Deterministic synthetic website MDP.
//!
//! A [`World`] is a link graph of pages whose elements are shown through a
//! viewport of `M` slots; slot `j` occupies the vertical band `[j/M, (j+1)/M)`
//! so protocol points map to elements by their y-coordinate alone. Tasks ask
//! the agent either to report a fact or to fill a form field. Rewards are
//! terminal and binary.

mod env;
mod oracle;
mod world;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use env::{
    env_action_space, env_reset, env_step, env_step_calls, inject_fault, terminal_reward, EnvConfig, EnvKey, EnvState,
    FaultSchedule, Observation, Query, Slot, TaskKind, TaskSpec,
};
pub use oracle::{generate_tasks, oracle_solve};
pub use world::{generate_world, Element, Page, PageId, World, WorldParams, DONE, KEYS, THOUGHTS, VALUES};

use crate::protocol::Point;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthError {
    #[error("invalid world parameters: {0}")]
    InvalidParams(String),
    #[error("cannot place {requested} solvable tasks, only {available} available")]
    Unsatisfiable { requested: usize, available: usize },
    #[error("task {0} does not belong to this world")]
    TaskWorldMismatch(String),
    #[error("step called on a terminal state")]
    SteppedTerminal,
    #[error("reward requested before the episode ended")]
    NotTerminal,
    #[error("task {0} is unsolvable")]
    Unsolvable(String),
}

/// Center point of viewport slot `j` out of `m`.
pub fn slot_point(j: usize, m: usize) -> Point {
    Point::new(0.5, (j as f64 + 0.5) / m as f64).expect("slot center in range")
}

/// Viewport slot addressed by a point.
pub fn point_slot(p: Point, m: usize) -> usize {
    ((p.y() * m as f64).floor() as usize).min(m - 1)
}

/// A world together with its task list; the on-disk JSON form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suite {
    #[serde(flatten)]
    pub world: World,
    pub tasks: Vec<TaskSpec>,
}
