use serde::{Deserialize, Serialize};

use crate::protocol::AgentStep;
use crate::synthweb::{Observation, Query};

/// One past interaction: what the agent saw and what it emitted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HistoryItem {
    pub obs: Observation,
    pub step: AgentStep,
}

/// Agent state: the current observation (which carries the task query)
/// plus past interactions, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowedState {
    pub current: Observation,
    pub recent: Vec<HistoryItem>,
}

impl WindowedState {
    pub fn new(current: Observation) -> Self {
        Self {
            current,
            recent: Vec::new(),
        }
    }

    pub fn query(&self) -> &Query {
        &self.current.query
    }

    pub fn last(&self) -> Option<&HistoryItem> {
        self.recent.last()
    }

    pub fn windowed(&self, w: usize) -> WindowedState {
        window_state(self, w)
    }
}

/// Keeps the query, the current observation and the most recent `w - 1`
/// interactions. `w` is clamped to at least 1.
pub fn window_state(state: &WindowedState, w: usize) -> WindowedState {
    let keep = w.max(1) - 1;
    let skip = state.recent.len().saturating_sub(keep);
    WindowedState {
        current: state.current.clone(),
        recent: state.recent[skip..].to_vec(),
    }
}
