use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::world::{Element, PageId, World};
use super::{point_slot, SynthError};
use crate::protocol::{ActionSpace, ScrollDirection, ValidatedAction};

thread_local! {
    static ENV_STEPS: Cell<u64> = const { Cell::new(0) };
}

/// Number of `env_step` calls made on the current thread.
pub fn env_step_calls() -> u64 {
    ENV_STEPS.with(Cell::get)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskKind {
    Find { key: String },
    Form { key: String, page: PageId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    pub query: String,
    pub world_seed: u64,
}

impl TaskSpec {
    pub fn key(&self) -> &str {
        match &self.kind {
            TaskKind::Find { key } | TaskKind::Form { key, .. } => key,
        }
    }

    pub fn is_form(&self) -> bool {
        matches!(self.kind, TaskKind::Form { .. })
    }
}

/// What the agent is told about its task.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub form: bool,
    pub key: String,
    /// Text to enter, for form tasks.
    pub value: Option<String>,
}

impl Query {
    pub fn for_task(world: &World, task: &TaskSpec) -> Self {
        let value = task.is_form().then(|| world.facts[task.key()].clone());
        Self {
            text: task.query.clone(),
            form: task.is_form(),
            key: task.key().to_string(),
            value,
        }
    }
}

/// One rendered viewport slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Slot {
    Link { info: Vec<String>, form: Vec<String> },
    Info { key: String, value: String },
    Field { key: String, content: String },
    Submit,
    Captcha,
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::Link { info, form } if info.is_empty() && form.is_empty() => write!(f, "LINK back"),
            Slot::Link { info, form } => write!(f, "LINK [{}] forms [{}]", info.join(", "), form.join(", ")),
            Slot::Info { key, value } => write!(f, "INFO {key}: {value}"),
            Slot::Field { key, content } => write!(f, "FIELD {key} = {content:?}"),
            Slot::Submit => write!(f, "SUBMIT"),
            Slot::Captcha => write!(f, "CAPTCHA: verify you are human"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub query: Query,
    pub page: PageId,
    pub offset: usize,
    pub slots: Vec<Slot>,
    pub more_below: bool,
    pub step: usize,
    pub fault: bool,
}

impl Observation {
    pub fn render(&self) -> String {
        let mut out = format!(
            "Task: {}\nPage {} (offset {}, step {})\n",
            self.query.text, self.page, self.offset, self.step
        );
        for (j, s) in self.slots.iter().enumerate() {
            out.push_str(&format!("[{j}] {s}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub t_max: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { t_max: 15 }
    }
}

/// Fault state for one episode. A scheduled fault fires when the step
/// counter reaches `at`, or earlier if the agent tries to finish first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct FaultSchedule {
    pub at: Option<usize>,
    pub triggered: bool,
}

/// Hashable snapshot of everything that determines future dynamics.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EnvKey {
    pub page: PageId,
    pub offset: usize,
    pub step: usize,
    pub terminal: bool,
    pub answer: Option<String>,
    pub fields: Vec<((PageId, String), String)>,
    pub fault: FaultSchedule,
}

#[derive(Debug, Clone)]
pub struct EnvState {
    world: Arc<World>,
    task: TaskSpec,
    query: Query,
    t_max: usize,
    page: PageId,
    offset: usize,
    fields: BTreeMap<(PageId, String), String>,
    step: usize,
    terminal: bool,
    answer: Option<String>,
    fault: FaultSchedule,
}

impl EnvState {
    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn page(&self) -> PageId {
        self.page
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn fault(&self) -> FaultSchedule {
        self.fault
    }

    pub fn field(&self, page: PageId, key: &str) -> Option<&str> {
        self.fields.get(&(page, key.to_string())).map(String::as_str)
    }

    pub fn answer(&self) -> Option<&str> {
        self.answer.as_deref()
    }

    pub fn key(&self) -> EnvKey {
        EnvKey {
            page: self.page,
            offset: self.offset,
            step: self.step,
            terminal: self.terminal,
            answer: self.answer.clone(),
            fields: self.fields.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            fault: self.fault,
        }
    }

    fn elements(&self) -> &[Element] {
        &self.world.pages[self.page].elements
    }

    fn viewport(&self) -> usize {
        self.world.params.viewport
    }

    fn max_offset(&self) -> usize {
        self.elements().len().saturating_sub(self.viewport())
    }

    /// Renders the current state. Pure in the state.
    pub fn observe(&self) -> Observation {
        let slots = if self.fault.triggered {
            vec![Slot::Captcha]
        } else {
            let m = self.viewport();
            self.elements()
                .iter()
                .skip(self.offset)
                .take(m)
                .map(|e| self.render(e))
                .collect()
        };
        Observation {
            query: self.query.clone(),
            page: self.page,
            offset: self.offset,
            slots,
            more_below: !self.fault.triggered && self.offset < self.max_offset(),
            step: self.step,
            fault: self.fault.triggered,
        }
    }

    fn render(&self, e: &Element) -> Slot {
        match e {
            Element::Link { info, form, .. } => Slot::Link {
                info: info.clone(),
                form: form.clone(),
            },
            Element::Info { key } => Slot::Info {
                key: key.clone(),
                value: self.world.facts[key].clone(),
            },
            Element::Field { key } => Slot::Field {
                key: key.clone(),
                content: self.field(self.page, key).unwrap_or_default().to_string(),
            },
            Element::Submit => Slot::Submit,
        }
    }

    fn maybe_trigger_fault(&mut self) {
        if let Some(at) = self.fault.at {
            if !self.fault.triggered && self.step >= at {
                self.fault.triggered = true;
            }
        }
    }
}

pub fn env_reset(world: &Arc<World>, task: &TaskSpec, cfg: EnvConfig) -> Result<(EnvState, Observation), SynthError> {
    let belongs = task.world_seed == world.seed
        && match &task.kind {
            TaskKind::Find { key } => world.info_page(key).is_some(),
            TaskKind::Form { key, page } => world.field_page(key) == Some(*page),
        };
    if !belongs {
        return Err(SynthError::TaskWorldMismatch(task.task_id.clone()));
    }
    let state = EnvState {
        world: Arc::clone(world),
        task: task.clone(),
        query: Query::for_task(world, task),
        t_max: cfg.t_max.max(1),
        page: world.home,
        offset: 0,
        fields: BTreeMap::new(),
        step: 0,
        terminal: false,
        answer: None,
        fault: FaultSchedule::default(),
    };
    let obs = state.observe();
    Ok((state, obs))
}

/// Schedules, with probability `p_fault`, an absorbing fault at a uniform
/// step in `[0, t_max)`. Call at episode start, before the first step.
pub fn inject_fault(mut state: EnvState, p_fault: f64, rng: &mut impl rand::Rng) -> EnvState {
    if p_fault > 0.0 && rng.gen_bool(p_fault.min(1.0)) {
        state.fault.at = Some(rng.gen_range(0..state.t_max));
        state.maybe_trigger_fault();
    }
    state
}

pub fn env_step(mut state: EnvState, action: &ValidatedAction) -> Result<(EnvState, Observation, bool), SynthError> {
    if state.terminal {
        return Err(SynthError::SteppedTerminal);
    }
    ENV_STEPS.with(|c| c.set(c.get() + 1));

    if matches!(action, ValidatedAction::Finished(_)) && state.fault.at.is_some() {
        state.fault.triggered = true;
    }
    if !state.fault.triggered {
        apply(&mut state, action);
    }
    state.step += 1;
    state.maybe_trigger_fault();
    if state.step >= state.t_max {
        state.terminal = true;
    }
    let obs = state.observe();
    let terminal = state.terminal;
    Ok((state, obs, terminal))
}

fn apply(state: &mut EnvState, action: &ValidatedAction) {
    let m = state.viewport();
    match action {
        ValidatedAction::LeftClick(p) => {
            let slot = point_slot(*p, m);
            if let Some(Element::Link { target, .. }) = state.elements().get(state.offset + slot) {
                state.page = *target;
                state.offset = 0;
            }
        }
        ValidatedAction::Scroll(ScrollDirection::Down) => {
            state.offset = (state.offset + m).min(state.max_offset());
        }
        ValidatedAction::Scroll(ScrollDirection::Up) => {
            state.offset = state.offset.saturating_sub(m);
        }
        ValidatedAction::Type(text) => {
            let visible: Vec<&str> = state
                .elements()
                .iter()
                .skip(state.offset)
                .take(m)
                .filter_map(|e| match e {
                    Element::Field { key } => Some(key.as_str()),
                    _ => None,
                })
                .collect();
            if let [key] = visible[..] {
                let key = key.to_string();
                state.fields.insert((state.page, key), text.clone());
            }
        }
        ValidatedAction::Finished(answer) => {
            state.answer = Some(answer.clone());
            state.terminal = true;
        }
        ValidatedAction::Scroll(_) | ValidatedAction::Wait | ValidatedAction::Noop => {}
    }
}

/// Terminal reward in {0, 1}.
pub fn terminal_reward(state: &EnvState, task: &TaskSpec) -> Result<u8, SynthError> {
    if !state.terminal {
        return Err(SynthError::NotTerminal);
    }
    if state.fault.triggered {
        return Ok(0);
    }
    let Some(answer) = &state.answer else {
        return Ok(0);
    };
    let world = &state.world;
    let ok = match &task.kind {
        TaskKind::Find { key } => world.facts.get(key) == Some(answer),
        TaskKind::Form { key, page } => state.field(*page, key) == world.facts.get(key).map(String::as_str),
    };
    Ok(u8::from(ok))
}

/// Action space executed by the synthetic environment.
pub fn env_action_space() -> ActionSpace {
    ActionSpace::default()
}
