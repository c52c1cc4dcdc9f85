//! Agent output protocol.
//!
//! Every policy emission is rendered as four starred lines:
//!
//! ```text
//! * Thought: open search
//! * Action Element: <point>(0.500,0.125)</point>
//! * Action Type: LEFT_CLICK
//! * Action Value: None
//! ```
//!
//! Points are relative coordinates with three decimals. `None` marks an
//! absent element or value. [`parse_agent_step`] and [`serialize_agent_step`]
//! are exact inverses on well-formed steps.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const THOUGHT_LABEL: &str = "* Thought:";
const ELEMENT_LABEL: &str = "* Action Element:";
const TYPE_LABEL: &str = "* Action Type:";
const VALUE_LABEL: &str = "* Action Value:";
const NONE_TEXT: &str = "None";

static POINT_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"<point>\(\s*([-+]?[0-9]*\.?[0-9]+)\s*,\s*([-+]?[0-9]*\.?[0-9]+)\s*\)</point>")
        .expect("point regex")
});

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("malformed agent output: {0}")]
    MalformedOutput(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("action type {0} is not supported by this environment")]
    UnsupportedAction(ActionType),
    #[error("{action}: missing or invalid argument ({detail})")]
    MissingArgument { action: ActionType, detail: String },
}

/// Relative screen coordinate stored in thousandths, so the three-decimal
/// text form is lossless.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Point {
    x_milli: u16,
    y_milli: u16,
}

impl Point {
    /// Builds a point from relative coordinates, rounding to three decimals.
    /// Returns `None` if either coordinate falls outside `[0, 1]`.
    pub fn new(x: f64, y: f64) -> Option<Self> {
        Some(Self {
            x_milli: to_milli(x)?,
            y_milli: to_milli(y)?,
        })
    }

    pub fn from_milli(x_milli: u16, y_milli: u16) -> Option<Self> {
        (x_milli <= 1000 && y_milli <= 1000).then_some(Self { x_milli, y_milli })
    }

    pub fn x(&self) -> f64 {
        f64::from(self.x_milli) / 1000.0
    }

    pub fn y(&self) -> f64 {
        f64::from(self.y_milli) / 1000.0
    }
}

fn to_milli(v: f64) -> Option<u16> {
    if !v.is_finite() {
        return None;
    }
    let m = (v * 1000.0).round();
    (0.0..=1000.0).contains(&m).then_some(m as u16)
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "<point>({}.{:03},{}.{:03})</point>",
            self.x_milli / 1000,
            self.x_milli % 1000,
            self.y_milli / 1000,
            self.y_milli % 1000
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionType {
    Hover,
    LeftClick,
    RightClick,
    MiddleClick,
    DoubleClick,
    TripleClick,
    Type,
    Drag,
    Scroll,
    Wait,
    PressKey,
    CopyImage,
    Finished,
}

/// How many points an action type carries in its element line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointArity {
    Zero,
    One,
    ZeroOrOne,
    Two,
}

impl ActionType {
    pub const ALL: [ActionType; 13] = [
        ActionType::Hover,
        ActionType::LeftClick,
        ActionType::RightClick,
        ActionType::MiddleClick,
        ActionType::DoubleClick,
        ActionType::TripleClick,
        ActionType::Type,
        ActionType::Drag,
        ActionType::Scroll,
        ActionType::Wait,
        ActionType::PressKey,
        ActionType::CopyImage,
        ActionType::Finished,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ActionType::Hover => "HOVER",
            ActionType::LeftClick => "LEFT_CLICK",
            ActionType::RightClick => "RIGHT_CLICK",
            ActionType::MiddleClick => "MIDDLE_CLICK",
            ActionType::DoubleClick => "DOUBLE_CLICK",
            ActionType::TripleClick => "TRIPLE_CLICK",
            ActionType::Type => "TYPE",
            ActionType::Drag => "DRAG",
            ActionType::Scroll => "SCROLL",
            ActionType::Wait => "WAIT",
            ActionType::PressKey => "PRESS_KEY",
            ActionType::CopyImage => "COPY_IMAGE",
            ActionType::Finished => "FINISHED",
        }
    }

    pub fn index(&self) -> usize {
        Self::ALL.iter().position(|t| t == self).expect("listed")
    }

    pub fn point_arity(&self) -> PointArity {
        match self {
            ActionType::Hover
            | ActionType::LeftClick
            | ActionType::RightClick
            | ActionType::MiddleClick
            | ActionType::DoubleClick
            | ActionType::TripleClick
            | ActionType::CopyImage => PointArity::One,
            ActionType::Drag => PointArity::Two,
            ActionType::Type | ActionType::Scroll => PointArity::ZeroOrOne,
            ActionType::Wait | ActionType::PressKey | ActionType::Finished => PointArity::Zero,
        }
    }

    /// Types whose value is fixed to `None`.
    pub fn value_forbidden(&self) -> bool {
        matches!(
            self,
            ActionType::Hover
                | ActionType::LeftClick
                | ActionType::RightClick
                | ActionType::MiddleClick
                | ActionType::DoubleClick
                | ActionType::TripleClick
                | ActionType::CopyImage
                | ActionType::Drag
                | ActionType::Wait
        )
    }
}

impl fmt::Display for ActionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionType {
    type Err = ProtocolError;

    // Exact uppercase match only.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionType::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ProtocolError::MalformedOutput(format!("unknown action type {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScrollDirection {
    Left,
    Right,
    Up,
    Down,
}

impl ScrollDirection {
    pub const ALL: [ScrollDirection; 4] = [
        ScrollDirection::Left,
        ScrollDirection::Right,
        ScrollDirection::Up,
        ScrollDirection::Down,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScrollDirection::Left => "left",
            ScrollDirection::Right => "right",
            ScrollDirection::Up => "up",
            ScrollDirection::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|d| d.as_str() == s)
    }
}

/// One parsed protocol emission. Construction goes through [`AgentStep::new`],
/// which enforces the per-type element and value shape.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawAgentStep", into = "RawAgentStep")]
pub struct AgentStep {
    thought: String,
    points: Vec<Point>,
    action_type: ActionType,
    value: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawAgentStep {
    thought: String,
    #[serde(rename = "type")]
    action_type: ActionType,
    point: Vec<Point>,
    value: Option<String>,
}

impl TryFrom<RawAgentStep> for AgentStep {
    type Error = ProtocolError;

    fn try_from(raw: RawAgentStep) -> Result<Self, Self::Error> {
        AgentStep::new(raw.thought, raw.point, raw.action_type, raw.value)
    }
}

impl From<AgentStep> for RawAgentStep {
    fn from(s: AgentStep) -> Self {
        RawAgentStep {
            thought: s.thought,
            action_type: s.action_type,
            point: s.points,
            value: s.value,
        }
    }
}

fn check_line_text(what: &str, text: &str) -> Result<(), ProtocolError> {
    if text.contains('\n') || text.contains('\r') {
        return Err(ProtocolError::MalformedOutput(format!("{what} spans multiple lines")));
    }
    if text.trim() != text {
        return Err(ProtocolError::MalformedOutput(format!(
            "{what} has surrounding whitespace"
        )));
    }
    Ok(())
}

impl AgentStep {
    pub fn new(
        thought: impl Into<String>,
        points: Vec<Point>,
        action_type: ActionType,
        value: Option<String>,
    ) -> Result<Self, ProtocolError> {
        let thought = thought.into();
        check_line_text("thought", &thought)?;
        let count_ok = match action_type.point_arity() {
            PointArity::Zero => points.is_empty(),
            PointArity::One => points.len() == 1,
            PointArity::ZeroOrOne => points.len() <= 1,
            PointArity::Two => points.len() == 2,
        };
        if !count_ok {
            return Err(ProtocolError::MalformedOutput(format!(
                "{action_type} cannot carry {} point(s)",
                points.len()
            )));
        }
        if let Some(v) = &value {
            check_line_text("value", v)?;
            if v == NONE_TEXT {
                return Err(ProtocolError::MalformedOutput(
                    "literal \"None\" is reserved for an absent value".into(),
                ));
            }
            if action_type.value_forbidden() {
                return Err(ProtocolError::MalformedOutput(format!(
                    "{action_type} takes no value"
                )));
            }
        } else if action_type == ActionType::Finished {
            return Err(ProtocolError::MalformedOutput("FINISHED requires a value".into()));
        }
        Ok(Self {
            thought,
            points,
            action_type,
            value,
        })
    }

    pub fn left_click(thought: impl Into<String>, point: Point) -> Self {
        Self::new(thought, vec![point], ActionType::LeftClick, None).expect("valid click")
    }

    pub fn scroll(thought: impl Into<String>, dir: ScrollDirection) -> Self {
        Self::new(thought, vec![], ActionType::Scroll, Some(dir.as_str().into()))
            .expect("valid scroll")
    }

    pub fn type_text(thought: impl Into<String>, text: impl Into<String>) -> Result<Self, ProtocolError> {
        Self::new(thought, vec![], ActionType::Type, Some(text.into()))
    }

    pub fn finished(thought: impl Into<String>, answer: impl Into<String>) -> Result<Self, ProtocolError> {
        Self::new(thought, vec![], ActionType::Finished, Some(answer.into()))
    }

    pub fn wait(thought: impl Into<String>) -> Self {
        Self::new(thought, vec![], ActionType::Wait, None).expect("valid wait")
    }

    pub fn thought(&self) -> &str {
        &self.thought
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn action_type(&self) -> ActionType {
        self.action_type
    }

    pub fn value(&self) -> Option<&str> {
        self.value.as_deref()
    }

    /// The same step with the thought removed; two steps denote the same
    /// action iff their canonical forms are equal.
    pub fn canonical(&self) -> AgentStep {
        AgentStep {
            thought: String::new(),
            ..self.clone()
        }
    }

    pub fn same_action(&self, other: &AgentStep) -> bool {
        self.points == other.points
            && self.action_type == other.action_type
            && self.value == other.value
    }
}

impl fmt::Display for AgentStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_agent_step(self))
    }
}

/// Renders a step in the four-line protocol format.
pub fn serialize_agent_step(step: &AgentStep) -> String {
    let element = if step.points.is_empty() {
        NONE_TEXT.to_string()
    } else {
        step.points
            .iter()
            .map(Point::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    };
    format!(
        "{THOUGHT_LABEL} {}\n{ELEMENT_LABEL} {}\n{TYPE_LABEL} {}\n{VALUE_LABEL} {}",
        step.thought,
        element,
        step.action_type,
        step.value.as_deref().unwrap_or(NONE_TEXT)
    )
}

fn field<'a>(line: Option<&'a str>, label: &str) -> Result<&'a str, ProtocolError> {
    let line = line.ok_or_else(|| ProtocolError::MalformedOutput(format!("missing {label} line")))?;
    line.strip_prefix(label)
        .map(str::trim)
        .ok_or_else(|| ProtocolError::MalformedOutput(format!("expected {label:?}, got {line:?}")))
}

fn parse_points(text: &str) -> Result<Vec<Point>, ProtocolError> {
    if text == NONE_TEXT {
        return Ok(Vec::new());
    }
    let mut points = Vec::new();
    let mut last = 0;
    for caps in POINT_RE.captures_iter(text) {
        let whole = caps.get(0).expect("match");
        if !text[last..whole.start()].trim_matches(|c: char| c.is_whitespace() || c == ',').is_empty() {
            return Err(ProtocolError::MalformedOutput(format!("unparsable element {text:?}")));
        }
        last = whole.end();
        let x: f64 = caps[1].parse().map_err(|_| bad_point(text))?;
        let y: f64 = caps[2].parse().map_err(|_| bad_point(text))?;
        points.push(Point::new(x, y).ok_or_else(|| bad_point(text))?);
    }
    if points.is_empty() || !text[last..].trim().is_empty() {
        return Err(bad_point(text));
    }
    Ok(points)
}

fn bad_point(text: &str) -> ProtocolError {
    ProtocolError::MalformedOutput(format!("unparsable point in {text:?}"))
}

/// Parses the four-line protocol format. Leading and trailing whitespace on
/// each line is tolerated; labels must match exactly and appear in order.
/// Lines after the four fields are ignored.
pub fn parse_agent_step(text: &str) -> Result<AgentStep, ProtocolError> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let thought = field(lines.next(), THOUGHT_LABEL)?;
    let element = field(lines.next(), ELEMENT_LABEL)?;
    let action_type: ActionType = field(lines.next(), TYPE_LABEL)?.parse()?;
    let value = field(lines.next(), VALUE_LABEL)?;
    let points = parse_points(element)?;
    let value = (value != NONE_TEXT).then(|| value.to_string());
    AgentStep::new(thought, points, action_type, value)
}

/// The subset of action types an environment can execute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace(BTreeSet<ActionType>);

impl ActionSpace {
    pub fn new(types: impl IntoIterator<Item = ActionType>) -> Self {
        Self(types.into_iter().collect())
    }

    pub fn contains(&self, t: ActionType) -> bool {
        self.0.contains(&t)
    }

    pub fn iter(&self) -> impl Iterator<Item = ActionType> + '_ {
        self.0.iter().copied()
    }
}

impl Default for ActionSpace {
    fn default() -> Self {
        Self::new([
            ActionType::LeftClick,
            ActionType::Scroll,
            ActionType::Type,
            ActionType::Wait,
            ActionType::Finished,
        ])
    }
}

/// An action the environment can execute. `Noop` is what a rejected step
/// becomes: the episode continues and the step counter still advances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidatedAction {
    LeftClick(Point),
    Scroll(ScrollDirection),
    Type(String),
    Wait,
    Finished(String),
    Noop,
}

pub fn validate_action(step: &AgentStep, space: &ActionSpace) -> Result<ValidatedAction, ValidationError> {
    let t = step.action_type();
    if !space.contains(t) {
        return Err(ValidationError::UnsupportedAction(t));
    }
    let missing = |detail: &str| ValidationError::MissingArgument {
        action: t,
        detail: detail.to_string(),
    };
    match t {
        ActionType::LeftClick => Ok(ValidatedAction::LeftClick(step.points()[0])),
        ActionType::Scroll => {
            let v = step.value().ok_or_else(|| missing("no direction"))?;
            ScrollDirection::parse(v)
                .map(ValidatedAction::Scroll)
                .ok_or_else(|| missing(&format!("invalid direction {v:?}")))
        }
        ActionType::Type => step
            .value()
            .map(|v| ValidatedAction::Type(v.to_string()))
            .ok_or_else(|| missing("no text")),
        ActionType::Wait => Ok(ValidatedAction::Wait),
        ActionType::Finished => step
            .value()
            .map(|v| ValidatedAction::Finished(v.to_string()))
            .ok_or_else(|| missing("no answer")),
        // No execution semantics for the remaining types in this environment.
        other => Err(ValidationError::UnsupportedAction(other)),
    }
}

/// Validation that folds rejections into a no-op.
pub fn to_env_action(step: &AgentStep, space: &ActionSpace) -> ValidatedAction {
    validate_action(step, space).unwrap_or(ValidatedAction::Noop)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_click_example() {
        let s = parse_agent_step(
            "* Thought: open search\n* Action Element: <point>(0.500,0.125)</point>\n* Action Type: LEFT_CLICK\n* Action Value: None",
        )
        .unwrap();
        assert_eq!(s.thought(), "open search");
        assert_eq!(s.points(), &[Point::new(0.5, 0.125).unwrap()]);
        assert_eq!(s.action_type(), ActionType::LeftClick);
        assert_eq!(s.value(), None);
    }

    #[test]
    fn parses_finished_without_element() {
        let s = parse_agent_step(
            "* Thought: done\n* Action Element: None\n* Action Type: FINISHED\n* Action Value: 42",
        )
        .unwrap();
        assert_eq!(s.action_type(), ActionType::Finished);
        assert!(s.points().is_empty());
        assert_eq!(s.value(), Some("42"));
    }

    #[test]
    fn lone_type_line_is_malformed() {
        assert!(matches!(
            parse_agent_step("* Action Type: LEFT_CLICK"),
            Err(ProtocolError::MalformedOutput(_))
        ));
    }

    #[test]
    fn malformed_inputs() {
        let cases = [
            "* Thought: x\n* Action Element: None\n* Action Type: left_click\n* Action Value: None",
            "* Thought: x\n* Action Element: <point>(0.5)</point>\n* Action Type: LEFT_CLICK\n* Action Value: None",
            "* Thought: x\n* Action Element: <point>(0.1,0.2)</point>\n* Action Type: DRAG\n* Action Value: None",
            "* Thought: x\n* Action Element: <point>(1.5,0.2)</point>\n* Action Type: LEFT_CLICK\n* Action Value: None",
            "* Thought: x\n* Action Element: None\n* Action Type: FINISHED\n* Action Value: None",
            "* Thought: x\n* Action Element: None\n* Action Type: WAIT\n* Action Value: soon",
            "* Thought: x\n* Action Type: WAIT\n* Action Element: None\n* Action Value: None",
            "* Thought: x\n* Action Element: junk <point>(0.1,0.2)</point>\n* Action Type: LEFT_CLICK\n* Action Value: None",
            "",
        ];
        for c in cases {
            assert!(parse_agent_step(c).is_err(), "accepted {c:?}");
        }
    }

    #[test]
    fn ragged_whitespace_and_trailing_keys() {
        let s = parse_agent_step(
            "  * Thought:   look  \n* Action Element:  <point>( 0.1 , 0.2 )</point>   \n* Action Type: HOVER\n * Action Value: None\n* Extra: ignored",
        )
        .unwrap();
        assert_eq!(s.thought(), "look");
        assert_eq!(s.action_type(), ActionType::Hover);
    }

    #[test]
    fn drag_serializes_two_points_in_order() {
        let s = AgentStep::new(
            "",
            vec![Point::new(0.1, 0.2).unwrap(), Point::new(0.3, 0.4).unwrap()],
            ActionType::Drag,
            None,
        )
        .unwrap();
        let text = serialize_agent_step(&s);
        let a = text.find("<point>(0.100,0.200)</point>").unwrap();
        let b = text.find("<point>(0.300,0.400)</point>").unwrap();
        assert!(a < b);
        assert_eq!(parse_agent_step(&text).unwrap(), s);
    }

    #[test]
    fn finished_serialization() {
        let s = AgentStep::finished("t", "ok").unwrap();
        let text = serialize_agent_step(&s);
        assert!(text.contains("* Action Type: FINISHED"));
        assert!(text.contains("* Action Value: ok"));
    }

    #[test]
    fn points_round_to_three_decimals() {
        let p = Point::new(0.12349, 1.0).unwrap();
        assert_eq!(p.to_string(), "<point>(0.123,1.000)</point>");
        assert!(Point::new(-0.01, 0.5).is_none());
    }

    #[test]
    fn validation_subset() {
        let space = ActionSpace::new([
            ActionType::LeftClick,
            ActionType::Scroll,
            ActionType::Type,
            ActionType::Finished,
        ]);
        let click = AgentStep::left_click("", Point::new(0.5, 0.125).unwrap());
        assert_eq!(
            validate_action(&click, &space),
            Ok(ValidatedAction::LeftClick(Point::new(0.5, 0.125).unwrap()))
        );
        let hover = AgentStep::new("", vec![Point::new(0.5, 0.5).unwrap()], ActionType::Hover, None).unwrap();
        assert_eq!(
            validate_action(&hover, &space),
            Err(ValidationError::UnsupportedAction(ActionType::Hover))
        );
        let diag = AgentStep::new("", vec![], ActionType::Scroll, Some("diagonal".into())).unwrap();
        assert!(matches!(
            validate_action(&diag, &space),
            Err(ValidationError::MissingArgument { .. })
        ));
        assert_eq!(to_env_action(&hover, &space), ValidatedAction::Noop);
    }

    #[test]
    fn canonical_ignores_thought() {
        let a = AgentStep::finished("one", "v").unwrap();
        let b = AgentStep::finished("two", "v").unwrap();
        assert!(a.same_action(&b));
        assert_eq!(a.canonical(), b.canonical());
    }
}
