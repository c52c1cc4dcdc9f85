use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{ActionType, AgentStep, ProtocolError, ScrollDirection};
use crate::synthweb::{point_slot, slot_point, DONE, THOUGHTS, VALUES};

/// Most thought tokens a well-formed emission may carry.
pub const MAX_THOUGHTS: usize = 4;

/// Longest well-formed emission: thoughts, type, two arguments, end.
pub const MAX_EMISSION: usize = MAX_THOUGHTS + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Thought(usize),
    Type(ActionType),
    Slot(usize),
    Dir(ScrollDirection),
    Value(usize),
    End,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("emission is empty")]
    Empty,
    #[error("emission hit the token cap before the end token")]
    Truncated,
    #[error("more than {MAX_THOUGHTS} thought tokens")]
    TooManyThoughts,
    #[error("unexpected token at position {0}")]
    UnexpectedToken(usize),
    #[error(transparent)]
    Invalid(#[from] ProtocolError),
}

/// Token inventory for a world whose viewport has `viewport` slots.
///
/// Index layout: thoughts, action types, slots, scroll directions, values,
/// end-of-step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    viewport: usize,
    values: Vec<String>,
}

impl Vocabulary {
    pub fn new(viewport: usize) -> Self {
        let mut values: Vec<String> = VALUES.iter().map(|v| v.to_string()).collect();
        values.push(DONE.to_string());
        Self {
            viewport: viewport.max(1),
            values,
        }
    }

    pub fn viewport(&self) -> usize {
        self.viewport
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    fn type_base(&self) -> usize {
        THOUGHTS.len()
    }

    fn slot_base(&self) -> usize {
        self.type_base() + ActionType::ALL.len()
    }

    fn dir_base(&self) -> usize {
        self.slot_base() + self.viewport
    }

    fn value_base(&self) -> usize {
        self.dir_base() + ScrollDirection::ALL.len()
    }

    pub fn end(&self) -> usize {
        self.value_base() + self.values.len()
    }

    pub fn len(&self) -> usize {
        self.end() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, tok: Token) -> usize {
        match tok {
            Token::Thought(i) => i,
            Token::Type(t) => self.type_base() + t.index(),
            Token::Slot(j) => self.slot_base() + j,
            Token::Dir(d) => self.dir_base() + ScrollDirection::ALL.iter().position(|x| *x == d).expect("listed"),
            Token::Value(v) => self.value_base() + v,
            Token::End => self.end(),
        }
    }

    pub fn token(&self, i: usize) -> Token {
        if i < self.type_base() {
            Token::Thought(i)
        } else if i < self.slot_base() {
            Token::Type(ActionType::ALL[i - self.type_base()])
        } else if i < self.dir_base() {
            Token::Slot(i - self.slot_base())
        } else if i < self.value_base() {
            Token::Dir(ScrollDirection::ALL[i - self.dir_base()])
        } else if i < self.end() {
            Token::Value(i - self.value_base())
        } else {
            assert_eq!(i, self.end(), "token index out of range");
            Token::End
        }
    }

    pub fn value_index(&self, v: &str) -> Option<usize> {
        self.values.iter().position(|x| x == v)
    }

    /// Token encoding of a step. Points are encoded by the viewport slot
    /// they fall in, so decoding returns the slot's center point.
    pub fn encode(&self, step: &AgentStep) -> Result<Vec<usize>, String> {
        let mut out = Vec::new();
        let thoughts: Vec<&str> = step.thought().split(' ').filter(|s| !s.is_empty()).collect();
        if thoughts.len() > MAX_THOUGHTS {
            return Err(format!("{} thought tokens", thoughts.len()));
        }
        for t in thoughts {
            let i = THOUGHTS.iter().position(|x| *x == t).ok_or_else(|| t.to_string())?;
            out.push(self.index(Token::Thought(i)));
        }
        out.push(self.index(Token::Type(step.action_type())));
        for p in step.points() {
            out.push(self.index(Token::Slot(point_slot(*p, self.viewport))));
        }
        if let Some(v) = step.value() {
            let tok = match (step.action_type(), ScrollDirection::parse(v)) {
                (ActionType::Scroll, Some(d)) => Token::Dir(d),
                _ => Token::Value(self.value_index(v).ok_or_else(|| v.to_string())?),
            };
            out.push(self.index(tok));
        }
        out.push(self.end());
        Ok(out)
    }

    /// Parses a complete emission (ending in the end token).
    pub fn decode(&self, tokens: &[usize]) -> Result<AgentStep, DecodeError> {
        if tokens.is_empty() {
            return Err(DecodeError::Empty);
        }
        if *tokens.last().expect("nonempty") != self.end() {
            return Err(DecodeError::Truncated);
        }
        let mut prefix = Prefix::default();
        for (pos, &t) in tokens.iter().enumerate() {
            match prefix.push(self, t) {
                Push::More => {}
                Push::Dead(e) => {
                    return Err(match e {
                        DecodeError::UnexpectedToken(_) => DecodeError::UnexpectedToken(pos),
                        other => other,
                    })
                }
                Push::Done(step) => {
                    return if pos + 1 == tokens.len() {
                        Ok(step)
                    } else {
                        Err(DecodeError::UnexpectedToken(pos + 1))
                    };
                }
            }
        }
        Err(DecodeError::Truncated)
    }

    pub fn describe(&self, i: usize) -> String {
        match self.token(i) {
            Token::Thought(k) => THOUGHTS[k].to_string(),
            Token::Type(t) => t.as_str().to_string(),
            Token::Slot(j) => format!("slot{j}"),
            Token::Dir(d) => d.as_str().to_string(),
            Token::Value(v) => self.values[v].clone(),
            Token::End => "<end>".into(),
        }
    }
}

/// Incremental parse of an emission.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Prefix {
    pub thoughts: Vec<usize>,
    pub ty: Option<ActionType>,
    pub slots: Vec<usize>,
    pub value: Option<Token>,
}

pub enum Push {
    More,
    Done(AgentStep),
    /// No continuation of this prefix decodes.
    Dead(DecodeError),
}

impl Prefix {
    pub fn push(&mut self, vocab: &Vocabulary, t: usize) -> Push {
        let unexpected = Push::Dead(DecodeError::UnexpectedToken(0));
        let tok = vocab.token(t);
        let Some(ty) = self.ty else {
            return match tok {
                Token::Thought(k) if self.thoughts.len() < MAX_THOUGHTS => {
                    self.thoughts.push(k);
                    Push::More
                }
                Token::Thought(_) => Push::Dead(DecodeError::TooManyThoughts),
                Token::Type(ty) => {
                    self.ty = Some(ty);
                    Push::More
                }
                Token::End => Push::Dead(DecodeError::Empty),
                _ => unexpected,
            };
        };
        match tok {
            Token::Slot(j) if self.value.is_none() && self.slots.len() < 2 => {
                self.slots.push(j);
                Push::More
            }
            Token::Dir(_) | Token::Value(_) if self.value.is_none() => {
                self.value = Some(tok);
                Push::More
            }
            Token::End => Push::Done(match self.finish(vocab, ty) {
                Ok(s) => s,
                Err(e) => return Push::Dead(e.into()),
            }),
            _ => unexpected,
        }
    }

    fn finish(&self, vocab: &Vocabulary, ty: ActionType) -> Result<AgentStep, ProtocolError> {
        let thought = self.thoughts.iter().map(|&k| THOUGHTS[k]).collect::<Vec<_>>().join(" ");
        let points = self.slots.iter().map(|&j| slot_point(j, vocab.viewport)).collect();
        let value = match self.value {
            Some(Token::Dir(d)) => Some(d.as_str().to_string()),
            Some(Token::Value(v)) => Some(vocab.values[v].clone()),
            _ => None,
        };
        AgentStep::new(thought, points, ty, value)
    }
}
