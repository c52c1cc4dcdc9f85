//! Hand-crafted observation features. They are relational (defined by how
//! an element relates to the task query), so they carry over to worlds the
//! policy was never trained on.

use crate::synthweb::{Observation, Slot};

use super::vocab::{Token, Vocabulary};

/// Role of one viewport slot relative to the task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotKind {
    LinkRelevant,
    LinkBack,
    LinkOther,
    InfoMatch,
    InfoOther,
    FieldMatchEmpty,
    FieldMatchCorrect,
    FieldMatchWrong,
    FieldOther,
    Submit,
    Captcha,
    Empty,
}

impl SlotKind {
    pub const COUNT: usize = 12;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_target(self) -> bool {
        matches!(
            self,
            SlotKind::InfoMatch | SlotKind::FieldMatchEmpty | SlotKind::FieldMatchCorrect | SlotKind::FieldMatchWrong
        )
    }
}

pub fn slot_kind(obs: &Observation, j: usize) -> SlotKind {
    let q = &obs.query;
    match obs.slots.get(j) {
        None => SlotKind::Empty,
        Some(Slot::Link { info, form }) if info.is_empty() && form.is_empty() => SlotKind::LinkBack,
        Some(Slot::Link { info, form }) => {
            let labels = if q.form { form } else { info };
            if labels.contains(&q.key) {
                SlotKind::LinkRelevant
            } else {
                SlotKind::LinkOther
            }
        }
        Some(Slot::Info { key, .. }) if !q.form && *key == q.key => SlotKind::InfoMatch,
        Some(Slot::Info { .. }) => SlotKind::InfoOther,
        Some(Slot::Field { key, content }) if q.form && *key == q.key => {
            if content.is_empty() {
                SlotKind::FieldMatchEmpty
            } else if Some(content) == q.value.as_ref() {
                SlotKind::FieldMatchCorrect
            } else {
                SlotKind::FieldMatchWrong
            }
        }
        Some(Slot::Field { .. }) => SlotKind::FieldOther,
        Some(Slot::Submit) => SlotKind::Submit,
        Some(Slot::Captcha) => SlotKind::Captcha,
    }
}

/// Value shown by the visible info element that answers a find query.
pub fn visible_answer(obs: &Observation) -> Option<&str> {
    if obs.query.form {
        return None;
    }
    obs.slots.iter().find_map(|s| match s {
        Slot::Info { key, value } if *key == obs.query.key => Some(value.as_str()),
        _ => None,
    })
}

const GLOBALS: usize = 9;

pub fn obs_dim(viewport: usize) -> usize {
    viewport * SlotKind::COUNT + GLOBALS
}

/// Dense observation features: per-slot role one-hots, then global flags.
pub fn obs_features(obs: &Observation, viewport: usize) -> Vec<f64> {
    let mut x = vec![0.0; obs_dim(viewport)];
    let kinds: Vec<SlotKind> = (0..viewport).map(|j| slot_kind(obs, j)).collect();
    for (j, k) in kinds.iter().enumerate() {
        x[j * SlotKind::COUNT + k.index()] = 1.0;
    }
    let g = viewport * SlotKind::COUNT;
    let any = |f: &dyn Fn(SlotKind) -> bool| f64::from(u8::from(kinds.iter().any(|&k| f(k))));
    x[g] = f64::from(u8::from(obs.query.form));
    x[g + 1] = f64::from(u8::from(obs.more_below));
    x[g + 2] = f64::from(u8::from(obs.offset > 0));
    x[g + 3] = any(&|k| k == SlotKind::LinkRelevant);
    x[g + 4] = any(&|k| k == SlotKind::InfoMatch);
    x[g + 5] = any(&|k| matches!(k, SlotKind::FieldMatchEmpty | SlotKind::FieldMatchWrong));
    x[g + 6] = any(&|k| k == SlotKind::FieldMatchCorrect);
    x[g + 7] = f64::from(u8::from(obs.fault));
    x[g + 8] = 1.0;
    x
}

/// Number of token-relational features.
pub const REL_DIM: usize = 10;

/// Sparse relational features per vocabulary index: how an argument token
/// relates to what is on screen.
pub fn relational_features(obs: &Observation, vocab: &Vocabulary) -> Vec<Vec<(usize, f64)>> {
    let mut out = vec![Vec::new(); vocab.len()];
    for j in 0..vocab.viewport() {
        let f = match slot_kind(obs, j) {
            SlotKind::LinkRelevant => 0,
            SlotKind::LinkBack => 1,
            k if k.is_target() => 2,
            SlotKind::LinkOther => 4,
            _ => 3,
        };
        out[vocab.index(Token::Slot(j))].push((f, 1.0));
    }
    let answer = visible_answer(obs);
    let field_content = obs.slots.iter().find_map(|s| match s {
        Slot::Field { content, .. } if !content.is_empty() => Some(content.as_str()),
        _ => None,
    });
    for (v, text) in vocab.values().iter().enumerate() {
        let feats = &mut out[vocab.index(Token::Value(v))];
        let text = text.as_str();
        if answer == Some(text) {
            feats.push((5, 1.0));
        }
        if obs.query.value.as_deref() == Some(text) {
            feats.push((6, 1.0));
        }
        if text == crate::synthweb::DONE {
            feats.push((7, 1.0));
        }
        if obs.slots.iter().any(|s| matches!(s, Slot::Info { value, .. } if value == text)) {
            feats.push((8, 1.0));
        }
        if field_content == Some(text) {
            feats.push((9, 1.0));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthweb::Query;

    fn obs(form: bool, slots: Vec<Slot>) -> Observation {
        Observation {
            query: Query {
                text: String::new(),
                form,
                key: "price".into(),
                value: form.then(|| "amber".to_string()),
            },
            page: 0,
            offset: 0,
            slots,
            more_below: false,
            step: 0,
            fault: false,
        }
    }

    #[test]
    fn slot_roles() {
        let o = obs(
            false,
            vec![
                Slot::Link {
                    info: vec!["price".into()],
                    form: vec![],
                },
                Slot::Info {
                    key: "price".into(),
                    value: "birch".into(),
                },
            ],
        );
        assert_eq!(slot_kind(&o, 0), SlotKind::LinkRelevant);
        assert_eq!(slot_kind(&o, 1), SlotKind::InfoMatch);
        assert_eq!(slot_kind(&o, 2), SlotKind::Empty);
        assert_eq!(visible_answer(&o), Some("birch"));

        let f = obs(
            true,
            vec![Slot::Field {
                key: "price".into(),
                content: "amber".into(),
            }],
        );
        assert_eq!(slot_kind(&f, 0), SlotKind::FieldMatchCorrect);
        assert_eq!(visible_answer(&f), None);
    }

    #[test]
    fn answer_value_is_marked() {
        let vocab = Vocabulary::new(2);
        let o = obs(
            false,
            vec![Slot::Info {
                key: "price".into(),
                value: "birch".into(),
            }],
        );
        let rel = relational_features(&o, &vocab);
        let birch = vocab.index(Token::Value(vocab.value_index("birch").unwrap()));
        assert!(rel[birch].contains(&(5, 1.0)));
        let amber = vocab.index(Token::Value(vocab.value_index("amber").unwrap()));
        assert!(rel[amber].is_empty());
        assert_eq!(obs_features(&o, 2).len(), obs_dim(2));
    }
}
