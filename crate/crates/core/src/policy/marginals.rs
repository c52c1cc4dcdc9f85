use std::collections::HashMap;

use super::vocab::{Prefix, Push, Token};
use super::{Ctx, ObsCache, Policy, MAX_THOUGHTS};
use crate::protocol::{ActionType, AgentStep, serialize_agent_step};
use crate::synthweb::Observation;

struct Memo<'a> {
    policy: &'a Policy,
    cache: ObsCache,
    probs: HashMap<Ctx, Vec<f64>>,
}

impl Memo<'_> {
    fn probs(&mut self, ctx: Ctx) -> &[f64] {
        let (policy, cache) = (self.policy, &self.cache);
        self.probs.entry(ctx).or_insert_with(|| policy.position(cache, ctx).probs)
    }
}

/// A completed action-phase path: the decoded step (None if invalid), its
/// probability given the type token, and its length after the type token.
struct Leaf {
    step: Option<AgentStep>,
    prob: f64,
    len: usize,
}

impl Policy {
    /// Exact distribution over canonical actions at `obs`, summing over
    /// all thought sequences. Emissions that fail to decode or hit the token
    /// cap count as WAIT. Sorted by serialized action.
    pub fn action_marginals(&self, obs: &Observation) -> Vec<(AgentStep, f64)> {
        let mut memo = Memo {
            policy: self,
            cache: self.cache(obs),
            probs: HashMap::new(),
        };
        let vocab = &self.vocab;
        let cap = self.cfg.max_tokens;
        let wait = AgentStep::wait("");
        let mut out: HashMap<AgentStep, f64> = HashMap::new();
        let mut invalid = 0.0;

        // Thought phase: mass over (thoughts emitted, previous token).
        let mut alpha: Vec<(Ctx, f64)> = vec![(Ctx::default(), 1.0)];
        let mut entry: HashMap<(usize, ActionType), f64> = HashMap::new();
        for n in 0..=MAX_THOUGHTS {
            let mut next: HashMap<Ctx, f64> = HashMap::new();
            for (ctx, mass) in alpha {
                if n + 1 > cap {
                    invalid += mass;
                    continue;
                }
                let probs = memo.probs(ctx).to_vec();
                for (t, p) in probs.into_iter().enumerate() {
                    let m = mass * p;
                    match vocab.token(t) {
                        Token::Thought(_) if n < MAX_THOUGHTS => {
                            *next.entry(ctx.advance(vocab, t)).or_default() += m;
                        }
                        Token::Type(ty) => *entry.entry((n, ty)).or_default() += m,
                        _ => invalid += m,
                    }
                }
            }
            let mut v: Vec<_> = next.into_iter().collect();
            v.sort_by_key(|(c, _)| c.prev);
            alpha = v;
        }

        // Action phase, per type token.
        let mut leaves: HashMap<ActionType, Vec<Leaf>> = HashMap::new();
        let mut entries: Vec<_> = entry.into_iter().collect();
        entries.sort_by_key(|((n, ty), _)| (*n, ty.index()));
        for ((n, ty), mass) in entries {
            let ls = leaves.entry(ty).or_insert_with(|| {
                let mut prefix = Prefix::default();
                let tt = vocab.index(Token::Type(ty));
                let _ = prefix.push(vocab, tt);
                let mut acc = Vec::new();
                expand(&mut memo, prefix, Ctx::default().advance(vocab, tt), 1.0, 1, &mut acc);
                acc
            });
            for leaf in ls.iter() {
                let m = mass * leaf.prob;
                match &leaf.step {
                    Some(step) if n + leaf.len <= cap => *out.entry(step.canonical()).or_default() += m,
                    _ => invalid += m,
                }
            }
        }
        *out.entry(wait).or_default() += invalid;
        let mut v: Vec<_> = out.into_iter().collect();
        v.sort_by_cached_key(|(s, _)| serialize_agent_step(s));
        v
    }
}

fn expand(memo: &mut Memo<'_>, prefix: Prefix, ctx: Ctx, prob: f64, len: usize, out: &mut Vec<Leaf>) {
    let vocab = &memo.policy.vocab;
    let probs = memo.probs(ctx).to_vec();
    let mut dead = 0.0;
    for (t, p) in probs.into_iter().enumerate() {
        let mut next = prefix.clone();
        match next.push(vocab, t) {
            Push::More => expand(memo, next, ctx.advance(vocab, t), prob * p, len + 1, out),
            Push::Done(step) => out.push(Leaf {
                step: Some(step),
                prob: prob * p,
                len: len + 1,
            }),
            Push::Dead(_) => dead += prob * p,
        }
    }
    out.push(Leaf {
        step: None,
        prob: dead,
        len,
    });
}
