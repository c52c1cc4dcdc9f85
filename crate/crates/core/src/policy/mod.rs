//! Small autoregressive categorical policy over protocol tokens.
//!
//! Each token is drawn from a softmax over the whole vocabulary. The scorer
//! is one tanh hidden layer fed with observation features and a summary of
//! the emitted prefix (thought count, previous token, chosen action type,
//! argument count). Output logits add a bilinear term over token-relational
//! features so argument tokens can point at on-screen elements. The policy
//! conditions on the current observation only.

mod features;
mod marginals;
mod surrogate;
mod vocab;

use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{obs_dim, obs_features, relational_features, slot_kind, visible_answer, SlotKind, REL_DIM};
pub use surrogate::{clipped_surrogate, gradient_check, GradCheckReport, SurrogateStats, SurrogateTerm};
pub use vocab::{DecodeError, Prefix, Push, Token, Vocabulary, MAX_EMISSION, MAX_THOUGHTS};

use crate::protocol::{ActionType, AgentStep};
use crate::rng::Rng;
use crate::synthweb::{oracle_solve, Observation, SynthError, TaskSpec, World};
use crate::tensor::{load_dump, save_dump, DumpError, Params, TensorSpec};
use crate::trajectories::{collect_trajectory, Agent, CollectOptions, ReplayAgent, WindowedState};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error("token not in vocabulary: {0}")]
    UnknownToken(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty state sample")]
    EmptySample,
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error(transparent)]
    Env(#[from] SynthError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub hidden: usize,
    /// Sampling temperature; greedy decoding ignores it.
    pub temperature: f64,
    /// Half-width of the uniform init for output-side weights.
    pub init_scale: f64,
    /// Token cap per emission.
    pub max_tokens: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            temperature: 1.0,
            init_scale: 0.01,
            max_tokens: MAX_EMISSION,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoding {
    Sample,
    Greedy,
}

/// Summary of an emitted prefix that the scorer conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub(crate) struct Ctx {
    n_thoughts: u8,
    ty: Option<ActionType>,
    n_args: u8,
    prev: Option<usize>,
}

impl Ctx {
    fn advance(self, vocab: &Vocabulary, t: usize) -> Ctx {
        let mut next = self;
        next.prev = Some(t);
        match (self.ty, vocab.token(t)) {
            (None, Token::Thought(_)) => next.n_thoughts = (self.n_thoughts + 1).min(MAX_THOUGHTS as u8),
            (None, Token::Type(ty)) => {
                next.ty = Some(ty);
                next.n_thoughts = 0;
                next.n_args = 0;
            }
            (None, _) => {}
            (Some(_), _) => next.n_args = (self.n_args + 1).min(3),
        }
        next
    }
}

const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;
const U: usize = 4;
const G: usize = 5;

/// Precomputed observation-dependent quantities.
pub(crate) struct ObsCache {
    x: Vec<f64>,
    base: Vec<f64>,
    rel: Vec<Vec<(usize, f64)>>,
}

/// Forward quantities at one emission position.
#[derive(Debug, Clone)]
pub(crate) struct Position {
    ctx: Ctx,
    h: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEmission {
    pub tokens: Vec<usize>,
    /// Number of leading thought tokens.
    pub thought_len: usize,
    pub log_probs: Vec<f64>,
    /// The decoded step, or WAIT when decoding failed.
    pub step: AgentStep,
    pub decode_error: Option<String>,
}

impl StepEmission {
    pub fn action_len(&self) -> usize {
        self.tokens.len() - self.thought_len
    }

    pub fn log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// An expert (observation, token emission) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demo {
    pub obs: Observation,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    cfg: PolicyConfig,
    vocab: Vocabulary,
    params: Params,
}

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    config: PolicyConfig,
    viewport: usize,
}

pub fn init_policy(cfg: PolicyConfig, viewport: usize, seed: u64) -> Result<Policy, PolicyError> {
    if cfg.hidden == 0 {
        return Err(PolicyError::InvalidConfig("hidden width must be positive".into()));
    }
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        return Err(PolicyError::InvalidConfig("temperature must be positive".into()));
    }
    if cfg.max_tokens == 0 {
        return Err(PolicyError::InvalidConfig("token cap must be positive".into()));
    }
    if viewport == 0 {
        return Err(PolicyError::InvalidConfig("viewport must be positive".into()));
    }
    let vocab = Vocabulary::new(viewport);
    let mut params = Params::zeros(Policy::specs(&cfg, &vocab));
    let mut rng = crate::rng::stream(&[seed, crate::rng::tag::INIT]);
    let in_scale = 1.0 / (params.specs()[W1].shape[1] as f64).sqrt();
    for x in params.tensor_mut(W1) {
        *x = rng.gen_range(-in_scale..in_scale);
    }
    let s = cfg.init_scale;
    if s > 0.0 {
        for i in [W2, G] {
            for x in params.tensor_mut(i) {
                *x = rng.gen_range(-s..s);
            }
        }
    }
    Ok(Policy { cfg, vocab, params })
}

impl Policy {
    fn specs(cfg: &PolicyConfig, vocab: &Vocabulary) -> Vec<TensorSpec> {
        let h = cfg.hidden;
        let v = vocab.len();
        let d = obs_dim(vocab.viewport()) + Self::ctx_dim(vocab);
        let t = |name: &str, shape: Vec<usize>| TensorSpec {
            name: name.into(),
            shape,
        };
        vec![
            t("w1", vec![h, d]),
            t("b1", vec![h]),
            t("w2", vec![v, h]),
            t("b2", vec![v]),
            t("u", vec![ActionType::ALL.len() + 1, REL_DIM]),
            t("g", vec![REL_DIM, h]),
        ]
    }

    fn ctx_dim(vocab: &Vocabulary) -> usize {
        (MAX_THOUGHTS + 1) + (vocab.len() + 1) + ActionType::ALL.len() + 4
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    /// The same parameters sampled at another temperature.
    pub fn with_temperature(&self, temperature: f64) -> Result<Self, PolicyError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(PolicyError::InvalidConfig("temperature must be positive".into()));
        }
        let mut p = self.clone();
        p.cfg.temperature = temperature;
        Ok(p)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn hidden(&self) -> usize {
        self.cfg.hidden
    }

    fn in_dim(&self) -> usize {
        self.params.specs()[W1].shape[1]
    }

    fn obs_width(&self) -> usize {
        obs_dim(self.vocab.viewport())
    }

    /// Row of the relational gate offsets used at `ctx`: one per action type
    /// plus one before the type is chosen.
    fn gate_row(ctx: Ctx) -> usize {
        ctx.ty.map_or(ActionType::ALL.len(), |t| t.index())
    }

    /// Input columns (past the observation block) switched on by `ctx`.
    fn ctx_cols(&self, ctx: Ctx) -> Vec<usize> {
        let base = self.obs_width();
        let prev_base = base + MAX_THOUGHTS + 1;
        let type_base = prev_base + self.vocab.len() + 1;
        let args_base = type_base + ActionType::ALL.len();
        let mut cols = vec![prev_base + ctx.prev.unwrap_or(self.vocab.len())];
        match ctx.ty {
            None => cols.push(base + ctx.n_thoughts as usize),
            Some(ty) => {
                cols.push(type_base + ty.index());
                cols.push(args_base + ctx.n_args as usize);
            }
        }
        cols
    }

    pub(crate) fn cache(&self, obs: &Observation) -> ObsCache {
        let x = obs_features(obs, self.vocab.viewport());
        let h = self.hidden();
        let d = self.in_dim();
        let w1 = self.params.tensor(W1);
        let mut base = self.params.tensor(B1).to_vec();
        for (i, b) in base.iter_mut().enumerate() {
            let row = &w1[i * d..i * d + x.len()];
            *b += row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
        }
        debug_assert_eq!(base.len(), h);
        ObsCache {
            x,
            base,
            rel: relational_features(obs, &self.vocab),
        }
    }

    /// Unscaled logits and hidden activations at a context.
    fn logits(&self, cache: &ObsCache, ctx: Ctx) -> (Vec<f64>, Vec<f64>) {
        let h = self.hidden();
        let d = self.in_dim();
        let w1 = self.params.tensor(W1);
        let mut a = cache.base.clone();
        for c in self.ctx_cols(ctx) {
            for (i, ai) in a.iter_mut().enumerate() {
                *ai += w1[i * d + c];
            }
        }
        let hv: Vec<f64> = a.iter().map(|v| v.tanh()).collect();
        let w2 = self.params.tensor(W2);
        let b2 = self.params.tensor(B2);
        let u = self.params.tensor(U);
        let g = self.params.tensor(G);
        let u = &u[Self::gate_row(ctx) * REL_DIM..][..REL_DIM];
        let gate: Vec<f64> = (0..REL_DIM)
            .map(|k| u[k] + g[k * h..(k + 1) * h].iter().zip(&hv).map(|(w, x)| w * x).sum::<f64>())
            .collect();
        let z = (0..self.vocab.len())
            .map(|t| {
                let mut z = b2[t] + w2[t * h..(t + 1) * h].iter().zip(&hv).map(|(w, x)| w * x).sum::<f64>();
                for &(k, f) in &cache.rel[t] {
                    z += f * gate[k];
                }
                z
            })
            .collect();
        (z, hv)
    }

    pub(crate) fn position(&self, cache: &ObsCache, ctx: Ctx) -> Position {
        let (z, h) = self.logits(cache, ctx);
        let probs = softmax(&z, self.cfg.temperature);
        Position { ctx, h, probs }
    }

    /// Forward pass along a given token sequence.
    pub(crate) fn trace(&self, cache: &ObsCache, tokens: &[usize]) -> Vec<Position> {
        let mut ctx = Ctx::default();
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            out.push(self.position(cache, ctx));
            ctx = ctx.advance(&self.vocab, t);
        }
        out
    }

    /// Adds `Σ_j coefs[j] ∇ log π(tokens[j] | prefix)` into `grad`.
    pub(crate) fn backprop(&self, cache: &ObsCache, trace: &[Position], tokens: &[usize], coefs: &[f64], grad: &mut [f64]) {
        let h = self.hidden();
        let d = self.in_dim();
        let v = self.vocab.len();
        let inv_t = 1.0 / self.cfg.temperature;
        let w2 = self.params.tensor(W2);
        let g = self.params.tensor(G);
        let ranges: Vec<_> = (0..6).map(|i| self.params.range(i)).collect();
        let mut dz = vec![0.0; v];
        let mut dh = vec![0.0; h];
        let mut s = [0.0; REL_DIM];
        for ((pos, &y), &c) in trace.iter().zip(tokens).zip(coefs) {
            if c == 0.0 {
                continue;
            }
            for t in 0..v {
                dz[t] = -c * pos.probs[t] * inv_t;
            }
            dz[y] += c * inv_t;
            s.iter_mut().for_each(|x| *x = 0.0);
            dh.iter_mut().for_each(|x| *x = 0.0);
            {
                let (gb2, gw2) = (ranges[B2].start, ranges[W2].start);
                for t in 0..v {
                    let dzt = dz[t];
                    grad[gb2 + t] += dzt;
                    let row = gw2 + t * h;
                    for i in 0..h {
                        grad[row + i] += dzt * pos.h[i];
                        dh[i] += dzt * w2[t * h + i];
                    }
                    for &(k, f) in &cache.rel[t] {
                        s[k] += dzt * f;
                    }
                }
            }
            for (k, &sk) in s.iter().enumerate() {
                if sk == 0.0 {
                    continue;
                }
                grad[ranges[U].start + Self::gate_row(pos.ctx) * REL_DIM + k] += sk;
                let row = ranges[G].start + k * h;
                for i in 0..h {
                    grad[row + i] += sk * pos.h[i];
                    dh[i] += sk * g[k * h + i];
                }
            }
            let cols = self.ctx_cols(pos.ctx);
            for i in 0..h {
                let da = dh[i] * (1.0 - pos.h[i] * pos.h[i]);
                if da == 0.0 {
                    continue;
                }
                grad[ranges[B1].start + i] += da;
                let row = ranges[W1].start + i * d;
                for (c, &xc) in cache.x.iter().enumerate() {
                    if xc != 0.0 {
                        grad[row + c] += da * xc;
                    }
                }
                for &c in &cols {
                    grad[row + c] += da;
                }
            }
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), PolicyError> {
        match tokens.iter().find(|&&t| t >= self.vocab.len()) {
            Some(t) => Err(PolicyError::UnknownToken(format!("index {t}"))),
            None => Ok(()),
        }
    }

    /// Per-token log-probabilities of an emission.
    pub fn log_probs(&self, obs: &Observation, tokens: &[usize]) -> Result<Vec<f64>, PolicyError> {
        self.check_tokens(tokens)?;
        let cache = self.cache(obs);
        let trace = self.trace(&cache, tokens);
        Ok(trace.iter().zip(tokens).map(|(p, &t)| p.probs[t].ln()).collect())
    }

    /// Per-token log-probabilities and the gradient of their sum.
    pub fn step_log_prob(&self, obs: &Observation, tokens: &[usize]) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
        self.check_tokens(tokens)?;
        let cache = self.cache(obs);
        let trace = self.trace(&cache, tokens);
        let lp = trace.iter().zip(tokens).map(|(p, &t)| p.probs[t].ln()).collect();
        let mut grad = vec![0.0; self.num_params()];
        self.backprop(&cache, &trace, tokens, &vec![1.0; tokens.len()], &mut grad);
        Ok((lp, grad))
    }

    /// Next-token distribution after `prefix`.
    pub fn next_token_probs(&self, obs: &Observation, prefix: &[usize]) -> Vec<f64> {
        let cache = self.cache(obs);
        let ctx = prefix.iter().fold(Ctx::default(), |c, &t| c.advance(&self.vocab, t));
        self.position(&cache, ctx).probs
    }

    pub fn emit(&self, obs: &Observation, decoding: Decoding, rng: &mut Rng) -> StepEmission {
        let cache = self.cache(obs);
        let mut ctx = Ctx::default();
        let mut tokens = Vec::new();
        let mut log_probs = Vec::new();
        let end = self.vocab.end();
        while tokens.len() < self.cfg.max_tokens {
            let pos = self.position(&cache, ctx);
            let t = match decoding {
                Decoding::Greedy => argmax(&pos.probs),
                Decoding::Sample => sample_index(&pos.probs, rng),
            };
            tokens.push(t);
            log_probs.push(pos.probs[t].ln());
            ctx = ctx.advance(&self.vocab, t);
            if t == end {
                break;
            }
        }
        let thought_len = tokens
            .iter()
            .take_while(|&&t| matches!(self.vocab.token(t), Token::Thought(_)))
            .count();
        let (step, decode_error) = match self.vocab.decode(&tokens) {
            Ok(s) => (s, None),
            Err(e) => (AgentStep::wait(""), Some(e.to_string())),
        };
        StepEmission {
            tokens,
            thought_len,
            log_probs,
            step,
            decode_error,
        }
    }

    pub fn sample_step(&self, obs: &Observation, rng: &mut Rng) -> StepEmission {
        self.emit(obs, Decoding::Sample, rng)
    }

    /// Argmax decoding; deterministic.
    pub fn greedy_step(&self, obs: &Observation) -> StepEmission {
        let mut unused = crate::rng::stream(&[0]);
        self.emit(obs, Decoding::Greedy, &mut unused)
    }

    /// Mean per-token entropy: for each observation, sample one emission and
    /// average the exact next-token entropies along it; then average over
    /// observations.
    pub fn policy_entropy(&self, states: &[&Observation], rng: &mut Rng) -> Result<f64, PolicyError> {
        if states.is_empty() {
            return Err(PolicyError::EmptySample);
        }
        let mut total = 0.0;
        for obs in states {
            let em = self.sample_step(obs, rng);
            let cache = self.cache(obs);
            let trace = self.trace(&cache, &em.tokens);
            let h: f64 = trace.iter().map(|p| entropy(&p.probs)).sum();
            total += h / trace.len() as f64;
        }
        Ok(total / states.len() as f64)
    }

    /// Mean negative log-likelihood of the batch and its gradient.
    pub fn nll(&self, batch: &[Demo]) -> Result<(f64, Vec<f64>), PolicyError> {
        if batch.is_empty() {
            return Err(PolicyError::EmptyBatch);
        }
        let mut grad = vec![0.0; self.num_params()];
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for d in batch {
            self.check_tokens(&d.tokens)?;
            let cache = self.cache(&d.obs);
            let trace = self.trace(&cache, &d.tokens);
            loss -= trace.iter().zip(&d.tokens).map(|(p, &t)| p.probs[t].ln()).sum::<f64>() * scale;
            self.backprop(&cache, &trace, &d.tokens, &vec![-scale; d.tokens.len()], &mut grad);
        }
        if !loss.is_finite() {
            return Err(PolicyError::NonFiniteLoss);
        }
        Ok((loss, grad))
    }

    /// One gradient-descent step on the batch NLL; returns the pre-step loss.
    pub fn sft_update(&mut self, batch: &[Demo], lr: f64) -> Result<f64, PolicyError> {
        let (loss, grad) = self.nll(batch)?;
        self.params.add_scaled(&grad, -lr);
        Ok(loss)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let meta = PolicyMeta {
            config: self.cfg,
            viewport: self.vocab.viewport(),
        };
        save_dump(path, "policy", &meta, &self.params)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let (meta, params) = load_dump(path, "policy")?;
        let meta: PolicyMeta = serde_json::from_value(meta).map_err(DumpError::from)?;
        let vocab = Vocabulary::new(meta.viewport);
        if params.specs() != Self::specs(&meta.config, &vocab).as_slice() {
            return Err(DumpError::Invalid("tensor shapes do not match config".into()).into());
        }
        Ok(Self {
            cfg: meta.config,
            vocab,
            params,
        })
    }
}

/// Policy wrapped as a rollout agent.
pub struct PolicyAgent<'a> {
    pub policy: &'a Policy,
    pub decoding: Decoding,
}

impl Agent for PolicyAgent<'_> {
    fn act(&self, state: &WindowedState, rng: &mut Rng) -> AgentStep {
        self.policy.emit(&state.current, self.decoding, rng).step
    }
}

/// Oracle demonstrations for the given tasks, one per step.
pub fn expert_demos(world: &Arc<World>, tasks: &[TaskSpec], vocab: &Vocabulary, opts: CollectOptions) -> Result<Vec<Demo>, PolicyError> {
    let mut out = Vec::new();
    let mut rng = crate::rng::stream(&[0]);
    for task in tasks {
        let agent = ReplayAgent {
            steps: oracle_solve(world, task)?,
        };
        let opts = CollectOptions { p_fault: 0.0, ..opts };
        let traj = collect_trajectory(&agent, world, task, opts, 0, &mut rng.clone(), &mut rng)?;
        for r in &traj.steps {
            let tokens = vocab.encode(&r.step).map_err(PolicyError::UnknownToken)?;
            out.push(Demo {
                obs: r.obs.clone(),
                tokens,
            });
        }
    }
    Ok(out)
}

pub fn softmax(z: &[f64], temperature: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

fn sample_index(p: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}
