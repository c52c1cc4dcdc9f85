//! The agentic-Q model: a binary classifier over (windowed state, action)
//! estimating the probability that the task eventually succeeds, trained by
//! cross-entropy on propagated step returns.

mod dp;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dp::{
    dp_state_bound, exact_action_values, q_eval_against_dp, write_calibration_csv, CalibrationPair, CalibrationReport,
    DpPair, StepDistribution, MAX_DP_STATES,
};

use crate::policy::{obs_dim, obs_features, slot_kind, visible_answer, SlotKind};
use crate::protocol::{ActionType, AgentStep, ScrollDirection};
use crate::synthweb::{point_slot, Observation, Slot, SynthError, DONE, KEYS, THOUGHTS, VALUES};
use crate::tensor::{load_dump, save_dump, Adam, DumpError, Params, TensorSpec};
use crate::trajectories::{window_state, HistoryItem, StepSample, WindowedState};

#[derive(Debug, Error)]
pub enum QError {
    #[error("feature dimension {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("exact evaluation needs up to {bound} states, limit is {limit}")]
    StateSpaceTooLarge { bound: usize, limit: usize },
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error(transparent)]
    Env(#[from] SynthError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QConfig {
    /// Sliding window: the current observation plus `window - 1` past steps.
    pub window: usize,
    /// Zero the thought block so only the action is scored.
    pub action_focus: bool,
    /// Hidden width; 0 gives a logistic model.
    pub hidden: usize,
    pub init_scale: f64,
}

impl Default for QConfig {
    fn default() -> Self {
        Self {
            window: 1,
            action_focus: true,
            hidden: 32,
            init_scale: 0.1,
        }
    }
}

const PAGE_BUCKETS: usize = 16;
const OFFSET_BUCKETS: usize = 8;
const STEP_BUCKETS: usize = 16;
const VALUE_SLOTS: usize = VALUES.len() + 1 + 4 + 1;
const ACTION_REL: usize = 5;

fn state_dim(viewport: usize) -> usize {
    KEYS.len() + 1 + PAGE_BUCKETS + OFFSET_BUCKETS + STEP_BUCKETS + obs_dim(viewport)
}

fn action_dim(viewport: usize) -> usize {
    ActionType::ALL.len() + viewport + SlotKind::COUNT + VALUE_SLOTS + ACTION_REL
}

fn history_dim(viewport: usize) -> usize {
    action_dim(viewport) + PAGE_BUCKETS
}

pub fn feature_dim(cfg: &QConfig, viewport: usize) -> usize {
    state_dim(viewport) + action_dim(viewport) + THOUGHTS.len() + cfg.window.max(1).saturating_sub(1) * history_dim(viewport)
}

/// Feature vector for one (state, step) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFeatures(pub Vec<f64>);

fn one_hot(out: &mut [f64], i: usize) {
    if let Some(x) = out.get_mut(i) {
        *x = 1.0;
    }
}

fn flag(b: bool) -> f64 {
    f64::from(u8::from(b))
}

fn write_state(obs: &Observation, viewport: usize, out: &mut [f64]) {
    let mut o = 0;
    if let Some(k) = KEYS.iter().position(|k| *k == obs.query.key) {
        out[k] = 1.0;
    }
    o += KEYS.len();
    out[o] = flag(obs.query.form);
    o += 1;
    one_hot(&mut out[o..o + PAGE_BUCKETS], obs.page % PAGE_BUCKETS);
    o += PAGE_BUCKETS;
    one_hot(&mut out[o..o + OFFSET_BUCKETS], obs.offset.min(OFFSET_BUCKETS - 1));
    o += OFFSET_BUCKETS;
    one_hot(&mut out[o..o + STEP_BUCKETS], obs.step.min(STEP_BUCKETS - 1));
    o += STEP_BUCKETS;
    out[o..o + obs_dim(viewport)].copy_from_slice(&obs_features(obs, viewport));
}

fn write_action(obs: &Observation, step: &AgentStep, viewport: usize, out: &mut [f64]) {
    let mut o = 0;
    out[step.action_type().index()] = 1.0;
    o += ActionType::ALL.len();
    if let Some(p) = step.points().first() {
        let j = point_slot(*p, viewport);
        out[o + j] = 1.0;
        out[o + viewport + slot_kind(obs, j).index()] = 1.0;
    }
    o += viewport + SlotKind::COUNT;
    if let Some(v) = step.value() {
        let i = if let Some(i) = VALUES.iter().position(|x| *x == v) {
            i
        } else if v == DONE {
            VALUES.len()
        } else if let Some(d) = ScrollDirection::parse(v) {
            VALUES.len() + 1 + ScrollDirection::ALL.iter().position(|x| *x == d).expect("listed")
        } else {
            VALUE_SLOTS - 1
        };
        out[o + i] = 1.0;
    }
    o += VALUE_SLOTS;
    let v = step.value();
    let field_content = obs.slots.iter().find_map(|s| match s {
        Slot::Field { content, .. } if !content.is_empty() => Some(content.as_str()),
        _ => None,
    });
    let field_visible = (0..viewport).any(|j| {
        matches!(
            slot_kind(obs, j),
            SlotKind::FieldMatchEmpty | SlotKind::FieldMatchWrong | SlotKind::FieldMatchCorrect
        )
    });
    out[o] = flag(v.is_some() && v == visible_answer(obs));
    out[o + 1] = flag(v.is_some() && v == obs.query.value.as_deref());
    out[o + 2] = flag(v == Some(DONE));
    out[o + 3] = flag(v.is_some() && v == field_content);
    out[o + 4] = flag(step.action_type() == ActionType::Type && field_visible);
}

fn write_thoughts(step: &AgentStep, out: &mut [f64]) {
    for w in step.thought().split(' ') {
        if let Some(i) = THOUGHTS.iter().position(|t| *t == w) {
            out[i] = 1.0;
        }
    }
}

fn write_history(item: &HistoryItem, viewport: usize, out: &mut [f64]) {
    let a = action_dim(viewport);
    write_action(&item.obs, &item.step, viewport, &mut out[..a]);
    one_hot(&mut out[a..a + PAGE_BUCKETS], item.obs.page % PAGE_BUCKETS);
}

/// Features of taking `step` in `state`. History beyond the window is
/// dropped; with action focus the thought block stays zero.
pub fn featurize(cfg: &QConfig, viewport: usize, state: &WindowedState, step: &AgentStep) -> QFeatures {
    let mut x = vec![0.0; feature_dim(cfg, viewport)];
    let (s, a, t) = (state_dim(viewport), action_dim(viewport), THOUGHTS.len());
    write_state(&state.current, viewport, &mut x[..s]);
    write_action(&state.current, step, viewport, &mut x[s..s + a]);
    if !cfg.action_focus {
        write_thoughts(step, &mut x[s + a..s + a + t]);
    }
    let windowed = window_state(state, cfg.window);
    let hd = history_dim(viewport);
    let mut o = s + a + t;
    for item in windowed.recent.iter().rev() {
        write_history(item, viewport, &mut x[o..o + hd]);
        o += hd;
    }
    QFeatures(x)
}

pub fn featurize_step(sample: &StepSample, cfg: &QConfig, viewport: usize) -> QFeatures {
    featurize(cfg, viewport, &sample.state, &sample.step)
}

pub fn sigmoid(s: f64) -> f64 {
    let p = if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// Binary cross-entropy of prediction `p` against label `y`.
pub fn cross_entropy(p: f64, y: f64) -> f64 {
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QModel {
    cfg: QConfig,
    viewport: usize,
    params: Params,
}

#[derive(Serialize, Deserialize)]
struct QMeta {
    config: QConfig,
    viewport: usize,
}

pub fn init_q(cfg: QConfig, viewport: usize, seed: u64) -> QModel {
    let d = feature_dim(&cfg, viewport);
    let mut params = Params::zeros(QModel::specs(&cfg, d));
    let mut rng = crate::rng::stream(&[seed, crate::rng::tag::INIT, 0x51]);
    if cfg.hidden > 0 {
        let a = 1.0 / (d as f64).sqrt();
        for x in params.tensor_mut(0) {
            *x = rng.gen_range(-a..a);
        }
        let s = cfg.init_scale;
        if s > 0.0 {
            for x in params.tensor_mut(2) {
                *x = rng.gen_range(-s..s);
            }
        }
    }
    QModel { cfg, viewport, params }
}

/// Probability in (0, 1) that the features describe a successful step.
pub fn q_predict(q: &QModel, f: &QFeatures) -> Result<f64, QError> {
    Ok(sigmoid(q.score(f)?))
}

impl QModel {
    fn specs(cfg: &QConfig, d: usize) -> Vec<TensorSpec> {
        let t = |name: &str, shape: Vec<usize>| TensorSpec {
            name: name.into(),
            shape,
        };
        if cfg.hidden > 0 {
            vec![
                t("w1", vec![cfg.hidden, d]),
                t("b1", vec![cfg.hidden]),
                t("w2", vec![cfg.hidden]),
                t("b2", vec![1]),
            ]
        } else {
            vec![t("w", vec![d]), t("b", vec![1])]
        }
    }

    pub fn config(&self) -> &QConfig {
        &self.cfg
    }

    pub fn viewport(&self) -> usize {
        self.viewport
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn dim(&self) -> usize {
        feature_dim(&self.cfg, self.viewport)
    }

    pub fn featurize(&self, state: &WindowedState, step: &AgentStep) -> QFeatures {
        featurize(&self.cfg, self.viewport, state, step)
    }

    pub fn predict(&self, state: &WindowedState, step: &AgentStep) -> f64 {
        sigmoid(self.score(&self.featurize(state, step)).expect("own features"))
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let (h, d) = (self.cfg.hidden, self.dim());
        let w1 = self.params.tensor(0);
        let b1 = self.params.tensor(1);
        (0..h)
            .map(|i| {
                let row = &w1[i * d..(i + 1) * d];
                let a = b1[i] + row.iter().zip(x).filter(|(_, &v)| v != 0.0).map(|(w, v)| w * v).sum::<f64>();
                a.tanh()
            })
            .collect()
    }

    /// Pre-sigmoid score.
    pub fn score(&self, f: &QFeatures) -> Result<f64, QError> {
        let x = &f.0;
        if x.len() != self.dim() {
            return Err(QError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(if self.cfg.hidden > 0 {
            let h = self.hidden(x);
            self.params.tensor(3)[0] + self.params.tensor(2).iter().zip(&h).map(|(w, v)| w * v).sum::<f64>()
        } else {
            self.params.tensor(1)[0] + self.params.tensor(0).iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        })
    }

    /// Adds `ds * ∂score/∂θ` into `grad`.
    fn backprop(&self, x: &[f64], ds: f64, grad: &mut [f64]) {
        let d = self.dim();
        if self.cfg.hidden == 0 {
            let r = self.params.range(0);
            for (c, &v) in x.iter().enumerate() {
                if v != 0.0 {
                    grad[r.start + c] += ds * v;
                }
            }
            grad[self.params.range(1).start] += ds;
            return;
        }
        let h = self.hidden(x);
        let w2 = self.params.tensor(2);
        let (r1, rb1, r2, rb2) = (
            self.params.range(0),
            self.params.range(1),
            self.params.range(2),
            self.params.range(3),
        );
        grad[rb2.start] += ds;
        for i in 0..self.cfg.hidden {
            grad[r2.start + i] += ds * h[i];
            let da = ds * w2[i] * (1.0 - h[i] * h[i]);
            grad[rb1.start + i] += da;
            let row = r1.start + i * d;
            for (c, &v) in x.iter().enumerate() {
                if v != 0.0 {
                    grad[row + c] += da * v;
                }
            }
        }
    }

    /// Mean cross-entropy over `data` and its gradient.
    pub fn ce_and_grad(&self, data: &[(QFeatures, u8)]) -> Result<(f64, Vec<f64>), QError> {
        if data.is_empty() {
            return Err(QError::EmptyDataset);
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let n = data.len() as f64;
        for (f, y) in data {
            let p = sigmoid(self.score(f)?);
            let y = f64::from(*y);
            loss += cross_entropy(p, y) / n;
            self.backprop(&f.0, (p - y) / n, &mut grad);
        }
        if !loss.is_finite() {
            return Err(QError::NonFiniteLoss);
        }
        Ok((loss, grad))
    }

    pub fn mean_ce(&self, data: &[(QFeatures, u8)]) -> Result<f64, QError> {
        if data.is_empty() {
            return Err(QError::EmptyDataset);
        }
        let mut loss = 0.0;
        for (f, y) in data {
            loss += cross_entropy(sigmoid(self.score(f)?), f64::from(*y));
        }
        Ok(loss / data.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<(), QError> {
        let meta = QMeta {
            config: self.cfg,
            viewport: self.viewport,
        };
        save_dump(path, "agentic_q", &meta, &self.params)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, QError> {
        let (meta, params) = load_dump(path, "agentic_q")?;
        let meta: QMeta = serde_json::from_value(meta).map_err(DumpError::from)?;
        let d = feature_dim(&meta.config, meta.viewport);
        if params.specs() != Self::specs(&meta.config, d).as_slice() {
            return Err(DumpError::Invalid("tensor shapes do not match config".into()).into());
        }
        Ok(Self {
            cfg: meta.config,
            viewport: meta.viewport,
            params,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of samples held out for the reported cross-entropy.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for QTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.01,
            batch_size: 64,
            holdout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTrainStats {
    /// Mean training cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
    pub heldout_ce: Option<f64>,
    pub train_samples: usize,
    pub heldout_samples: usize,
    pub positive_rate: f64,
    /// Only one label value was present.
    pub degenerate: bool,
}

/// Builds the (features, label) dataset from step samples.
pub fn q_dataset(cfg: &QConfig, viewport: usize, samples: &[StepSample]) -> Vec<(QFeatures, u8)> {
    samples
        .iter()
        .map(|s| (featurize_step(s, cfg, viewport), s.ret))
        .collect()
}

/// Mini-batch training of the cross-entropy loss with Adam. Batch order is
/// a deterministic function of `tc.seed`.
pub fn q_train(q: &mut QModel, data: &[(QFeatures, u8)], tc: &QTrainConfig) -> Result<QTrainStats, QError> {
    if data.is_empty() {
        return Err(QError::EmptyDataset);
    }
    let positives = data.iter().filter(|(_, y)| *y == 1).count();
    let degenerate = positives == 0 || positives == data.len();
    if degenerate {
        log::warn!("agentic-Q training data has a single label; training anyway");
    }
    let mut rng = crate::rng::stream(&[tc.seed, crate::rng::tag::Q_TRAIN]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((data.len() as f64) * tc.holdout.clamp(0.0, 0.5)) as usize;
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let held: Vec<(QFeatures, u8)> = hold_idx.iter().map(|&i| data[i].clone()).collect();
    let mut train_idx = train_idx.to_vec();
    let mut opt = Adam::new(q.params.len(), tc.lr);
    let mut epoch_loss = Vec::with_capacity(tc.epochs);
    let bs = tc.batch_size.max(1);
    for _ in 0..tc.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in train_idx.chunks(bs) {
            let batch: Vec<(QFeatures, u8)> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grad) = q.ce_and_grad(&batch)?;
            total += loss * batch.len() as f64;
            opt.step(&mut q.params.data, &grad);
        }
        epoch_loss.push(total / train_idx.len().max(1) as f64);
    }
    let heldout_ce = if held.is_empty() { None } else { Some(q.mean_ce(&held)?) };
    Ok(QTrainStats {
        epoch_loss,
        heldout_ce,
        train_samples: train_idx.len(),
        heldout_samples: held.len(),
        positive_rate: positives as f64 / data.len() as f64,
        degenerate,
    })
}
