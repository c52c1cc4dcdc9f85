//! Flat parameter storage with named row-major tensors, and the JSON dump
//! format shared by policy and agentic-Q checkpoints.
//!
//! A dump is one JSON object:
//!
//! ```text
//! {"format": "agentq.tensors", "version": 1, "kind": "...", "config": {...},
//!  "tensors": [{"name": "w1", "shape": [32, 80], "data": [...]}, ...]}
//! ```
//!
//! `data` holds `shape.iter().product()` numbers in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DUMP_FORMAT: &str = "agentq.tensors";
pub const DUMP_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("bad tensor dump: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Parameters of a model as one contiguous vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    specs: Vec<TensorSpec>,
    offsets: Vec<usize>,
    pub data: Vec<f64>,
}

impl Params {
    pub fn zeros(specs: Vec<TensorSpec>) -> Self {
        let mut offsets = Vec::with_capacity(specs.len());
        let mut n = 0;
        for s in &specs {
            offsets.push(n);
            n += s.shape.iter().product::<usize>();
        }
        Self {
            specs,
            offsets,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        let n: usize = self.specs[i].shape.iter().product();
        self.offsets[i]..self.offsets[i] + n
    }

    pub fn tensor(&self, i: usize) -> &[f64] {
        &self.data[self.range(i)]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut [f64] {
        let r = self.range(i);
        &mut self.data[r]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self += scale * dir`.
    pub fn add_scaled(&mut self, dir: &[f64], scale: f64) {
        for (p, d) in self.data.iter_mut().zip(dir) {
            *p += scale * d;
        }
    }
}

/// Adam optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Descent step on `params` along gradient `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DumpTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Dump {
    format: String,
    version: u32,
    kind: String,
    config: serde_json::Value,
    tensors: Vec<DumpTensor>,
}

pub fn save_dump<C: Serialize>(path: &Path, kind: &str, config: &C, params: &Params) -> Result<(), DumpError> {
    let tensors = params
        .specs
        .iter()
        .enumerate()
        .map(|(i, s)| DumpTensor {
            name: s.name.clone(),
            shape: s.shape.clone(),
            data: params.tensor(i).to_vec(),
        })
        .collect();
    let dump = Dump {
        format: DUMP_FORMAT.into(),
        version: DUMP_VERSION,
        kind: kind.into(),
        config: serde_json::to_value(config)?,
        tensors,
    };
    fs::write(path, serde_json::to_string(&dump)?)?;
    Ok(())
}

/// Reads a dump of the given kind, returning its config and tensors.
pub fn load_dump(path: &Path, kind: &str) -> Result<(serde_json::Value, Params), DumpError> {
    let dump: Dump = serde_json::from_str(&fs::read_to_string(path)?)?;
    if dump.format != DUMP_FORMAT || dump.version != DUMP_VERSION {
        return Err(DumpError::Invalid(format!("{} v{}", dump.format, dump.version)));
    }
    if dump.kind != kind {
        return Err(DumpError::Invalid(format!("expected {kind}, found {}", dump.kind)));
    }
    let specs = dump
        .tensors
        .iter()
        .map(|t| TensorSpec {
            name: t.name.clone(),
            shape: t.shape.clone(),
        })
        .collect();
    let mut params = Params::zeros(specs);
    for (i, t) in dump.tensors.iter().enumerate() {
        let dst = params.tensor_mut(i);
        if dst.len() != t.data.len() {
            return Err(DumpError::Invalid(format!("tensor {} has wrong length", t.name)));
        }
        dst.copy_from_slice(&t.data);
    }
    Ok((dump.config, params))
}

/// Largest relative error between an analytic gradient and central
/// differences of `f` at `x`, probing every coordinate in `coords`.
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn finite_difference_error(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    grad: &[f64],
    coords: &[usize],
    h: f64,
    floor: f64,
) -> f64 {
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = grad[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((grad[i] - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<TensorSpec> {
        vec![
            TensorSpec {
                name: "w".into(),
                shape: vec![2, 3],
            },
            TensorSpec {
                name: "b".into(),
                shape: vec![2],
            },
        ]
    }

    #[test]
    fn layout_is_contiguous() {
        let mut p = Params::zeros(specs());
        assert_eq!(p.len(), 8);
        assert_eq!(p.range(1), 6..8);
        p.tensor_mut(1)[1] = 3.0;
        assert_eq!(p.data[7], 3.0);
    }

    #[test]
    fn dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let mut p = Params::zeros(specs());
        for (i, x) in p.data.iter_mut().enumerate() {
            *x = i as f64 * 0.25 - 1.0;
        }
        save_dump(&path, "toy", &serde_json::json!({"h": 2}), &p).unwrap();
        let (cfg, back) = load_dump(&path, "toy").unwrap();
        assert_eq!(cfg["h"], 2);
        assert_eq!(back, p);
        assert!(matches!(load_dump(&path, "other"), Err(DumpError::Invalid(_))));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn finite_differences_of_quadratic() {
        let x = [1.0, -2.0];
        let grad = [2.0, -4.0];
        let mut f = |v: &[f64]| v[0] * v[0] + v[1] * v[1];
        assert!(finite_difference_error(&mut f, &x, &grad, &[0, 1], 1e-5, 1e-8) < 1e-8);
    }
}
