use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Demo, Policy};
use crate::rng::Rng;
use crate::synthweb::Observation;
use crate::tensor::finite_difference_error;

/// One sampled emission entering the clipped objective.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateTerm<'a> {
    pub obs: &'a Observation,
    pub tokens: &'a [usize],
    /// Per-token log-probabilities under the frozen old policy.
    pub old_log_probs: &'a [f64],
    pub advantage: f64,
    /// Multiplier on this emission's per-token sum.
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SurrogateStats {
    pub objective: f64,
    /// Share of tokens whose ratio lies outside `[1 - eps, 1 + eps]`.
    pub clip_frac: f64,
    pub tokens: usize,
}

/// `Σ weight · Σ_j min(w_j A, clip(w_j, 1-eps, 1+eps) A)` with
/// `w_j = π(y_j)/π_old(y_j)`, and its gradient.
pub fn clipped_surrogate(policy: &Policy, terms: &[SurrogateTerm<'_>], eps: f64) -> (SurrogateStats, Vec<f64>) {
    let mut grad = vec![0.0; policy.num_params()];
    let mut stats = SurrogateStats::default();
    let mut clipped = 0usize;
    for term in terms {
        let cache = policy.cache(term.obs);
        let trace = policy.trace(&cache, term.tokens);
        let a = term.advantage;
        let coefs: Vec<f64> = trace
            .iter()
            .zip(term.tokens)
            .zip(term.old_log_probs)
            .map(|((pos, &t), &old)| {
                let r = (pos.probs[t].ln() - old).exp();
                let rc = r.clamp(1.0 - eps, 1.0 + eps);
                if r != rc {
                    clipped += 1;
                }
                let (un, cl) = (r * a, rc * a);
                stats.objective += term.weight * un.min(cl);
                if un <= cl {
                    term.weight * a * r
                } else {
                    0.0
                }
            })
            .collect();
        stats.tokens += term.tokens.len();
        policy.backprop(&cache, &trace, term.tokens, &coefs, &mut grad);
    }
    if stats.tokens > 0 {
        stats.clip_frac = clipped as f64 / stats.tokens as f64;
    }
    (stats, grad)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Max relative error of the NLL gradient.
    pub nll: f64,
    /// Max relative error of the clipped-surrogate gradient.
    pub surrogate: f64,
    /// Coordinates probed per check.
    pub coords: usize,
}

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;
/// Surrogate terms whose ratios come this close to a clip edge are dropped.
const KINK_MARGIN: f64 = 1e-3;

fn probe_coords(grad: &[f64], n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut live: Vec<usize> = (0..grad.len()).filter(|&i| grad[i].abs() > 1e-7).collect();
    live.shuffle(rng);
    live.truncate(n * 3 / 4);
    while live.len() < n.min(grad.len()) {
        live.push(rng.gen_range(0..grad.len()));
    }
    live
}

/// Compares analytic gradients of the batch NLL and of a clipped surrogate
/// against central differences (h = 1e-5) on `coords` coordinates. The
/// surrogate uses a randomly perturbed copy of the policy as the old policy
/// and random advantages; terms near a clip kink are excluded.
pub fn gradient_check(policy: &Policy, demos: &[Demo], eps: f64, coords: usize, rng: &mut Rng) -> GradCheckReport {
    let mut report = GradCheckReport {
        coords,
        ..Default::default()
    };
    if demos.is_empty() || coords == 0 {
        return report;
    }
    let mut probe = policy.clone();

    let (_, grad) = policy.nll(demos).expect("finite NLL");
    let idx = probe_coords(&grad, coords, rng);
    let mut f = |theta: &[f64]| {
        probe.params_mut().data.copy_from_slice(theta);
        probe.nll(demos).map(|(l, _)| l).unwrap_or(f64::NAN)
    };
    report.nll = finite_difference_error(&mut f, &policy.params().data, &grad, &idx, H, FLOOR);

    let mut old = policy.clone();
    for x in old.params_mut().data.iter_mut() {
        *x += rng.gen_range(-0.05..0.05);
    }
    let olds: Vec<Vec<f64>> = demos
        .iter()
        .map(|d| old.log_probs(&d.obs, &d.tokens).expect("known tokens"))
        .collect();
    let advs: Vec<f64> = demos
        .iter()
        .map(|_| rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let near_kink = |d: &Demo, old: &[f64]| {
        let lp = policy.log_probs(&d.obs, &d.tokens).expect("known tokens");
        lp.iter().zip(old).any(|(l, o)| {
            let r = (l - o).exp();
            (r - (1.0 - eps)).abs() < KINK_MARGIN || (r - (1.0 + eps)).abs() < KINK_MARGIN
        })
    };
    let terms: Vec<SurrogateTerm<'_>> = demos
        .iter()
        .zip(&olds)
        .zip(&advs)
        .filter(|((d, o), _)| !near_kink(d, o))
        .map(|((d, o), &a)| SurrogateTerm {
            obs: &d.obs,
            tokens: &d.tokens,
            old_log_probs: o,
            advantage: a,
            weight: 1.0 / d.tokens.len() as f64,
        })
        .collect();
    if terms.is_empty() {
        return report;
    }
    let (_, grad) = clipped_surrogate(policy, &terms, eps);
    let idx = probe_coords(&grad, coords, rng);
    let mut probe = policy.clone();
    let mut f = |theta: &[f64]| {
        probe.params_mut().data.copy_from_slice(theta);
        clipped_surrogate(&probe, &terms, eps).0.objective
    };
    report.surrogate = finite_difference_error(&mut f, &policy.params().data, &grad, &idx, H, FLOOR);
    report
}
