use std::sync::Arc;

use super::*;
use crate::agentic_q::{init_q, QConfig};
use crate::policy::{expert_demos, init_policy, PolicyAgent, PolicyConfig, Decoding};
use crate::synthweb::{env_step_calls, generate_tasks, generate_world, WorldParams};
use crate::tensor::finite_difference_error;
use crate::trajectories::{collect_trajectory, CollectOptions};

struct Fixture {
    policy: Policy,
    q: QModel,
    pool: Vec<WindowedState>,
}

fn fixture(temperature: f64) -> Fixture {
    let mut fx = warm_fixture();
    fx.policy = fx.policy.with_temperature(temperature).unwrap();
    fx
}

fn warm_fixture() -> Fixture {
    let world = Arc::new(generate_world(3, WorldParams::default()).unwrap());
    let tasks = generate_tasks(&world, 6, 0, 15).unwrap();
    let mut policy = init_policy(PolicyConfig::default(), 2, 1).unwrap();
    let demos = expert_demos(&world, &tasks, policy.vocab(), CollectOptions::default()).unwrap();
    for _ in 0..30 {
        policy.sft_update(&demos, 0.1).unwrap();
    }
    let agent = PolicyAgent {
        policy: &policy,
        decoding: Decoding::Sample,
    };
    let mut pool = Vec::new();
    for (i, task) in tasks.iter().enumerate() {
        let mut r = stream(&[i as u64, 1]);
        let mut f = stream(&[i as u64, 2]);
        let t = collect_trajectory(&agent, &world, task, CollectOptions::default(), 0, &mut r, &mut f).unwrap();
        pool.extend((0..t.len()).map(|k| t.state_at(k)));
    }
    let q = init_q(
        QConfig {
            init_scale: 0.5,
            ..Default::default()
        },
        2,
        7,
    );
    Fixture { policy, q, pool }
}

fn emission(policy: &Policy, step: AgentStep) -> StepEmission {
    let tokens = policy.vocab().encode(&step).unwrap();
    StepEmission {
        thought_len: 0,
        log_probs: vec![0.0; tokens.len()],
        tokens,
        step,
        decode_error: None,
    }
}

#[test]
fn rollouts_are_reproducible_and_need_two_candidates() {
    let fx = fixture(1.0);
    let s = &fx.pool[0];
    let a = group_rollout(&fx.policy, s, 8, &mut stream(&[5])).unwrap();
    let b = group_rollout(&fx.policy, s, 8, &mut stream(&[5])).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 8);
    assert!(matches!(group_rollout(&fx.policy, s, 1, &mut stream(&[5])), Err(SwpoError::InvalidConfig(_))));
}

#[test]
fn cold_policy_emits_identical_groups() {
    let fx = fixture(1e-4);
    let s = &fx.pool[0];
    let em = group_rollout(&fx.policy, s, 2, &mut stream(&[1])).unwrap();
    assert_eq!(em[0].step, em[1].step);
    let g = score_group(&fx.q, s, &em);
    assert_eq!(g[0], g[1]);
    assert_eq!(filter_group(&em, &g, 0.05), Some(FilterReason::IdenticalActions));
}

#[test]
fn scores_follow_sigmoid_of_hand_set_bias() {
    let fx = fixture(1.0);
    let mut q = init_q(
        QConfig {
            hidden: 0,
            ..Default::default()
        },
        2,
        0,
    );
    q.params_mut().tensor_mut(1)[0] = 0.25f64.ln() - 0.75f64.ln();
    let em = group_rollout(&fx.policy, &fx.pool[1], 4, &mut stream(&[2])).unwrap();
    for g in score_group(&q, &fx.pool[1], &em) {
        assert!((g - 0.25).abs() < 1e-12);
    }
    for g in score_group(&fx.q, &fx.pool[1], &em) {
        assert!(g > 0.0 && g < 1.0);
    }
}

#[test]
fn filter_examples() {
    let fx = fixture(1.0);
    let click = AgentStep::left_click("", crate::synthweb::slot_point(0, 2));
    let scroll = AgentStep::scroll("", crate::protocol::ScrollDirection::Down);
    let mixed = vec![
        emission(&fx.policy, click.clone()),
        emission(&fx.policy, scroll.clone()),
        emission(&fx.policy, click.clone()),
        emission(&fx.policy, scroll.clone()),
    ];
    let tight = [0.50, 0.51, 0.50, 0.49];
    assert!((population_std(&tight) - 0.00707).abs() < 1e-4);
    assert_eq!(filter_group(&mixed, &tight, 0.05), Some(FilterReason::LowStd));
    assert_eq!(filter_group(&mixed[..2], &[0.8, 0.2], 0.05), None);
    // Thoughts do not make actions distinct.
    let same = vec![
        emission(&fx.policy, AgentStep::new(crate::synthweb::THOUGHTS[0], vec![crate::synthweb::slot_point(0, 2)], click.action_type(), None).unwrap()),
        emission(&fx.policy, click),
    ];
    assert_eq!(filter_group(&same, &[0.9, 0.1], 0.05), Some(FilterReason::IdenticalActions));
}

fn kept_groups(fx: &Fixture, variant: Variant, weighting: bool) -> Vec<GroupBatch> {
    let cfg = SwpoConfig {
        clip: ClipConfig {
            variant,
            sigma_min: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let ids: Vec<usize> = (0..fx.pool.len()).step_by(3).take(6).collect();
    let mut groups = build_groups(&fx.policy, &fx.q, &fx.pool, &ids, &cfg, 1).unwrap();
    assert!(groups.iter().any(GroupBatch::kept));
    assign_advantages(&mut groups, variant, weighting).unwrap();
    groups
}

#[test]
fn objective_at_old_policy_is_weighted_mean_advantage() {
    let fx = fixture(1.0);
    for variant in Variant::ALL {
        let groups = kept_groups(&fx, variant, true);
        let (stats, _) = swpo_objective(&fx.policy, &groups, 0.2);
        let expect: f64 = groups
            .iter()
            .filter(|g| g.kept())
            .map(|g| g.weight * mean(&g.advantages))
            .sum();
        assert!((stats.objective - expect).abs() < 1e-9, "{variant}");
        assert_eq!(stats.clip_frac, 0.0);
        let u: f64 = groups.iter().filter(|g| g.kept()).map(|g| g.weight).sum();
        assert!((u - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gradient_at_old_policy_is_weighted_reinforce() {
    let fx = fixture(1.0);
    let groups = kept_groups(&fx, Variant::SGrpo, true);
    let (_, grad) = swpo_objective(&fx.policy, &groups, 0.2);
    let mut reinforce = vec![0.0; fx.policy.num_params()];
    for g in groups.iter().filter(|g| g.kept()) {
        for (e, a) in g.emissions.iter().zip(&g.advantages) {
            let (_, d) = fx.policy.step_log_prob(&g.state.current, &e.tokens).unwrap();
            let c = g.weight * a / (g.emissions.len() * e.tokens.len()) as f64;
            for (r, x) in reinforce.iter_mut().zip(d) {
                *r += c * x;
            }
        }
    }
    for (a, b) in grad.iter().zip(&reinforce) {
        assert!((a - b).abs() < 1e-9);
    }
    // And both agree with central differences away from clip kinks.
    let mut probe = fx.policy.clone();
    let mut f = |theta: &[f64]| {
        probe.params_mut().data.copy_from_slice(theta);
        swpo_objective(&probe, &groups, 0.2).0.objective
    };
    let coords: Vec<usize> = (0..fx.policy.num_params()).step_by(11).collect();
    let err = finite_difference_error(&mut f, &fx.policy.params().data, &grad, &coords, 1e-6, 1e-6);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn uniform_weights_without_weighting() {
    let fx = fixture(1.0);
    let groups = kept_groups(&fx, Variant::SRloo, false);
    let kept: Vec<f64> = groups.iter().filter(|g| g.kept()).map(|g| g.weight).collect();
    assert!(kept.iter().all(|&u| (u - 1.0 / kept.len() as f64).abs() < 1e-15));
}

#[test]
fn update_improves_objective() {
    let fx = fixture(1.0);
    let groups = kept_groups(&fx, Variant::SGrpo, true);
    let mut policy = fx.policy.clone();
    let clip = ClipConfig::default();
    let mut opt = Adam::new(policy.num_params(), clip.lr);
    let before = swpo_update(&mut policy, &groups, &clip, &mut opt).unwrap().objective;
    let after = swpo_objective(&policy, &groups, clip.eps).0.objective;
    assert!(after > before, "{after} <= {before}");
}

#[test]
fn zero_iterations_return_the_input_policy() {
    let fx = fixture(1.0);
    let cfg = SwpoConfig {
        iterations: 0,
        ..Default::default()
    };
    let out = swpo_train(&fx.policy, &fx.q, &fx.pool, &cfg).unwrap();
    assert_eq!(out.policy, fx.policy);
    assert_eq!(out.metrics.len(), 1);
}

#[test]
fn cold_policy_filters_everything_and_stays_put() {
    let fx = fixture(1e-4);
    let cfg = SwpoConfig {
        iterations: 2,
        states_per_iter: 4,
        ..Default::default()
    };
    let out = swpo_train(&fx.policy, &fx.q, &fx.pool, &cfg).unwrap();
    assert_eq!(out.policy, fx.policy);
    assert!(out.metrics[1..].iter().all(|m| m.kept_groups == 0 && m.filtered_identical == 4));
}

#[test]
fn training_never_touches_the_environment_and_is_deterministic() {
    let fx = fixture(1.0);
    let cfg = SwpoConfig {
        iterations: 3,
        states_per_iter: 8,
        clip: ClipConfig {
            sigma_min: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let before = env_step_calls();
    let a = swpo_train(&fx.policy, &fx.q, &fx.pool, &cfg).unwrap();
    assert_eq!(env_step_calls(), before);
    let b = swpo_train(&fx.policy, &fx.q, &fx.pool, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.metrics[1..].iter().all(|m| m.kept_groups > 0), "{:?}", a.metrics);
    assert_ne!(a.policy, fx.policy);
    assert_eq!(a.metrics.len(), 4);
    assert!(a.metrics.iter().all(|m| m.entropy.is_finite() && m.entropy > 0.0));
}

#[test]
fn metrics_csv_has_the_documented_columns() {
    let fx = fixture(1.0);
    let cfg = SwpoConfig {
        iterations: 1,
        states_per_iter: 4,
        ..Default::default()
    };
    let out = swpo_train(&fx.policy, &fx.q, &fx.pool, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_metrics_csv(&path, &out.metrics).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "iter,variant,objective,entropy,clip_frac,kept_groups,filtered_identical,filtered_lowstd,mean_u_entropy"
    );
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn bad_configs_and_empty_pools_are_rejected() {
    let fx = fixture(1.0);
    let mut cfg = SwpoConfig::default();
    cfg.clip.eps = 0.0;
    assert!(matches!(swpo_train(&fx.policy, &fx.q, &fx.pool, &cfg), Err(SwpoError::InvalidConfig(_))));
    assert!(matches!(
        swpo_train(&fx.policy, &fx.q, &[], &SwpoConfig::default()),
        Err(SwpoError::EmptyPool)
    ));
    assert_eq!("S-RF++".parse::<Variant>().unwrap(), Variant::SRfpp);
    assert!("ppo".parse::<Variant>().is_err());
}
