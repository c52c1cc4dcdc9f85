//! Experiment orchestration: suites, cold start, rollout collection with
//! fault reruns, stratification, agentic-Q, SWPO and held-out evaluation.
//! Every stage writes its artifacts under the configured output directory.

mod config;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{check_disjoint, ExperimentConfig};
pub use report::{emit_report, CheckStatus, Report, ReportCheck};

use crate::agentic_q::{init_q, q_dataset, q_train, QModel, QTrainConfig, QTrainStats};
use crate::policy::{expert_demos, init_policy, Decoding, Policy, PolicyAgent};
use crate::rng::{hash_str, mix, stream, tag};
use crate::swpo::{state_pool, swpo_train, write_metrics_csv, IterMetrics, SwpoConfig};
use crate::synthweb::{generate_tasks, generate_world, EnvConfig, Suite, TaskSpec, World};
use crate::trajectories::{
    collect_trajectory, detect_and_rerun, propagate_returns, save_trajectories, stratify_tasks, Agent,
    CollectOptions, StepSample, Stratification, TrajError, Trajectory, WindowedState,
};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: BoxError,
    },
    #[error("no completed runs under {0}")]
    MissingRuns(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn stage<T, E: Into<BoxError>>(name: &'static str, r: Result<T, E>) -> Result<T, HarnessError> {
    r.map_err(|e| HarnessError::Stage {
        stage: name,
        source: e.into(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// A set of worlds with their tasks.
#[derive(Debug, Clone)]
pub struct TaskSuite {
    pub entries: Vec<(Arc<World>, Vec<TaskSpec>)>,
}

impl TaskSuite {
    pub fn generate(seeds: &[u64], cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        let mut entries = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let world = stage("generate", generate_world(s, cfg.world))?;
            let tasks = stage("generate", generate_tasks(&world, cfg.tasks_per_world, s, cfg.t_max))?;
            entries.push((Arc::new(world), tasks));
        }
        Ok(Self { entries })
    }

    pub fn tasks(&self) -> impl Iterator<Item = (&Arc<World>, &TaskSpec)> {
        self.entries.iter().flat_map(|(w, ts)| ts.iter().map(move |t| (w, t)))
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(|e| e.1.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_suites(&self) -> Vec<Suite> {
        self.entries
            .iter()
            .map(|(w, ts)| Suite {
                world: (**w).clone(),
                tasks: ts.clone(),
            })
            .collect()
    }
}

/// One evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub task_id: String,
    pub episode: usize,
    pub success: bool,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub success_rate: f64,
    /// Mean length of successful episodes; `None` when none succeeded.
    pub mean_steps: Option<f64>,
    pub episodes: usize,
    pub outcomes: Vec<EpisodeOutcome>,
}

impl EvalReport {
    fn from_outcomes(outcomes: Vec<EpisodeOutcome>) -> Self {
        let episodes = outcomes.len();
        let wins: Vec<usize> = outcomes.iter().filter(|o| o.success).map(|o| o.steps).collect();
        Self {
            success_rate: if episodes == 0 { 0.0 } else { wins.len() as f64 / episodes as f64 },
            mean_steps: (!wins.is_empty()).then(|| wins.iter().sum::<usize>() as f64 / wins.len() as f64),
            episodes,
            outcomes,
        }
    }
}

/// Rolls an agent built per task through every task of the suite with
/// faults disabled.
pub fn evaluate_with<A: Agent>(
    suite: &TaskSuite,
    episodes_per_task: usize,
    env: EnvConfig,
    seed: u64,
    mut make_agent: impl FnMut(&Arc<World>, &TaskSpec) -> A,
) -> Result<EvalReport, HarnessError> {
    let opts = CollectOptions { env, p_fault: 0.0 };
    let mut outcomes = Vec::new();
    for (world, task) in suite.tasks() {
        let agent = make_agent(world, task);
        for e in 0..episodes_per_task {
            let mut rng = stream(&[tag::EVAL, seed, hash_str(&task.task_id), e as u64]);
            let mut unused = rng.clone();
            let t = stage("evaluate", collect_trajectory(&agent, world, task, opts, e as u32, &mut rng, &mut unused))?;
            outcomes.push(EpisodeOutcome {
                task_id: task.task_id.clone(),
                episode: e,
                success: t.success(),
                steps: t.len(),
            });
        }
    }
    Ok(EvalReport::from_outcomes(outcomes))
}

/// Greedy evaluation of a policy on the suite.
pub fn evaluate_policy(policy: &Policy, suite: &TaskSuite, episodes_per_task: usize, env: EnvConfig) -> Result<EvalReport, HarnessError> {
    evaluate_with(suite, episodes_per_task, env, 0, |_, _| PolicyAgent {
        policy,
        decoding: Decoding::Greedy,
    })
}

/// Mean steps of both reports over tasks both solve, with the task count.
pub fn joint_steps(a: &EvalReport, b: &EvalReport) -> Option<(f64, f64, usize)> {
    let solved = |r: &EvalReport| -> BTreeMap<(String, usize), usize> {
        r.outcomes
            .iter()
            .filter(|o| o.success)
            .map(|o| ((o.task_id.clone(), o.episode), o.steps))
            .collect()
    };
    let (sa, sb) = (solved(a), solved(b));
    let joint: Vec<(usize, usize)> = sa.iter().filter_map(|(k, &x)| sb.get(k).map(|&y| (x, y))).collect();
    if joint.is_empty() {
        return None;
    }
    let n = joint.len() as f64;
    Some((
        joint.iter().map(|p| p.0).sum::<usize>() as f64 / n,
        joint.iter().map(|p| p.1).sum::<usize>() as f64 / n,
        joint.len(),
    ))
}

/// Oracle-demonstration cold start.
pub fn train_sft(cfg: &ExperimentConfig, train: &TaskSuite) -> Result<Policy, HarnessError> {
    let mut policy = stage("sft", init_policy(cfg.policy, cfg.world.viewport, mix(&[tag::INIT, cfg.seed])))?;
    // Round-robin over worlds so demonstrations cover every training world.
    let mut picked: Vec<(Arc<World>, TaskSpec)> = Vec::new();
    let depth = train.entries.iter().map(|e| e.1.len()).max().unwrap_or(0);
    'outer: for i in 0..depth {
        for (w, ts) in &train.entries {
            if let Some(t) = ts.get(i) {
                picked.push((w.clone(), t.clone()));
                if picked.len() == cfg.sft_tasks {
                    break 'outer;
                }
            }
        }
    }
    let opts = CollectOptions {
        env: EnvConfig { t_max: cfg.t_max },
        p_fault: 0.0,
    };
    let mut demos = Vec::new();
    for (w, t) in &picked {
        demos.extend(stage("sft", expert_demos(w, std::slice::from_ref(t), policy.vocab(), opts))?);
    }
    for _ in 0..cfg.sft_steps {
        stage("sft", policy.sft_update(&demos, cfg.sft_lr))?;
    }
    Ok(policy)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollectStats {
    pub rollouts: usize,
    pub attempts: usize,
    /// Attempts rejected for a fault marker.
    pub rejected: usize,
    /// Rollouts dropped after exhausting every rerun.
    pub exhausted: usize,
    /// Tasks dropped from stratification because a rollout was exhausted.
    pub dropped_tasks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Collection {
    /// Accepted trajectories, grouped per task in rollout order.
    pub by_task: BTreeMap<String, Vec<Trajectory>>,
    pub stats: CollectStats,
}

impl Collection {
    pub fn trajectories(&self) -> Vec<Trajectory> {
        self.by_task.values().flatten().cloned().collect()
    }
}

/// `n` sampled rollouts per training task, rerunning fault-contaminated
/// attempts up to `max_retries` times.
pub fn collect_rollouts(cfg: &ExperimentConfig, train: &TaskSuite, policy: &Policy) -> Result<Collection, HarnessError> {
    let agent = PolicyAgent {
        policy,
        decoding: Decoding::Sample,
    };
    let opts = CollectOptions {
        env: EnvConfig { t_max: cfg.t_max },
        p_fault: cfg.p_fault,
    };
    let mut by_task = BTreeMap::new();
    let mut stats = CollectStats::default();
    for (world, task) in train.tasks() {
        let h = hash_str(&task.task_id);
        let mut trajs = Vec::with_capacity(cfg.n);
        for r in 0..cfg.n as u32 {
            stats.rollouts += 1;
            let res = detect_and_rerun(
                |attempt| {
                    stats.attempts += 1;
                    let parts = [cfg.seed, h, u64::from(r), u64::from(attempt)];
                    let mut prng = stream(&[&[tag::POLICY], &parts[..]].concat());
                    let mut frng = stream(&[&[tag::FAULT], &parts[..]].concat());
                    collect_trajectory(&agent, world, task, opts, r, &mut prng, &mut frng)
                },
                cfg.max_retries,
            );
            match res {
                Ok(t) => trajs.push(t),
                Err(TrajError::RetriesExhausted { .. }) => stats.exhausted += 1,
                Err(e) => return stage("collect", Err(e)),
            }
        }
        if trajs.len() == cfg.n {
            by_task.insert(task.task_id.clone(), trajs);
        } else {
            log::warn!("task {} lost a rollout to repeated faults; dropping it", task.task_id);
            stats.dropped_tasks.push(task.task_id.clone());
        }
    }
    stats.rejected = stats.attempts - (stats.rollouts - stats.exhausted);
    Ok(Collection { by_task, stats })
}

/// Step samples with propagated returns from every accepted trajectory.
pub fn step_samples(collection: &Collection) -> Result<Vec<StepSample>, HarnessError> {
    let mut out = Vec::new();
    for t in collection.by_task.values().flatten() {
        out.extend(stage("propagate", propagate_returns(t))?);
    }
    Ok(out)
}

pub fn train_agentic_q(cfg: &ExperimentConfig, samples: &[StepSample]) -> Result<(QModel, QTrainStats), HarnessError> {
    let mut q = init_q(cfg.q, cfg.world.viewport, mix(&[tag::Q_TRAIN, cfg.seed, 1]));
    let data = q_dataset(&cfg.q, cfg.world.viewport, samples);
    let tc = QTrainConfig {
        seed: cfg.seed,
        ..cfg.q_train
    };
    let stats = stage("train-q", q_train(&mut q, &data, &tc))?;
    Ok((q, stats))
}

/// Stages up to and including agentic-Q, plus the cold-start evaluation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: TaskSuite,
    pub heldout: TaskSuite,
    pub sft: Policy,
    pub collection: Collection,
    pub strat: Stratification,
    pub samples: Vec<StepSample>,
    pub q: QModel,
    pub q_stats: Option<QTrainStats>,
    pub pool: Vec<WindowedState>,
    pub sft_eval: EvalReport,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PrepareOptions {
    /// Load `sft_policy.json` from the output directory if present.
    pub reuse_sft: bool,
    /// Load `q_model.json` from the output directory if present.
    pub reuse_q: bool,
}

pub fn prepare(cfg: &ExperimentConfig, opts: PrepareOptions) -> Result<Prepared, HarnessError> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), cfg)?;

    let train = TaskSuite::generate(&cfg.train_world_seeds(), cfg)?;
    let heldout = TaskSuite::generate(&cfg.heldout_world_seeds(), cfg)?;
    check_disjoint(
        train.tasks().map(|(_, t)| t.task_id.as_str()),
        heldout.tasks().map(|(_, t)| t.task_id.as_str()),
    )?;
    write_json(&dir.join("suite_train.json"), &train.to_suites())?;
    write_json(&dir.join("suite_heldout.json"), &heldout.to_suites())?;

    let sft_path = dir.join("sft_policy.json");
    let sft = if opts.reuse_sft && sft_path.exists() {
        stage("sft", Policy::load(&sft_path))?
    } else {
        let p = train_sft(cfg, &train)?;
        stage("sft", p.save(&sft_path))?;
        p
    };
    let env = EnvConfig { t_max: cfg.t_max };
    let sft_eval = evaluate_policy(&sft, &heldout, 1, env)?;
    write_json(&dir.join("eval_sft.json"), &sft_eval)?;

    let collection = collect_rollouts(cfg, &train, &sft)?;
    stage("collect", save_trajectories(&dir.join("trajectories.jsonl"), &collection.trajectories()))?;
    write_json(&dir.join("collect_stats.json"), &collection.stats)?;
    let strat = stage("stratify", stratify_tasks(&collection.by_task, cfg.n))?;
    write_json(&dir.join("stratification.json"), &strat)?;
    let samples = step_samples(&collection)?;

    let q_path = dir.join("q_model.json");
    let (q, q_stats) = if opts.reuse_q && q_path.exists() {
        (stage("train-q", QModel::load(&q_path))?, None)
    } else {
        let (q, s) = train_agentic_q(cfg, &samples)?;
        stage("train-q", q.save(&q_path))?;
        write_json(&dir.join("q_train.json"), &s)?;
        (q, Some(s))
    };
    let pool = state_pool(&collection.trajectories(), &strat);
    Ok(Prepared {
        train,
        heldout,
        sft,
        collection,
        strat,
        samples,
        q,
        q_stats,
        pool,
        sft_eval,
    })
}

impl Prepared {
    /// The same preparation with agentic-Q retrained under `cfg.q`.
    pub fn with_retrained_q(&self, cfg: &ExperimentConfig) -> Result<Prepared, HarnessError> {
        let (q, s) = train_agentic_q(cfg, &self.samples)?;
        Ok(Prepared {
            q,
            q_stats: Some(s),
            ..self.clone()
        })
    }
}

/// Final metrics of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub variant: String,
    pub window: usize,
    pub action_focus: bool,
    pub filtering: bool,
    pub weighting: bool,
    pub heldout_episodes: usize,
    pub sft_success: f64,
    pub swpo_success: f64,
    pub sft_steps: Option<f64>,
    pub swpo_steps: Option<f64>,
    pub joint_tasks: usize,
    pub joint_sft_steps: Option<f64>,
    pub joint_swpo_steps: Option<f64>,
    pub entropy_initial: f64,
    pub entropy_final: f64,
    pub pool_states: usize,
    pub kept_tasks: usize,
    pub q_heldout_ce: Option<f64>,
}

impl RunSummary {
    pub fn delta(&self) -> f64 {
        self.swpo_success - self.sft_success
    }

    pub fn entropy_ratio(&self) -> f64 {
        self.entropy_final / self.entropy_initial
    }
}

/// SWPO from a prepared state, held-out evaluation and artifacts.
pub fn finish(cfg: &ExperimentConfig, prep: &Prepared) -> Result<RunSummary, HarnessError> {
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    let swpo_cfg = SwpoConfig {
        seed: cfg.seed,
        ..cfg.swpo
    };
    let out = stage("swpo", swpo_train(&prep.sft, &prep.q, &prep.pool, &swpo_cfg))?;
    stage("swpo", write_metrics_csv(&dir.join("swpo_metrics.csv"), &out.metrics))?;
    stage("swpo", out.policy.save(&dir.join("swpo_policy.json")))?;
    let env = EnvConfig { t_max: cfg.t_max };
    let eval = evaluate_policy(&out.policy, &prep.heldout, 1, env)?;
    write_json(&dir.join("eval_sft.json"), &prep.sft_eval)?;
    write_json(&dir.join("eval_swpo.json"), &eval)?;
    let joint = joint_steps(&prep.sft_eval, &eval);
    let summary = RunSummary {
        label: cfg.label.clone(),
        seed: cfg.seed,
        variant: cfg.swpo.clip.variant.to_string(),
        window: cfg.q.window,
        action_focus: cfg.q.action_focus,
        filtering: cfg.swpo.filtering,
        weighting: cfg.swpo.weighting,
        heldout_episodes: eval.episodes,
        sft_success: prep.sft_eval.success_rate,
        swpo_success: eval.success_rate,
        sft_steps: prep.sft_eval.mean_steps,
        swpo_steps: eval.mean_steps,
        joint_tasks: joint.map_or(0, |j| j.2),
        joint_sft_steps: joint.map(|j| j.0),
        joint_swpo_steps: joint.map(|j| j.1),
        entropy_initial: out.initial_entropy(),
        entropy_final: out.final_entropy(),
        pool_states: prep.pool.len(),
        kept_tasks: prep.strat.kept.len(),
        q_heldout_ce: prep.q_stats.as_ref().and_then(|s| s.heldout_ce),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    let mut w = stage("report", csv::Writer::from_path(dir.join("metrics.csv")))?;
    w.serialize(&summary)?;
    w.flush()?;
    Ok(summary)
}

/// The full pipeline for one configuration.
pub fn run_experiment(cfg: &ExperimentConfig, opts: PrepareOptions) -> Result<RunSummary, HarnessError> {
    let prep = prepare(cfg, opts)?;
    finish(cfg, &prep)
}

/// Rows of the SWPO metric log of a finished run.
pub fn load_metrics(dir: &Path) -> Result<Vec<IterMetrics>, HarnessError> {
    let mut r = csv::Reader::from_path(dir.join("swpo_metrics.csv"))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
