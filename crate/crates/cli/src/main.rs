use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use agentq::agentic_q::{init_q, q_dataset, q_train, QConfig, QTrainConfig};
use agentq::harness::{
    collect_rollouts, emit_report, evaluate_policy, run_experiment, train_sft, CheckStatus, ExperimentConfig,
    PrepareOptions, TaskSuite,
};
use agentq::policy::Policy;
use agentq::rng::{mix, tag};
use agentq::swpo::{state_pool, swpo_train, write_metrics_csv, SwpoConfig, Variant};
use agentq::synthweb::{generate_tasks, generate_world, EnvConfig, Suite, World, WorldParams};
use agentq::trajectories::{load_trajectories, propagate_returns, save_trajectories, stratify_tasks, Stratification, Trajectory};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "agentq", version, about = "Agentic-Q and step-wise policy optimization on a synthetic website MDP")]
struct Cli {
    /// Global seed; overrides seeds in config files.
    #[arg(long, global = true, env = "AGENTQ_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a world and write it as JSON.
    GenWorld(GenWorld),
    /// Generate tasks for a world and write the suite.
    GenTasks(GenTasks),
    /// Cold-start a policy on oracle demonstrations.
    Sft(Sft),
    /// Collect rollouts with fault detection and reruns.
    Collect(Collect),
    /// Rank tasks by rollout successes.
    Stratify(Stratify),
    /// Train agentic-Q on propagated returns.
    TrainQ(TrainQ),
    /// Step-wise policy optimization from stored states.
    Swpo(Swpo),
    /// Greedy evaluation of a policy on a suite.
    Eval(Eval),
    /// Consolidate finished runs into tables and trend checks.
    Report(Report),
    /// The full pipeline from a JSON config.
    Run(Run),
}

#[derive(Args)]
struct GenWorld {
    #[arg(long, default_value_t = 8)]
    pages: usize,
    #[arg(long, default_value_t = 4)]
    elements_per_page: usize,
    #[arg(long, default_value_t = 2)]
    viewport: usize,
    #[arg(long, default_value_t = 6)]
    facts: usize,
    #[arg(long, default_value_t = 2)]
    fields: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenTasks {
    #[arg(long)]
    world: PathBuf,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 15)]
    t_max: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Sft {
    /// Suite files; tasks are used round-robin across worlds.
    #[arg(long, required = true, num_args = 1..)]
    suite: Vec<PathBuf>,
    #[arg(long, default_value_t = 16)]
    tasks: usize,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Collect {
    #[arg(long, required = true, num_args = 1..)]
    suite: Vec<PathBuf>,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 0.1)]
    p_fault: f64,
    #[arg(long, default_value_t = 5)]
    retries: u32,
    #[arg(long, default_value_t = 15)]
    t_max: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Stratify {
    #[arg(long)]
    trajectories: PathBuf,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainQ {
    #[arg(long)]
    trajectories: PathBuf,
    #[arg(long, default_value_t = 1)]
    window: usize,
    /// Score thoughts as well as actions.
    #[arg(long)]
    no_action_focus: bool,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Swpo {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    q: PathBuf,
    #[arg(long)]
    trajectories: PathBuf,
    #[arg(long)]
    stratification: PathBuf,
    #[arg(long, default_value = "s-grpo")]
    variant: String,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 0.2)]
    eps: f64,
    #[arg(long, default_value_t = 0.05)]
    sigma_min: f64,
    #[arg(long, default_value_t = 30)]
    iterations: usize,
    #[arg(long)]
    no_filtering: bool,
    #[arg(long)]
    no_weighting: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    suite: Vec<PathBuf>,
    #[arg(long, default_value_t = 15)]
    t_max: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Report {
    dir: PathBuf,
}

#[derive(Args)]
struct Run {
    /// JSON experiment config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    reuse_sft: bool,
    #[arg(long)]
    reuse_q: bool,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_suites(paths: &[PathBuf]) -> Result<TaskSuite> {
    let mut entries = Vec::new();
    for p in paths {
        let suite: Suite = read_json(p)?;
        entries.push((Arc::new(suite.world), suite.tasks));
    }
    Ok(TaskSuite { entries })
}

/// A config carrying the given seed; other fields keep their defaults.
fn seeded(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        ..Default::default()
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::GenWorld(a) => {
            let params = WorldParams {
                pages: a.pages,
                elements_per_page: a.elements_per_page,
                viewport: a.viewport,
                facts: a.facts,
                fields: a.fields,
            };
            let world = generate_world(mix(&[tag::WORLD, seed]), params)?;
            write_json(&a.out, &world)?;
            log::info!("world {} with {} pages -> {}", world.seed, world.pages.len(), a.out.display());
        }
        Command::GenTasks(a) => {
            let world: World = read_json(&a.world)?;
            let tasks = generate_tasks(&world, a.n, seed, a.t_max)?;
            log::info!("{} tasks -> {}", tasks.len(), a.out.display());
            write_json(&a.out, &Suite { world, tasks })?;
        }
        Command::Sft(a) => {
            let suite = load_suites(&a.suite)?;
            let cfg = ExperimentConfig {
                world: suite.entries[0].0.params,
                sft_tasks: a.tasks.min(suite.len()),
                sft_steps: a.steps,
                sft_lr: a.lr,
                ..seeded(seed)
            };
            let policy = train_sft(&cfg, &suite)?;
            policy.save(&a.out)?;
            log::info!("cold-start policy -> {}", a.out.display());
        }
        Command::Collect(a) => {
            let suite = load_suites(&a.suite)?;
            let policy = Policy::load(&a.policy)?;
            let cfg = ExperimentConfig {
                n: a.n,
                p_fault: a.p_fault,
                max_retries: a.retries,
                t_max: a.t_max,
                ..seeded(seed)
            };
            let c = collect_rollouts(&cfg, &suite, &policy)?;
            save_trajectories(&a.out, &c.trajectories())?;
            log::info!(
                "{} rollouts, {} attempts, {} rejected, {} exhausted -> {}",
                c.stats.rollouts,
                c.stats.attempts,
                c.stats.rejected,
                c.stats.exhausted,
                a.out.display()
            );
        }
        Command::Stratify(a) => {
            let mut by_task: BTreeMap<String, Vec<Trajectory>> = BTreeMap::new();
            for t in load_trajectories(&a.trajectories)? {
                by_task.entry(t.task_id.clone()).or_default().push(t);
            }
            let s = stratify_tasks(&by_task, a.n)?;
            log::info!("{} of {} tasks kept", s.kept.len(), s.levels.len());
            write_json(&a.out, &s)?;
        }
        Command::TrainQ(a) => {
            let trajs = load_trajectories(&a.trajectories)?;
            let mut samples = Vec::new();
            for t in &trajs {
                samples.extend(propagate_returns(t)?);
            }
            let Some(first) = trajs.first() else {
                bail!("no trajectories in {}", a.trajectories.display());
            };
            let viewport = first.steps[0].obs.slots.len();
            let cfg = QConfig {
                window: a.window,
                action_focus: !a.no_action_focus,
                hidden: a.hidden,
                ..Default::default()
            };
            let mut q = init_q(cfg, viewport, mix(&[tag::Q_TRAIN, seed, 1]));
            let tc = QTrainConfig {
                epochs: a.epochs,
                lr: a.lr,
                seed,
                ..Default::default()
            };
            let stats = q_train(&mut q, &q_dataset(&cfg, viewport, &samples), &tc)?;
            q.save(&a.out)?;
            log::info!(
                "{} samples, held-out CE {:?} -> {}",
                samples.len(),
                stats.heldout_ce,
                a.out.display()
            );
        }
        Command::Swpo(a) => {
            let policy = Policy::load(&a.policy)?;
            let q = agentq::agentic_q::QModel::load(&a.q)?;
            let trajs = load_trajectories(&a.trajectories)?;
            let strat: Stratification = read_json(&a.stratification)?;
            let pool = state_pool(&trajs, &strat);
            let mut cfg = SwpoConfig {
                iterations: a.iterations,
                filtering: !a.no_filtering,
                weighting: !a.no_weighting,
                seed,
                ..Default::default()
            };
            cfg.clip.variant = a.variant.parse::<Variant>()?;
            cfg.clip.k = a.k;
            cfg.clip.eps = a.eps;
            cfg.clip.sigma_min = a.sigma_min;
            let out = swpo_train(&policy, &q, &pool, &cfg)?;
            fs::create_dir_all(&a.out_dir)?;
            write_metrics_csv(&a.out_dir.join("swpo_metrics.csv"), &out.metrics)?;
            out.policy.save(&a.out_dir.join("swpo_policy.json"))?;
            log::info!(
                "entropy {:.4} -> {:.4}; outputs in {}",
                out.initial_entropy(),
                out.final_entropy(),
                a.out_dir.display()
            );
        }
        Command::Eval(a) => {
            let policy = Policy::load(&a.policy)?;
            let suite = load_suites(&a.suite)?;
            let r = evaluate_policy(&policy, &suite, 1, EnvConfig { t_max: a.t_max })?;
            println!("success_rate {:.4} episodes {} mean_steps {:?}", r.success_rate, r.episodes, r.mean_steps);
            if let Some(out) = a.out {
                write_json(&out, &r)?;
            }
        }
        Command::Report(a) => {
            let report = emit_report(&a.dir)?;
            for c in &report.checks {
                let tag = match c.status {
                    CheckStatus::Pass => "PASS",
                    CheckStatus::Fail => "FAIL",
                    CheckStatus::Skipped => "SKIP",
                };
                println!("{tag} {} {}", c.id, c.detail);
            }
            if !report.passed() {
                std::process::exit(1);
            }
        }
        Command::Run(a) => {
            let mut cfg = match &a.config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(d) = a.out_dir {
                cfg.out_dir = d;
            }
            if let Some(v) = a.variant {
                cfg.swpo.clip.variant = v.parse()?;
            }
            if let Some(w) = a.window {
                cfg.q.window = w;
            }
            let opts = PrepareOptions {
                reuse_sft: a.reuse_sft,
                reuse_q: a.reuse_q,
            };
            let s = run_experiment(&cfg, opts)?;
            println!(
                "held-out success {:.3} -> {:.3} ({:+.1} points); entropy ratio {:.3}",
                s.sft_success,
                s.swpo_success,
                100.0 * s.delta(),
                s.entropy_ratio()
            );
        }
    }
    Ok(())
}
