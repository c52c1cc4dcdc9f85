//! Consolidated tables over finished runs and trend checks on them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_metrics, HarnessError, RunSummary};

/// Largest tolerated ordering violation in the ablation check.
pub const ABLATION_TOLERANCE: f64 = 0.01;
/// Required mean held-out gain of every variant over the cold start.
pub const MIN_GAIN: f64 = 0.05;
/// Seeds required before a trend check is evaluated.
pub const MIN_SEEDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCheck {
    pub id: String,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub runs: Vec<(PathBuf, RunSummary)>,
    pub checks: Vec<ReportCheck>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }
}

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    if dir.join("summary.json").is_file() {
        out.push(dir.to_path_buf());
    }
    let mut children: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for c in children {
        find_runs(&c, out)?;
    }
    Ok(())
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Serialize)]
struct GroupRow {
    group: String,
    runs: usize,
    sft_success: f64,
    swpo_success: f64,
    gain: f64,
    entropy_ratio: f64,
}

fn group_rows<K: Ord + Clone>(
    runs: &[&RunSummary],
    key: impl Fn(&RunSummary) -> K,
    name: impl Fn(&K) -> String,
) -> Vec<GroupRow> {
    let mut groups: BTreeMap<K, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        groups.entry(key(r)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(k, rs)| GroupRow {
            group: name(&k),
            runs: rs.len(),
            sft_success: mean(rs.iter().map(|r| r.sft_success)),
            swpo_success: mean(rs.iter().map(|r| r.swpo_success)),
            gain: mean(rs.iter().map(|r| r.delta())),
            entropy_ratio: mean(rs.iter().map(|r| r.entropy_ratio())),
        })
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn is_full(r: &RunSummary) -> bool {
    r.filtering && r.weighting
}

fn check(id: &str, status: CheckStatus, detail: String) -> ReportCheck {
    ReportCheck {
        id: id.into(),
        status,
        detail,
    }
}

fn pass_if(ok: bool) -> CheckStatus {
    if ok {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    }
}

/// Per-variant gain of full SWPO runs at window 1.
fn gain_check(runs: &[&RunSummary]) -> Vec<ReportCheck> {
    let mut by_variant: BTreeMap<&str, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs.iter().filter(|r| is_full(r) && r.window == 1) {
        by_variant.entry(r.variant.as_str()).or_default().push(r);
    }
    if by_variant.is_empty() {
        return vec![check("gain", CheckStatus::Skipped, "no full runs at window 1".into())];
    }
    let mut out = Vec::new();
    for (v, rs) in by_variant {
        let id = format!("gain:{v}");
        if rs.len() < MIN_SEEDS {
            out.push(check(&id, CheckStatus::Skipped, format!("{} seeds", rs.len())));
            continue;
        }
        let g = mean(rs.iter().map(|r| r.delta()));
        out.push(check(&id, pass_if(g >= MIN_GAIN), format!("mean gain {:+.2} points over {} seeds", 100.0 * g, rs.len())));
        let worse: Vec<u64> = rs
            .iter()
            .filter(|r| match (r.joint_swpo_steps, r.joint_sft_steps) {
                (Some(a), Some(b)) => a > b,
                _ => false,
            })
            .map(|r| r.seed)
            .collect();
        out.push(check(
            &format!("steps:{v}"),
            pass_if(worse.is_empty()),
            format!("seeds with more steps on jointly solved tasks: {worse:?}"),
        ));
    }
    out
}

fn window_check(runs: &[&RunSummary]) -> ReportCheck {
    let pick = |w: usize| -> BTreeMap<(String, u64), &RunSummary> {
        runs.iter()
            .filter(|r| is_full(r) && r.window == w)
            .map(|r| ((r.variant.clone(), r.seed), *r))
            .collect()
    };
    let (w1, w10) = (pick(1), pick(10));
    let pairs: Vec<(&RunSummary, &RunSummary)> = w10.iter().filter_map(|(k, b)| w1.get(k).map(|a| (*a, *b))).collect();
    if pairs.len() < MIN_SEEDS {
        return check("window", CheckStatus::Skipped, format!("{} paired seeds", pairs.len()));
    }
    let ratios_ok = pairs.iter().all(|(a, b)| a.entropy_ratio() >= b.entropy_ratio());
    let sr1 = mean(pairs.iter().map(|p| p.0.swpo_success));
    let sr10 = mean(pairs.iter().map(|p| p.1.swpo_success));
    let ratios: Vec<String> = pairs
        .iter()
        .map(|(a, b)| format!("{:.3}/{:.3}", a.entropy_ratio(), b.entropy_ratio()))
        .collect();
    check(
        "window",
        pass_if(ratios_ok && sr1 >= sr10),
        format!("entropy ratio w1/w10 {}; success w1 {:.3} w10 {:.3}", ratios.join(" "), sr1, sr10),
    )
}

fn ablation_check(runs: &[&RunSummary]) -> ReportCheck {
    let arm = |f: bool, w: bool| -> Vec<f64> {
        runs.iter()
            .filter(|r| r.variant == "s-grpo" && r.window == 1 && r.filtering == f && r.weighting == w)
            .map(|r| r.swpo_success)
            .collect()
    };
    let (base, filt, full) = (arm(false, false), arm(true, false), arm(true, true));
    if [&base, &filt, &full].iter().any(|v| v.len() < MIN_SEEDS) {
        return check("ablation", CheckStatus::Skipped, "missing ablation arms".into());
    }
    let (b, f, w) = (mean(base), mean(filt), mean(full));
    check(
        "ablation",
        pass_if(f >= b - ABLATION_TOLERANCE && w >= f - ABLATION_TOLERANCE),
        format!("baseline {b:.3} +filter {f:.3} +filter+weight {w:.3}"),
    )
}

#[derive(Serialize)]
struct EntropyRow<'a> {
    run: String,
    label: &'a str,
    variant: &'a str,
    window: usize,
    seed: u64,
    iter: usize,
    entropy: f64,
}

/// Scans `dir` for finished runs and writes `runs.csv`, `groups.csv`,
/// `ablation.csv`, `window.csv`, `entropy.csv` and `checks.csv` into it.
pub fn emit_report(dir: &Path) -> Result<Report, HarnessError> {
    let mut paths = Vec::new();
    if dir.is_dir() {
        find_runs(dir, &mut paths)?;
    }
    if paths.is_empty() {
        return Err(HarnessError::MissingRuns(dir.display().to_string()));
    }
    let mut runs = Vec::new();
    for p in paths {
        let s: RunSummary = serde_json::from_str(&fs::read_to_string(p.join("summary.json"))?)?;
        runs.push((p, s));
    }
    let refs: Vec<&RunSummary> = runs.iter().map(|r| &r.1).collect();
    write_rows(&dir.join("runs.csv"), &refs)?;
    write_rows(&dir.join("groups.csv"), &group_rows(&refs, |r| r.label.clone(), Clone::clone))?;
    let ablation = group_rows(
        &refs,
        |r| (r.variant.clone(), r.filtering, r.weighting),
        |(v, f, w)| match (f, w) {
            (false, false) => format!("{v} baseline"),
            (true, false) => format!("{v} +filtering"),
            (false, true) => format!("{v} +weighting"),
            (true, true) => format!("{v} +filtering+weighting"),
        },
    );
    write_rows(&dir.join("ablation.csv"), &ablation)?;
    write_rows(&dir.join("window.csv"), &group_rows(&refs, |r| r.window, |w| format!("w={w}")))?;

    let mut entropy = Vec::new();
    for (p, s) in &runs {
        for m in load_metrics(p)? {
            entropy.push(EntropyRow {
                run: p.strip_prefix(dir).unwrap_or(p).display().to_string(),
                label: &s.label,
                variant: &s.variant,
                window: s.window,
                seed: s.seed,
                iter: m.iter,
                entropy: m.entropy,
            });
        }
    }
    write_rows(&dir.join("entropy.csv"), &entropy)?;

    let mut checks = gain_check(&refs);
    checks.push(window_check(&refs));
    checks.push(ablation_check(&refs));
    write_rows(&dir.join("checks.csv"), &checks)?;
    Ok(Report { runs, checks })
}
