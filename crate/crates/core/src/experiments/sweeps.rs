use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::records::{mean_sd, sig17, MetricsRecord, SummaryRow};
use super::svg::{line_chart, Series};
use super::{run_one, ExperimentConfig, RunResult};
use crate::cutoff::CutoffKind;
use crate::error::Error;
use crate::trainer::TrainMode;

pub const SWEEP_RATIOS: [f64; 6] = [0.05, 0.1, 0.15, 0.2, 0.3, 0.4];
pub const SWEEP_BETAS: [f64; 5] = [0.0, 0.1, 0.3, 1.0, 3.0];
/// Best ratio per kind in the published ratio study (reference only).
pub const PUBLISHED_BEST_RATIO: [(CutoffKind, f64); 3] =
    [(CutoffKind::Token, 0.15), (CutoffKind::Feature, 0.2), (CutoffKind::Span, 0.1)];
/// Published MNLI dev accuracy per consistency weight (reference only).
pub const PUBLISHED_BETA_MNLI: [(f64, f64); 5] = [(0.0, 88.21), (0.1, 88.27), (0.3, 88.32), (1.0, 88.36), (3.0, 88.12)];

pub const MIN_SEEDS: usize = 3;

#[derive(Debug, Clone)]
pub struct Sweep {
    pub name: String,
    /// Name of the swept parameter.
    pub parameter: String,
    pub records: Vec<MetricsRecord>,
    pub summary: Vec<SummaryRow>,
}

/// A sweep that stopped early; `partial` holds the records of every run that
/// finished.
#[derive(Debug)]
pub struct SweepFailure {
    pub partial: Vec<MetricsRecord>,
    pub run_id: Option<String>,
    pub error: Error,
}

impl From<Error> for SweepFailure {
    fn from(error: Error) -> Self {
        SweepFailure {
            partial: Vec::new(),
            run_id: None,
            error,
        }
    }
}

impl std::fmt::Display for SweepFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.run_id {
            Some(id) => write!(f, "run {id} failed: {}", self.error),
            None => write!(f, "{}", self.error),
        }
    }
}

/// Runs every `(run_id, config)` on a pool of `jobs` threads. Results come
/// back in task order whatever the schedule; after a failure, runs not yet
/// started are skipped.
pub fn run_parallel(tasks: &[(String, ExperimentConfig)], jobs: usize) -> Result<Vec<RunResult>, SweepFailure> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let failed = AtomicBool::new(false);
    let results: Vec<Option<crate::Result<RunResult>>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|(id, cfg)| {
                if failed.load(Ordering::SeqCst) {
                    return None;
                }
                let r = run_one(cfg, id);
                if r.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                Some(r)
            })
            .collect()
    });
    let mut done = Vec::with_capacity(tasks.len());
    let mut first_error = None;
    for ((id, _), r) in tasks.iter().zip(results) {
        match r {
            Some(Ok(run)) => done.push(run),
            Some(Err(e)) if first_error.is_none() => first_error = Some((id.clone(), e)),
            _ => {}
        }
    }
    match first_error {
        None => Ok(done),
        Some((id, error)) => Err(SweepFailure {
            partial: done.into_iter().flat_map(|r| r.records).collect(),
            run_id: Some(id),
            error,
        }),
    }
}

fn check_seeds(seeds: &[u64]) -> Result<(), SweepFailure> {
    if seeds.len() < MIN_SEEDS {
        return Err(Error::Config(format!("sweeps need at least {MIN_SEEDS} seeds, got {}", seeds.len())).into());
    }
    Ok(())
}

fn fmt_value(v: f64) -> String {
    format!("{v}")
}

/// Per-run summary rows with the statistics of each `(kind, value)` cell.
fn summarize(
    sweep: &str,
    runs: &[RunResult],
    cells: &[(CutoffKind, f64)],
    reference: impl Fn(CutoffKind, f64) -> Option<f64>,
) -> Vec<SummaryRow> {
    let mut by_cell: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let cell_of = |r: &RunResult| {
        cells
            .iter()
            .position(|&c| c == cell_key(sweep, r))
            .expect("every run belongs to a cell")
    };
    for r in runs {
        by_cell.entry(cell_of(r)).or_default().push(r.final_dev);
    }
    runs.iter()
        .map(|r| {
            let (kind, value) = cell_key(sweep, r);
            let values = &by_cell[&cell_of(r)];
            let (mean, sd) = mean_sd(values);
            SummaryRow {
                sweep: sweep.to_string(),
                cutoff_kind: kind.to_string(),
                value,
                seed: r.config.seed,
                run_id: r.run_id.clone(),
                dev_accuracy: r.final_dev,
                cell_mean: mean,
                cell_sd: sd,
                cell_n: values.len(),
                reference: reference(kind, value),
            }
        })
        .collect()
}

fn cell_key(sweep: &str, r: &RunResult) -> (CutoffKind, f64) {
    let value = if sweep == "beta" {
        r.config.js_weight
    } else {
        r.config.cutoff_ratio
    };
    (r.config.cutoff_kind, value)
}

/// One cutoff run per `(kind, ratio, seed)`; `js_weight` and the rest come
/// from `base`.
pub fn sweep_ratio(
    base: &ExperimentConfig,
    ratios: &[f64],
    kinds: &[CutoffKind],
    seeds: &[u64],
    jobs: usize,
) -> Result<Sweep, SweepFailure> {
    check_seeds(seeds)?;
    let mut tasks = Vec::new();
    let mut cells = Vec::new();
    for &kind in kinds {
        for &ratio in ratios {
            cells.push((kind, ratio));
            for &seed in seeds {
                let cfg = ExperimentConfig {
                    mode: TrainMode::Cutoff,
                    cutoff_kind: kind,
                    cutoff_ratio: ratio,
                    seed,
                    ..base.clone()
                };
                cfg.validate()?;
                tasks.push((format!("ratio-{kind}-{}-s{seed}", fmt_value(ratio)), cfg));
            }
        }
    }
    let runs = run_parallel(&tasks, jobs)?;
    let summary = summarize("ratio", &runs, &cells, |kind, _| {
        PUBLISHED_BEST_RATIO.iter().find(|(k, _)| *k == kind).map(|&(_, r)| r)
    });
    Ok(Sweep {
        name: "ratio".into(),
        parameter: "cutoff_ratio".into(),
        records: runs.into_iter().flat_map(|r| r.records).collect(),
        summary,
    })
}

/// One span-cutoff run per `(beta, seed)` with `js_weight = beta`.
pub fn sweep_beta(base: &ExperimentConfig, betas: &[f64], seeds: &[u64], jobs: usize) -> Result<Sweep, SweepFailure> {
    check_seeds(seeds)?;
    let mut tasks = Vec::new();
    let mut cells = Vec::new();
    for &beta in betas {
        cells.push((CutoffKind::Span, beta));
        for &seed in seeds {
            tasks.push((format!("beta-{}-s{seed}", fmt_value(beta)), beta_config(base, beta, seed)));
        }
    }
    for (_, cfg) in &tasks {
        cfg.validate()?;
    }
    let runs = run_parallel(&tasks, jobs)?;
    let summary = summarize("beta", &runs, &cells, |_, beta| {
        PUBLISHED_BETA_MNLI.iter().find(|(b, _)| *b == beta).map(|&(_, acc)| acc)
    });
    Ok(Sweep {
        name: "beta".into(),
        parameter: "js_weight".into(),
        records: runs.into_iter().flat_map(|r| r.records).collect(),
        summary,
    })
}

/// The run configuration `sweep_beta` uses for one cell.
pub fn beta_config(base: &ExperimentConfig, beta: f64, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        mode: TrainMode::Cutoff,
        cutoff_kind: CutoffKind::Span,
        js_weight: beta,
        seed,
        ..base.clone()
    }
}

/// Accuracy against the swept value, one polyline per cutoff kind (cell
/// means).
pub fn sweep_svg(sweep: &Sweep) -> String {
    let mut series: Vec<Series> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for row in &sweep.summary {
        if !seen.insert((row.cutoff_kind.clone(), row.value.to_bits())) {
            continue;
        }
        match series.iter_mut().find(|s| s.name == row.cutoff_kind) {
            Some(s) => s.points.push((row.value, row.cell_mean)),
            None => series.push(Series {
                name: row.cutoff_kind.clone(),
                points: vec![(row.value, row.cell_mean)],
            }),
        }
    }
    for s in &mut series {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    line_chart(
        &format!("{} sweep: dev accuracy (mean over seeds)", sweep.name),
        &sweep.parameter,
        "dev accuracy",
        &series,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub seed: u64,
    #[serde(serialize_with = "sig17")]
    pub dev_accuracy: f64,
    #[serde(serialize_with = "sig17")]
    pub test_accuracy: f64,
    pub steps: usize,
    pub forwards: u64,
    pub backwards: u64,
    #[serde(serialize_with = "sig17")]
    pub forwards_per_step: f64,
    #[serde(serialize_with = "sig17")]
    pub backwards_per_step: f64,
    #[serde(serialize_with = "sig17")]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub records: Vec<MetricsRecord>,
}

impl Comparison {
    /// Total wall time of a method over all seeds.
    pub fn wall_seconds(&self, method: &str) -> f64 {
        self.rows.iter().filter(|r| r.method == method).map(|r| r.wall_seconds).sum()
    }

    pub fn mean_dev(&self, method: &str) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.method == method).map(|r| r.dev_accuracy).collect();
        mean_sd(&v).0
    }
}

/// Baseline, cutoff with one view, and PGD with each of `adv_steps`, under
/// identical data, seeds and step budgets.
pub fn compare_adversarial(
    base: &ExperimentConfig,
    adv_steps: &[usize],
    seeds: &[u64],
    jobs: usize,
) -> Result<Comparison, SweepFailure> {
    let mut methods = vec![
        (
            "baseline".to_string(),
            ExperimentConfig {
                mode: TrainMode::Baseline,
                ..base.clone()
            },
        ),
        (
            "cutoff".to_string(),
            ExperimentConfig {
                mode: TrainMode::Cutoff,
                n_samples: 1,
                ..base.clone()
            },
        ),
    ];
    for &t in adv_steps {
        methods.push((
            format!("pgd-{t}"),
            ExperimentConfig {
                mode: TrainMode::Adversarial,
                adv_steps: t,
                ..base.clone()
            },
        ));
    }
    let mut tasks = Vec::new();
    for (name, cfg) in &methods {
        for &seed in seeds {
            let cfg = ExperimentConfig { seed, ..cfg.clone() };
            cfg.validate()?;
            tasks.push((format!("compare-{name}-s{seed}"), cfg));
        }
    }
    let runs = run_parallel(&tasks, jobs)?;
    let rows: Vec<ComparisonRow> = runs
        .iter()
        .zip(&tasks)
        .map(|(r, (id, _))| {
            let method = id
                .strip_prefix("compare-")
                .and_then(|s| s.rsplit_once("-s"))
                .map_or(String::new(), |(m, _)| m.to_string());
            let (f, b) = r.per_step();
            ComparisonRow {
                method,
                seed: r.config.seed,
                dev_accuracy: r.final_dev,
                test_accuracy: r.test_metric,
                steps: r.steps,
                forwards: r.totals.forwards,
                backwards: r.totals.backwards,
                forwards_per_step: f,
                backwards_per_step: b,
                wall_seconds: r.wall_seconds,
            }
        })
        .collect();

    for c in rows.iter().filter(|r| r.method == "cutoff") {
        for a in rows.iter().filter(|r| r.method.starts_with("pgd-") && r.seed == c.seed) {
            let cheaper = c.forwards_per_step + c.backwards_per_step < a.forwards_per_step + a.backwards_per_step
                && c.backwards_per_step < a.backwards_per_step;
            if !cheaper {
                return Err(Error::Infeasible(format!(
                    "cutoff used {}F/{}B per step, {} used {}F/{}B",
                    c.forwards_per_step, c.backwards_per_step, a.method, a.forwards_per_step, a.backwards_per_step
                ))
                .into());
            }
        }
    }
    Ok(Comparison {
        rows,
        records: runs.into_iter().flat_map(|r| r.records).collect(),
    })
}
