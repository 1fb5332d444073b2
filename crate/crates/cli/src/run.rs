//! Mode dispatch, parallel seed execution, output files and exit codes.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use distill_lab::mae::Variant;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, RunMode};
use crate::output::{line_chart, Cell, Series, Table};
use crate::{theory, toy, verify};

pub const THREADS_ENV: &str = "DISTILL_LAB_THREADS";

/// Deliberate corruption used to prove that the verification harness
/// notices errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales the closed-form distilled weight by `1 + 1e-3`.
    ClosedForm,
    /// Scales the Euler oracle's result by `1 + 1e-2`.
    Flow,
    /// Scales the analytic reconstruction gradient by `1 + 1e-2`.
    Gradient,
}

impl Fault {
    pub const ALL: [Fault; 3] = [Fault::ClosedForm, Fault::Flow, Fault::Gradient];

    pub fn name(&self) -> &'static str {
        match self {
            Fault::ClosedForm => "closed-form",
            Fault::Flow => "flow",
            Fault::Gradient => "gradient",
        }
    }
}

impl FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Fault::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Fault::ALL.iter().map(Fault::name).collect();
                format!("unknown fault `{s}` (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("{0}")]
    Usage(String),

    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    #[error("{failed} of {total} invariant checks failed")]
    Invariant { failed: usize, total: usize },

    #[error("{failed} of {total} work units failed")]
    Runtime { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Invariant { .. } => 3,
            CliError::Io { .. } | CliError::Runtime { .. } => 4,
        }
    }
}

/// Everything a mode produces before anything touches the disk.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub table: Table,
    /// `(file stem, svg)` pairs written under `charts/`.
    pub charts: Vec<(String, String)>,
    /// Work units that failed, with their error message.
    pub failures: Vec<(String, String)>,
    pub units: usize,
    /// Number of failing verification checks; only set by `verify`.
    pub failed_checks: usize,
}

impl Outcome {
    fn new(table: Table) -> Self {
        Self {
            table,
            charts: Vec::new(),
            failures: Vec::new(),
            units: 0,
            failed_checks: 0,
        }
    }
}

/// Thread pool capped by `DISTILL_LAB_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        let threads: usize = raw.trim().parse().ok().filter(|&t| t > 0).ok_or_else(|| {
            CliError::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got `{raw}`"
            ))
        })?;
        builder = builder.num_threads(threads);
    }
    builder
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker threads: {e}")))
}

/// Sorted, de-duplicated seeds: the merge key for all per-seed output.
fn seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    seeds
}

/// Runs `work` for every seed in parallel and returns results in seed order.
fn per_seed<T: Send>(
    pool: &rayon::ThreadPool,
    cfg: &ExperimentConfig,
    work: impl Fn(u64) -> distill_lab::Result<T> + Sync,
) -> Vec<(u64, distill_lab::Result<T>)> {
    let seeds = seeds(cfg);
    pool.install(|| seeds.par_iter().map(|&s| (s, work(s))).collect())
}

/// Computes the results of `mode` without writing files.
pub fn execute(
    mode: RunMode,
    cfg: &ExperimentConfig,
    fault: Option<Fault>,
) -> Result<Outcome, CliError> {
    let pool = thread_pool()?;
    Ok(match mode {
        RunMode::Theory => run_theory(&pool, cfg, fault),
        RunMode::Mae => run_mae(&pool, cfg),
        RunMode::Ablate => run_ablate(&pool, cfg),
        RunMode::Lowres => run_lowres(&pool, cfg),
        RunMode::Verify => run_verify(&pool, cfg, fault),
    })
}

fn collect_rows(outcome: &mut Outcome, results: Vec<(u64, distill_lab::Result<Vec<Vec<Cell>>>)>) {
    outcome.units += results.len();
    for (seed, result) in results {
        match result {
            Ok(rows) => rows.into_iter().for_each(|r| outcome.table.push(r)),
            Err(e) => outcome
                .failures
                .push((format!("seed {seed}"), e.to_string())),
        }
    }
}

fn column_series(
    table: &Table,
    group_col: usize,
    x_col: usize,
    y_col: usize,
    rows: &[&Vec<Cell>],
) -> Vec<Series> {
    let mut series: Vec<Series> = Vec::new();
    for row in rows {
        let label = format!("{} {}", table.header[group_col], row[group_col].render());
        let (Some(x), Some(y)) = (row[x_col].as_f64(), row[y_col].as_f64()) else {
            continue;
        };
        match series.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push((x, y)),
            None => series.push(Series {
                label,
                points: vec![(x, y)],
            }),
        }
    }
    series
}

fn run_theory(pool: &rayon::ThreadPool, cfg: &ExperimentConfig, fault: Option<Fault>) -> Outcome {
    let mut outcome = Outcome::new(theory::empty_table());
    collect_rows(
        &mut outcome,
        per_seed(pool, cfg, |s| theory::run_seed(cfg, s, fault)),
    );
    let rows: Vec<&Vec<Cell>> = outcome.table.rows.iter().collect();
    let (seed_col, t_col) = (1, 2);
    for metric in ["zeta", "psi", "distance", "bound_rhs"] {
        let col = outcome
            .table
            .column(metric)
            .expect("theory header has the metric");
        let series = column_series(&outcome.table, seed_col, t_col, col, &rows);
        outcome.charts.push((
            format!("theory_{metric}"),
            line_chart(metric, "round t", metric, &series),
        ));
    }
    outcome
}

/// Series over rounds from the aggregate `mean` rows of the mae table.
fn mae_chart(table: &Table, metric: &str) -> String {
    let col = table.column(metric).expect("mae header has the metric");
    let means: Vec<&Vec<Cell>> = table
        .rows
        .iter()
        .filter(|r| r[1].render() == "mean")
        .collect();
    let mut rounds = Series {
        label: "distilled (round 0 = further pre-training)".into(),
        points: Vec::new(),
    };
    let mut baseline = None;
    for row in &means {
        let round = row[3].render().parse::<f64>().ok();
        let Some(y) = row[col].as_f64() else { continue };
        match round {
            Some(t) => rounds.points.push((t, y)),
            None => baseline = Some(y),
        }
    }
    let mut series = vec![rounds.clone()];
    if let Some(y) = baseline {
        series.push(Series {
            label: "finetune-only".into(),
            points: rounds.points.iter().map(|&(t, _)| (t, y)).collect(),
        });
    }
    line_chart(metric, "round", metric, &series)
}

fn run_mae(pool: &rayon::ThreadPool, cfg: &ExperimentConfig) -> Outcome {
    let mut outcome = Outcome::new(Table::new(toy::MAE_HEADER));
    let results = per_seed(pool, cfg, |s| {
        Ok(toy::mae_rows(s, &toy::run_mae_seed(cfg, s)?))
    });
    collect_rows(&mut outcome, results);
    if !outcome.table.rows.is_empty() {
        toy::append_mae_aggregates(&mut outcome.table);
    }
    for metric in ["gap", "accuracy", "distance_l2", "distance_mars"] {
        outcome
            .charts
            .push((format!("mae_{metric}"), mae_chart(&outcome.table, metric)));
    }
    outcome
}

fn run_ablate(pool: &rayon::ThreadPool, cfg: &ExperimentConfig) -> Outcome {
    let mut outcome = Outcome::new(Table::new(toy::ABLATE_HEADER));
    let seeds = seeds(cfg);
    let units: Vec<(Variant, u64)> = Variant::ALL
        .into_iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<_> = pool.install(|| {
        units
            .par_iter()
            .map(|&(v, s)| (v, s, toy::ablate_seed(cfg, s, v)))
            .collect()
    });
    outcome.units = results.len();
    for variant in Variant::ALL {
        let mut ok = Vec::new();
        for (v, s, r) in &results {
            if *v != variant {
                continue;
            }
            match r {
                Ok(value) => ok.push(*value),
                Err(e) => outcome
                    .failures
                    .push((format!("variant {} seed {s}", v.name()), e.to_string())),
            }
        }
        if !ok.is_empty() {
            outcome.table.push(toy::ablate_row(variant, &ok));
        }
    }
    outcome
}

fn run_lowres(pool: &rayon::ThreadPool, cfg: &ExperimentConfig) -> Outcome {
    let mut outcome = Outcome::new(Table::new(toy::LOWRES_HEADER));
    collect_rows(
        &mut outcome,
        per_seed(pool, cfg, |s| toy::lowres_seed(cfg, s)),
    );
    if !outcome.table.rows.is_empty() {
        toy::append_lowres_means(&mut outcome.table);
    }
    let means: Vec<&Vec<Cell>> = outcome
        .table
        .rows
        .iter()
        .filter(|r| r[1].render() == "mean")
        .collect();
    let series = column_series(&outcome.table, 3, 2, 4, &means);
    outcome.charts.push((
        "lowres_accuracy".into(),
        line_chart("accuracy", "n", "accuracy", &series),
    ));
    outcome
}

fn run_verify(pool: &rayon::ThreadPool, cfg: &ExperimentConfig, fault: Option<Fault>) -> Outcome {
    let seed = seeds(cfg)[0];
    let checks = pool
        .install(|| verify::run_checks(cfg.verify_instances, seed, cfg.lambda, cfg.horizon, fault));
    let mut outcome = Outcome::new(verify::table(&checks));
    outcome.units = checks.len();
    outcome.failed_checks = checks.iter().filter(|c| !c.passed()).count();
    outcome
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the table, then the charts. Chart failures become warnings.
pub fn write_outputs(
    mode: RunMode,
    out: &Path,
    outcome: &Outcome,
) -> Result<Vec<String>, CliError> {
    fs::create_dir_all(out).map_err(|source| CliError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let file = match mode {
        RunMode::Verify => "verify.txt".to_string(),
        other => format!("{}.csv", other.name()),
    };
    let path = out.join(file);
    let csv = outcome.table.to_csv().map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    write_file(&path, &csv)?;

    let mut warnings = Vec::new();
    if outcome.charts.is_empty() {
        return Ok(warnings);
    }
    let dir = out.join("charts");
    if let Err(e) = fs::create_dir_all(&dir) {
        warnings.push(format!(
            "charts skipped: cannot create {}: {e}",
            dir.display()
        ));
        return Ok(warnings);
    }
    for (stem, svg) in &outcome.charts {
        let path = dir.join(format!("{stem}.svg"));
        if let Err(e) = fs::write(&path, svg) {
            warnings.push(format!("chart {} not written: {e}", path.display()));
        }
    }
    Ok(warnings)
}

/// Full run: compute, write, report. `log` receives failures and warnings.
pub fn run(
    mode: RunMode,
    cfg: &ExperimentConfig,
    fault: Option<Fault>,
    log: &mut dyn Write,
) -> Result<(), CliError> {
    let outcome = execute(mode, cfg, fault)?;
    for (unit, message) in &outcome.failures {
        let _ = writeln!(log, "error: {unit} failed: {message}");
    }
    for warning in write_outputs(mode, &cfg.out, &outcome)? {
        let _ = writeln!(log, "warning: {warning}");
    }
    if mode == RunMode::Verify {
        for row in &outcome.table.rows {
            let _ = writeln!(log, "{:<40} {}", row[0].render(), row[1].render());
        }
    }
    if outcome.failed_checks > 0 {
        return Err(CliError::Invariant {
            failed: outcome.failed_checks,
            total: outcome.units,
        });
    }
    if !outcome.failures.is_empty() {
        return Err(CliError::Runtime {
            failed: outcome.failures.len(),
            total: outcome.units,
        });
    }
    Ok(())
}
