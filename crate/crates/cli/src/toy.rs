//! Toy masked-autoencoder sweeps: pipeline comparison, ablation and
//! low-resource studies.

use distill_lab::mae::train::{
    finetune, initial_pretrain, run_pipelines, self_distill, PipelineReport, StageReport,
};
use distill_lab::mae::{ToyModelParams, ToyTask, TrainConfig, Variant};
use distill_lab::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::output::{mean_sd, Cell, Table};

pub const MAE_HEADER: &[&str] = &[
    "mode",
    "seed",
    "pipeline",
    "round",
    "train_loss",
    "test_loss",
    "accuracy",
    "gap",
    "distance_l2",
    "distance_mars",
    "init_checksum",
];

pub const ABLATE_HEADER: &[&str] = &[
    "mode",
    "variant",
    "seeds",
    "accuracy_mean",
    "accuracy_sd",
    "gap_mean",
    "gap_sd",
];

pub const LOWRES_HEADER: &[&str] = &["mode", "seed", "n", "pipeline", "accuracy", "gap"];

/// Shared starting point of every pipeline for one seed.
pub struct SeedSetup {
    pub task: ToyTask,
    pub init: ToyModelParams,
    pub train: TrainConfig,
}

pub fn setup(cfg: &ExperimentConfig, seed: u64) -> Result<SeedSetup> {
    let task = ToyTask::generate(&cfg.task_config(seed))?;
    let init = initial_pretrain(cfg.model_dims(), &task.general, &cfg.init_config(seed))?;
    Ok(SeedSetup {
        task,
        init,
        train: cfg.train_config(seed),
    })
}

fn stage_cells(
    seed: Cell,
    pipeline: &str,
    round: Cell,
    stage: &StageReport,
    checksum: Cell,
) -> Vec<Cell> {
    vec![
        "mae".into(),
        seed,
        pipeline.into(),
        round,
        stage.metrics.train_loss.into(),
        stage.metrics.test_loss.into(),
        stage.metrics.accuracy.into(),
        stage.metrics.gap.into(),
        stage.distance_l2.into(),
        stage.distance_mars.into(),
        checksum,
    ]
}

/// Rows of one seed: fine-tune only, further pre-training (round 0) and one
/// row per self-distillation round.
pub fn mae_rows(seed: u64, report: &PipelineReport) -> Vec<Vec<Cell>> {
    let checksum = || Cell::Text(format!("{:016x}", report.init_checksum));
    let mut rows = vec![stage_cells(
        seed.into(),
        "finetune-only",
        "".into(),
        &report.finetune_only,
        checksum(),
    )];
    for (t, stage) in report.rounds.iter().enumerate() {
        let pipeline = if t == 0 {
            "further-pretrain"
        } else {
            "self-distill"
        };
        rows.push(stage_cells(
            seed.into(),
            pipeline,
            t.into(),
            stage,
            checksum(),
        ));
    }
    rows
}

pub fn run_mae_seed(cfg: &ExperimentConfig, seed: u64) -> Result<PipelineReport> {
    let s = setup(cfg, seed)?;
    run_pipelines(&s.init, &s.task.train, &s.task.test, &s.train)
}

/// Appends `mean` and `sd` rows per (pipeline, round), averaging the numeric
/// columns of the per-seed rows.
pub fn append_mae_aggregates(table: &mut Table) {
    let metric_cols: Vec<usize> = (4..10).collect();
    let mut keys: Vec<(String, String)> = Vec::new();
    for row in &table.rows {
        let key = (row[2].render(), row[3].render());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut extra = Vec::new();
    for (pipeline, round) in keys {
        let rows: Vec<&Vec<Cell>> = table
            .rows
            .iter()
            .filter(|r| r[2].render() == pipeline && r[3].render() == round)
            .collect();
        let stats: Vec<(f64, f64)> = metric_cols
            .iter()
            .map(|&c| {
                mean_sd(
                    &rows
                        .iter()
                        .filter_map(|r| r[c].as_f64())
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        for (label, pick) in [("mean", 0usize), ("sd", 1)] {
            let mut row: Vec<Cell> = vec![
                "mae".into(),
                label.into(),
                pipeline.as_str().into(),
                round.as_str().into(),
            ];
            row.extend(
                stats
                    .iter()
                    .map(|s| Cell::Float(if pick == 0 { s.0 } else { s.1 })),
            );
            row.push("".into());
            extra.push(row);
        }
    }
    for row in extra {
        table.push(row);
    }
}

/// Accuracy and gap of the last self-distillation round under `variant`.
pub fn ablate_seed(cfg: &ExperimentConfig, seed: u64, variant: Variant) -> Result<(f64, f64)> {
    let s = setup(cfg, seed)?;
    let train = TrainConfig {
        variant,
        rounds: s.train.rounds.max(1),
        ..s.train
    };
    let run = self_distill(&s.init, s.task.train.unlabeled(), &train)?;
    let (_, metrics) = finetune(run.last(), &s.task.train, &s.task.test, &train)?;
    Ok((metrics.accuracy, metrics.gap))
}

pub fn ablate_row(variant: Variant, results: &[(f64, f64)]) -> Vec<Cell> {
    let acc: Vec<f64> = results.iter().map(|r| r.0).collect();
    let gap: Vec<f64> = results.iter().map(|r| r.1).collect();
    let (am, asd) = mean_sd(&acc);
    let (gm, gsd) = mean_sd(&gap);
    vec![
        "ablate".into(),
        variant.name().into(),
        results.len().into(),
        am.into(),
        asd.into(),
        gm.into(),
        gsd.into(),
    ]
}

/// Rows `(seed, n, pipeline)` for every low-resource size. Train and
/// unlabeled sets shrink together because the unlabeled set is the train
/// set without labels.
pub fn lowres_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Vec<Cell>>> {
    let s = setup(cfg, seed)?;
    let mut rows = Vec::new();
    for &n in &cfg.lowres_sizes {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(n as u64));
        let sub = s.task.train.stratified_subsample(n, &mut rng)?;
        let report = run_pipelines(&s.init, &sub, &s.task.test, &s.train)?;
        for (pipeline, stage) in [
            ("finetune-only", &report.finetune_only),
            ("further-pretrain", report.further_pretrain()),
            ("self-distill", report.self_distill()),
        ] {
            rows.push(vec![
                "lowres".into(),
                seed.into(),
                n.into(),
                pipeline.into(),
                stage.metrics.accuracy.into(),
                stage.metrics.gap.into(),
            ]);
        }
    }
    Ok(rows)
}

/// Appends per-(n, pipeline) `mean` rows.
pub fn append_lowres_means(table: &mut Table) {
    let mut keys: Vec<(String, String)> = Vec::new();
    for row in &table.rows {
        let key = (row[2].render(), row[3].render());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut extra = Vec::new();
    for (n, pipeline) in keys {
        let rows: Vec<&Vec<Cell>> = table
            .rows
            .iter()
            .filter(|r| r[2].render() == n && r[3].render() == pipeline)
            .collect();
        let mean = |c: usize| {
            mean_sd(
                &rows
                    .iter()
                    .filter_map(|r| r[c].as_f64())
                    .collect::<Vec<_>>(),
            )
            .0
        };
        extra.push(vec![
            "lowres".into(),
            "mean".into(),
            n.parse::<u64>()
                .map(Cell::Int)
                .unwrap_or(Cell::Text(n.clone())),
            Cell::Text(pipeline.clone()),
            mean(4).into(),
            mean(5).into(),
        ]);
    }
    for row in extra {
        table.push(row);
    }
}
