//! Train-then-evaluate runs and the stage ablation table.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate_all, fmt_metric, ground_truths, EvalReport, SplitRegistry};
use crate::data::Dataset;
use crate::error::Result;
use crate::graph::{Stage, StageFlags};
use crate::model::{self, build_store, ModelConfig, SceneInputs};
use crate::nn::ParameterStore;
use crate::providers::ProviderSet;
use crate::training::{prepare_scenes, EpochLog, PreparedScene, RunDir, TrainConfig, Trainer};

pub struct RunResult {
    pub store: ParameterStore,
    pub history: Vec<EpochLog>,
    pub report: EvalReport,
    pub seconds: f64,
}

struct Prepared {
    train: Vec<PreparedScene>,
    test: Vec<SceneInputs>,
    splits: SplitRegistry,
}

fn prepare(model: &ModelConfig, dataset: &Dataset, providers: &ProviderSet) -> Result<Prepared> {
    let train = prepare_scenes(&dataset.train, &dataset.registry, model, providers)?;
    let mut test = Vec::with_capacity(dataset.test.len());
    for s in &dataset.test {
        if let Some(inputs) = model::scene_inputs(s, model, providers)? {
            test.push(inputs);
        }
    }
    Ok(Prepared {
        train,
        test,
        splits: SplitRegistry::from_training(&dataset.registry, &dataset.train),
    })
}

fn run_prepared(
    model: &ModelConfig,
    train: &TrainConfig,
    dataset: &Dataset,
    providers: &ProviderSet,
    prepared: &Prepared,
    run_dir: RunDir,
) -> Result<RunResult> {
    let started = Instant::now();
    let store = build_store(model, &dataset.registry, providers, train.seed)?;
    let hash = model.hash(&dataset.registry);
    let mut trainer = Trainer::new(model.clone(), train.clone(), store, hash)?.with_run_dir(run_dir)?;
    trainer.fit(&prepared.train)?;
    let preds = model::predict(&trainer.store, model, &dataset.registry, &prepared.test)?;
    let report = evaluate_all(&preds, &ground_truths(&dataset.test), &dataset.registry, &prepared.splits);
    Ok(RunResult {
        store: trainer.store,
        history: trainer.history,
        report,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Trains on the train split from a fresh store seeded with `train.seed`
/// and evaluates on the test split.
pub fn train_and_evaluate(
    model: &ModelConfig,
    train: &TrainConfig,
    dataset: &Dataset,
    providers: &ProviderSet,
    run_dir: RunDir,
) -> Result<RunResult> {
    let prepared = prepare(model, dataset, providers)?;
    run_prepared(model, train, dataset, providers, &prepared, run_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `vanilla` or `w/o <stage>`.
    pub name: String,
    pub stages: StageFlags,
    pub full: Option<f64>,
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
    pub known_object_full: Option<f64>,
    pub final_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn vanilla(&self) -> &AblationRow {
        &self.rows[0]
    }

    pub fn row(&self, stage: Stage) -> Option<&AblationRow> {
        let name = format!("w/o {}", stage.name());
        self.rows.iter().find(|r| r.name == name)
    }

    /// Text table: Default Full / Rare / Non-rare, Known-Object Full, and
    /// the Full drop against the vanilla row.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "model", "full", "rare", "non-rare", "ko-full", "drop"
        );
        let base = self.vanilla().full;
        for r in &self.rows {
            let drop = match (base, r.full) {
                (Some(b), Some(f)) if r.name != "vanilla" => format!("{:.4}", b - f),
                _ => "-".into(),
            };
            s += &format!(
                "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
                r.name,
                fmt_metric(r.full),
                fmt_metric(r.rare),
                fmt_metric(r.non_rare),
                fmt_metric(r.known_object_full),
                drop
            );
        }
        s
    }
}

/// One vanilla run plus one run per listed stage with that stage switched
/// off, all from the same seeds and data.
pub fn ablation_run(
    base: &ModelConfig,
    train: &TrainConfig,
    dataset: &Dataset,
    providers: &ProviderSet,
    stages: &[Stage],
) -> Result<AblationReport> {
    let prepared = prepare(base, dataset, providers)?;
    let mut variants = vec![("vanilla".to_string(), base.stages)];
    for &s in stages {
        variants.push((format!("w/o {}", s.name()), base.stages.without(s)));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (name, flags) in variants {
        let cfg = ModelConfig {
            stages: flags,
            ..base.clone()
        };
        let r = run_prepared(&cfg, train, dataset, providers, &prepared, RunDir::default())?;
        log::info!("{name}: full {}", fmt_metric(r.report.default.full));
        rows.push(AblationRow {
            name,
            stages: flags,
            full: r.report.default.full,
            rare: r.report.default.rare,
            non_rare: r.report.default.non_rare,
            known_object_full: r.report.known_object.full,
            final_loss: r.history.last().map_or(f64::NAN, |h| h.loss),
            seconds: r.seconds,
        });
    }
    Ok(AblationReport { rows })
}
