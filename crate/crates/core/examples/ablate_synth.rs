//! Vanilla versus one-stage-off run on a synthetic task.
//!
//! cargo run --release -p mgnm-core --example ablate_synth -- category-rule textual 100 32 1e-3

use std::env;

use mgnm::evaluation::ablation_run;
use mgnm::graph::Stage;
use mgnm::model::ModelConfig;
use mgnm::providers::{ProviderConfig, ProviderSet};
use mgnm::synth::{generate_synthetic, SynthTaskSpec, TaskKind};
use mgnm::training::TrainConfig;

fn main() -> mgnm::Result<()> {
    let args: Vec<String> = env::args().skip(1).collect();
    let task: TaskKind = args.first().map_or(Ok(TaskKind::VisualRule), |s| s.parse()).expect("task name");
    let stage: Stage = args.get(1).map_or(Ok(Stage::Visual), |s| s.parse()).expect("stage");
    let epochs: usize = args.get(2).map_or(200, |s| s.parse().expect("epochs"));
    let dim: usize = args.get(3).map_or(32, |s| s.parse().expect("dim"));
    let lr: f64 = args.get(4).map_or(1e-3, |s| s.parse().expect("learning rate"));

    let dataset = generate_synthetic(&SynthTaskSpec::new(task, 7))?;
    let providers = ProviderSet::stub(&ProviderConfig {
        seed: dataset.provider_seed,
        visual_dim: dim,
        text_dim: dim,
        backbone_dim: dim,
        node_dim: dim,
        ..ProviderConfig::default()
    });
    let model = ModelConfig {
        node_dim: dim,
        visual_dim: dim,
        text_dim: dim,
        backbone_dim: dim,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        epochs,
        lr,
        ..TrainConfig::default()
    };
    let report = ablation_run(&model, &train, &dataset, &providers, &[stage])?;
    print!("{}", report.table());
    for r in &report.rows {
        println!("{} loss {:.6} {:.1}s", r.name, r.final_loss, r.seconds);
    }
    Ok(())
}
