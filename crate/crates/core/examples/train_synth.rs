//! Trains the full model on a synthetic task and prints the loss curve and
//! the final metrics.
//!
//! cargo run --release -p mgnm-core --example train_synth -- spatial-rule 200 64

use std::env;

use mgnm::evaluation::{evaluate_hico, ground_truths, HicoSetting, SplitRegistry};
use mgnm::model::{self, build_store, ModelConfig};
use mgnm::providers::{ProviderConfig, ProviderSet};
use mgnm::synth::{generate_synthetic, SynthTaskSpec, TaskKind};
use mgnm::training::{prepare_scenes, TrainConfig, Trainer};

fn main() -> mgnm::Result<()> {
    let args: Vec<String> = env::args().skip(1).collect();
    let task: TaskKind = args.first().map_or(Ok(TaskKind::SpatialRule), |s| s.parse()).expect("task name");
    let epochs: usize = args.get(1).map_or(200, |s| s.parse().expect("epochs"));
    let dim: usize = args.get(2).map_or(64, |s| s.parse().expect("dim"));
    let lr: f64 = args.get(3).map_or(1e-4, |s| s.parse().expect("lr"));

    let spec = SynthTaskSpec::new(task, 7);
    let dataset = generate_synthetic(&spec)?;
    let pcfg = ProviderConfig {
        seed: dataset.provider_seed,
        visual_dim: dim,
        text_dim: dim,
        backbone_dim: dim,
        node_dim: dim,
        ..ProviderConfig::default()
    };
    let providers = ProviderSet::stub(&pcfg);
    let model = ModelConfig {
        node_dim: dim,
        visual_dim: dim,
        text_dim: dim,
        backbone_dim: dim,
        ..ModelConfig::default()
    };
    let every: usize = args.get(4).map_or(10, |s| s.parse().expect("eval every"));
    let train = TrainConfig {
        epochs,
        lr,
        eval_every: every,
        ..TrainConfig::default()
    };
    let started = std::time::Instant::now();
    let train_scenes = prepare_scenes(&dataset.train, &dataset.registry, &model, &providers)?;
    let test: Vec<_> = dataset
        .test
        .iter()
        .filter_map(|s| model::scene_inputs(s, &model, &providers).transpose())
        .collect::<mgnm::Result<_>>()?;
    let splits = SplitRegistry::from_training(&dataset.registry, &dataset.train);
    let gts = ground_truths(&dataset.test);
    let store = build_store(&model, &dataset.registry, &providers, train.seed)?;
    let eval_model = model.clone();
    let registry = dataset.registry.clone();
    let hook = move |_epoch: usize, store: &mgnm::nn::ParameterStore| {
        let preds = model::predict(store, &eval_model, &registry, &test)?;
        let r = evaluate_hico(&preds, &gts, &registry, &splits, HicoSetting::Default);
        Ok(serde_json::json!({ "full": r.full, "rare": r.rare, "non_rare": r.non_rare }))
    };
    let mut trainer = Trainer::new(model.clone(), train, store, model.hash(&dataset.registry))?.with_eval(Box::new(hook));
    trainer.fit(&train_scenes)?;
    for h in &trainer.history {
        if let Some(e) = &h.eval {
            println!("epoch {:>4} loss {:.6} eval {e}", h.epoch, h.loss);
        }
    }
    println!("total {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
