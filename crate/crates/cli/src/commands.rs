use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mgnm::autograd::{Mat, Tape};
use mgnm::data::{self, Dataset, Split};
use mgnm::decoder::HoiPrediction;
use mgnm::evaluation::{ablation_run, evaluate_all, ground_truths, hico_pr_curves, EvalReport, HicoSetting, SplitRegistry};
use mgnm::graph::Stage;
use mgnm::hashing::hex_digest;
use mgnm::model::{self, build_store, ForwardOptions, SceneInputs};
use mgnm::nn::checkpoint::Checkpoint;
use mgnm::nn::ParameterStore;
use mgnm::providers::ProviderSet;
use mgnm::synth::generate_synthetic;
use mgnm::training::{prepare_scenes, RunDir, Trainer, CHECKPOINT_FILE};
use serde_json::json;

use crate::manifest::{manifest_path, InputFile, Manifest};
use crate::{plot, CliError, Command, Context, DataArg};

struct Timer {
    start: Instant,
    phase: Instant,
    timings: BTreeMap<String, f64>,
}

impl Timer {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            phase: Instant::now(),
            timings: BTreeMap::new(),
        }
    }

    fn lap(&mut self, name: &str) {
        self.timings.insert(name.into(), self.phase.elapsed().as_secs_f64());
        self.phase = Instant::now();
    }

    fn finish(mut self) -> BTreeMap<String, f64> {
        self.timings.insert("total".into(), self.start.elapsed().as_secs_f64());
        self.timings
    }
}

fn io(e: std::io::Error) -> CliError {
    CliError::Run(e.into())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, body + "\n").map_err(io)
}

fn require_out(ctx: &Context, what: &str) -> Result<PathBuf, CliError> {
    ctx.out
        .clone()
        .ok_or_else(|| CliError::Config(format!("{what} needs --out or MGNM_OUT_DIR")))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(io),
        _ => Ok(()),
    }
}

fn split_of(name: &str) -> Split {
    if name == "train" {
        Split::Train
    } else {
        Split::Test
    }
}

/// Everything a model-facing command needs.
struct Loaded {
    dataset: Dataset,
    providers: ProviderSet,
}

fn load(ctx: &mut Context, data: &DataArg, m: &mut Manifest) -> Result<Loaded, CliError> {
    let dataset = match &data.data {
        Some(path) => {
            m.inputs.insert("data".into(), InputFile::hash(path)?);
            Dataset::load(path)?
        }
        None => generate_synthetic(&ctx.config.synth)?,
    };
    // stub features must be the ones the scenes were generated against
    ctx.config.providers.seed = dataset.provider_seed;
    m.config = ctx.config.clone();
    m.config_hash = crate::manifest::config_hash(&ctx.config);
    let providers = ProviderSet::from_config(&ctx.config.providers, &ctx.base_dir)?;
    Ok(Loaded { dataset, providers })
}

fn inputs_of(split: &[data::SceneRecord], ctx: &Context, providers: &ProviderSet) -> Result<Vec<SceneInputs>, CliError> {
    let mut out = Vec::with_capacity(split.len());
    for s in split {
        if let Some(i) = model::scene_inputs(s, &ctx.config.model, providers)? {
            out.push(i);
        }
    }
    Ok(out)
}

fn load_store(ctx: &Context, l: &Loaded, checkpoint: Option<&Path>, m: &mut Manifest) -> Result<ParameterStore, CliError> {
    let cfg = &ctx.config;
    let mut store = build_store(&cfg.model, &l.dataset.registry, &l.providers, cfg.train.seed)?;
    if let Some(path) = checkpoint {
        m.inputs.insert("checkpoint".into(), InputFile::hash(path)?);
        Checkpoint::load(path)?.apply(&mut store, &cfg.model.hash(&l.dataset.registry))?;
    }
    Ok(store)
}

fn evaluate(ctx: &Context, l: &Loaded, preds: &[HoiPrediction]) -> EvalReport {
    let scenes = l.dataset.scenes(split_of(&ctx.config.eval.split));
    let splits = SplitRegistry::from_training(&l.dataset.registry, &l.dataset.train);
    evaluate_all(preds, &ground_truths(scenes), &l.dataset.registry, &splits)
}

fn report_json(ctx: &Context, l: &Loaded, preds: &[HoiPrediction], report: &EvalReport) -> serde_json::Value {
    let mut v = serde_json::to_value(report).expect("report serializes");
    if ctx.config.eval.pr_curves {
        let gts = ground_truths(l.dataset.scenes(split_of(&ctx.config.eval.split)));
        let curves = hico_pr_curves(preds, &gts, &l.dataset.registry, HicoSetting::Default);
        v["pr_curves"] = json!(curves);
    }
    v
}

fn digest_json(v: &impl serde::Serialize) -> String {
    hex_digest(serde_json::to_string(v).expect("serializable").as_bytes())
}

fn scene_by_key<'a>(inputs: &'a [SceneInputs], key: Option<&str>) -> Result<&'a SceneInputs, CliError> {
    match key {
        Some(k) => inputs
            .iter()
            .find(|s| s.image_key == k)
            .ok_or_else(|| CliError::Config(format!("no scene `{k}` with human-object pairs in the split"))),
        None => inputs
            .first()
            .ok_or_else(|| CliError::Failed("the split has no scene with a human-object pair".into())),
    }
}

pub(crate) fn dispatch(command: Command, mut ctx: Context) -> Result<Manifest, CliError> {
    let mut timer = Timer::new();
    let mut m = Manifest::new(command.clone(), ctx.config.clone(), ctx.out.clone());
    m.base_dir = fs::canonicalize(&ctx.base_dir).unwrap_or_else(|_| ctx.base_dir.clone());
    let out_is_dir;
    match &command {
        Command::Synth(_) => {
            let out = require_out(&ctx, "synth")?;
            out_is_dir = false;
            let dataset = generate_synthetic(&ctx.config.synth)?;
            timer.lap("generate");
            ensure_parent(&out)?;
            dataset.save(&out)?;
            m.result_digest = InputFile::hash(&out)?.sha256;
            m.outputs.push(out.clone());
            println!(
                "{}: {} train / {} test scenes, {} HOI classes",
                out.display(),
                dataset.train.len(),
                dataset.test.len(),
                dataset.registry.num_classes()
            );
        }

        Command::Train(args) => {
            let out = require_out(&ctx, "train")?;
            out_is_dir = true;
            let resume = args.resume && !ctx.replay;
            if !resume && out.join(CHECKPOINT_FILE).exists() {
                return Err(CliError::Config(format!(
                    "{} already holds a run; pass --resume or pick another --out",
                    out.display()
                )));
            }
            let l = load(&mut ctx, &args.data, &mut m)?;
            let cfg = &ctx.config;
            let train = prepare_scenes(&l.dataset.train, &l.dataset.registry, &cfg.model, &l.providers)?;
            let test = inputs_of(l.dataset.scenes(split_of(&cfg.eval.split)), &ctx, &l.providers)?;
            timer.lap("prepare");

            fs::create_dir_all(&out).map_err(io)?;
            fs::write(out.join("config.toml"), cfg.to_toml()).map_err(io)?;
            let store = build_store(&cfg.model, &l.dataset.registry, &l.providers, cfg.train.seed)?;
            let hash = cfg.model.hash(&l.dataset.registry);
            let mut trainer =
                Trainer::new(cfg.model.clone(), cfg.train.clone(), store, hash)?.with_run_dir(RunDir::new(&out))?;
            if cfg.train.eval_every > 0 {
                let (model_cfg, registry) = (cfg.model.clone(), l.dataset.registry.clone());
                let splits = SplitRegistry::from_training(&registry, &l.dataset.train);
                let gts = ground_truths(l.dataset.scenes(split_of(&cfg.eval.split)));
                let test = &test;
                trainer = trainer.with_eval(Box::new(move |_, store| {
                    let preds = model::predict(store, &model_cfg, &registry, test)?;
                    let r = mgnm::evaluation::evaluate_hico(&preds, &gts, &registry, &splits, HicoSetting::Default);
                    Ok(json!({ "full": r.full, "rare": r.rare, "non_rare": r.non_rare }))
                }));
            }
            if resume {
                trainer.resume()?;
            }
            trainer.fit(&train)?;
            timer.lap("train");
            let final_loss = trainer.history.last().map(|h| h.loss);
            let store = trainer.store;

            let preds = model::predict(&store, &cfg.model, &l.dataset.registry, &test)?;
            let report = evaluate(&ctx, &l, &preds);
            timer.lap("eval");
            data::save_predictions(&out.join("predictions.jsonl"), &preds)?;
            let rj = report_json(&ctx, &l, &preds, &report);
            write_json(&out.join("report.json"), &rj)?;
            m.result_digest = digest_json(&rj);
            for f in [CHECKPOINT_FILE, "metrics.jsonl", "predictions.jsonl", "report.json", "config.toml"] {
                m.outputs.push(out.join(f));
            }
            if let Some(loss) = final_loss {
                println!("final loss {loss:.6}");
            }
            print!("{}", report.summary());
        }

        Command::Eval(args) => {
            out_is_dir = true;
            let l = load(&mut ctx, &args.data, &mut m)?;
            let preds = match (&args.predictions, &args.checkpoint) {
                (Some(p), _) => {
                    m.inputs.insert("predictions".into(), InputFile::hash(p)?);
                    data::load_predictions(p)?
                }
                (None, ck) => {
                    let store = load_store(&ctx, &l, ck.as_deref(), &mut m)?;
                    let inputs = inputs_of(l.dataset.scenes(split_of(&ctx.config.eval.split)), &ctx, &l.providers)?;
                    model::predict(&store, &ctx.config.model, &l.dataset.registry, &inputs)?
                }
            };
            timer.lap("predict");
            let report = evaluate(&ctx, &l, &preds);
            timer.lap("eval");
            let rj = report_json(&ctx, &l, &preds, &report);
            m.result_digest = digest_json(&rj);
            if let Some(out) = &ctx.out {
                fs::create_dir_all(out).map_err(io)?;
                write_json(&out.join("report.json"), &rj)?;
                m.outputs.push(out.join("report.json"));
            }
            print!("{}", report.summary());
        }

        Command::Infer(args) => {
            let out = require_out(&ctx, "infer")?;
            out_is_dir = false;
            let l = load(&mut ctx, &args.data, &mut m)?;
            let store = load_store(&ctx, &l, Some(&args.checkpoint), &mut m)?;
            let inputs = inputs_of(l.dataset.scenes(split_of(&ctx.config.eval.split)), &ctx, &l.providers)?;
            let preds = model::predict(&store, &ctx.config.model, &l.dataset.registry, &inputs)?;
            timer.lap("predict");
            ensure_parent(&out)?;
            data::save_predictions(&out, &preds)?;
            m.result_digest = InputFile::hash(&out)?.sha256;
            m.outputs.push(out.clone());
            println!("{} predictions for {} scenes -> {}", preds.len(), inputs.len(), out.display());
        }

        Command::Ablate(args) => {
            out_is_dir = true;
            let stages = args
                .stages
                .iter()
                .map(|s| s.trim().parse::<Stage>().map_err(CliError::Config))
                .collect::<Result<Vec<_>, _>>()?;
            let l = load(&mut ctx, &args.data, &mut m)?;
            let report = ablation_run(&ctx.config.model, &ctx.config.train, &l.dataset, &l.providers, &stages)?;
            timer.lap("ablate");
            let mut deterministic = report.clone();
            for r in &mut deterministic.rows {
                r.seconds = 0.0;
            }
            m.result_digest = digest_json(&deterministic);
            if let Some(out) = &ctx.out {
                fs::create_dir_all(out).map_err(io)?;
                write_json(&out.join("ablation.json"), &report)?;
                m.outputs.push(out.join("ablation.json"));
            }
            print!("{}", report.table());
        }

        Command::Plot(args) => {
            let out = require_out(&ctx, "plot")?;
            out_is_dir = true;
            if args.predictions.is_none() && args.checkpoint.is_none() {
                return Err(CliError::Config("plot needs --predictions or --checkpoint".into()));
            }
            let l = load(&mut ctx, &args.data, &mut m)?;
            fs::create_dir_all(&out).map_err(io)?;
            let inputs = inputs_of(l.dataset.scenes(split_of(&ctx.config.eval.split)), &ctx, &l.providers)?;
            let store = match &args.checkpoint {
                Some(ck) => Some(load_store(&ctx, &l, Some(ck), &mut m)?),
                None => None,
            };
            let preds = match (&args.predictions, &store) {
                (Some(p), _) => {
                    m.inputs.insert("predictions".into(), InputFile::hash(p)?);
                    data::load_predictions(p)?
                }
                (None, Some(store)) => model::predict(store, &ctx.config.model, &l.dataset.registry, &inputs)?,
                (None, None) => unreachable!("checked above"),
            };
            let reg = &l.dataset.registry;
            let gts = ground_truths(l.dataset.scenes(split_of(&ctx.config.eval.split)));
            let curves: Vec<(String, Vec<(f64, f64)>)> = hico_pr_curves(&preds, &gts, reg, HicoSetting::Default)
                .into_iter()
                .map(|(c, pts)| {
                    let (a, o) = reg.hoi_classes[c];
                    (format!("{} {}", reg.actions[a], reg.categories[o]), pts)
                })
                .collect();
            let svg = plot::pr_curves_svg("PR curves (Default setting)", &curves);
            let mut digest = hex_digest(svg.as_bytes());
            fs::write(out.join("pr_curves.svg"), svg).map_err(io)?;
            m.outputs.push(out.join("pr_curves.svg"));

            if let Some(store) = &store {
                let scene = scene_by_key(&inputs, args.scene.as_deref())?;
                if args.pair >= scene.num_pairs() {
                    return Err(CliError::Config(format!(
                        "pair {} out of range: scene {} has {} pairs",
                        args.pair,
                        scene.image_key,
                        scene.num_pairs()
                    )));
                }
                let mut t = Tape::new();
                let opts = ForwardOptions {
                    record_attention: true,
                    ..ForwardOptions::default()
                };
                let fwd = model::forward(&mut t, store, &ctx.config.model, scene, opts)?;
                let side = ctx.config.providers.backbone_side;
                for (li, layer) in fwd.attention.iter().enumerate() {
                    for (hi, att) in layer.iter().enumerate() {
                        let row = att.row(args.pair).to_owned();
                        let grid = if row.len() == side * side {
                            row.into_shape_with_order((side, side)).expect("square map")
                        } else {
                            Mat::from_shape_vec((1, row.len()), row.to_vec()).expect("row")
                        };
                        let name = format!("attention_l{li}_h{hi}.png");
                        let img = plot::heatmap(&grid, 32);
                        digest = hex_digest(format!("{digest}{}", hex_digest(img.as_raw())).as_bytes());
                        img.save(out.join(&name))
                            .map_err(|e| CliError::Failed(format!("writing {name}: {e}")))?;
                        m.outputs.push(out.join(name));
                    }
                }
                println!("attention maps of pair {} in scene {}", args.pair, scene.image_key);
            }
            timer.lap("plot");
            m.result_digest = digest;
            println!("{} files -> {}", m.outputs.len(), out.display());
        }

        Command::DumpGraph(args) => {
            let out = require_out(&ctx, "dump-graph")?;
            out_is_dir = false;
            let l = load(&mut ctx, &args.data, &mut m)?;
            let store = load_store(&ctx, &l, args.checkpoint.as_deref(), &mut m)?;
            let inputs = inputs_of(l.dataset.scenes(split_of(&ctx.config.eval.split)), &ctx, &l.providers)?;
            let scene = scene_by_key(&inputs, args.scene.as_deref())?;
            let mut t = Tape::new();
            let opts = ForwardOptions {
                record_graph: true,
                ..ForwardOptions::default()
            };
            let fwd = model::forward(&mut t, &store, &ctx.config.model, scene, opts)?;
            let rows = |x: &Mat| x.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
            let iterations: Vec<_> = fwd
                .graph_trace
                .iter()
                .map(|s| {
                    json!({
                        "iteration": s.iteration,
                        "nodes": rows(&s.nodes),
                        "pairs": rows(&s.pairs),
                        "adjacency": s.adjacency.as_ref().map(rows),
                    })
                })
                .collect();
            let body = json!({
                "image_key": scene.image_key,
                "pairs": scene.table.pairs,
                "detections": scene.dets.detections,
                "iterations": iterations,
            });
            ensure_parent(&out)?;
            write_json(&out, &body)?;
            m.result_digest = digest_json(&body);
            m.outputs.push(out.clone());
            println!("{} iterations of scene {} -> {}", iterations.len(), scene.image_key, out.display());
        }
    }
    m.timings = timer.finish();
    if let Some(out) = &ctx.out {
        let path = manifest_path(out, out_is_dir);
        ensure_parent(&path)?;
        m.save(&path)?;
    }
    Ok(m)
}

/// Re-runs a manifest's command with its recorded config and inputs and
/// checks that the result digest is unchanged.
pub(crate) fn replay(path: &Path, out: Option<PathBuf>, command: Option<&Command>) -> Result<Manifest, CliError> {
    let old = Manifest::load(path)?;
    if let Some(c) = command {
        if c.name() != old.command.name() {
            return Err(CliError::Config(format!(
                "manifest records `{}`, not `{}`",
                old.command.name(),
                c.name()
            )));
        }
    }
    for input in old.inputs.values() {
        input.verify()?;
    }
    let out = out.or_else(|| {
        old.out.as_ref().map(|o| {
            let mut name = o.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            name.push(".replay");
            o.with_file_name(name)
        })
    });
    if out.is_some() && out == old.out {
        return Err(CliError::Config("replay output must differ from the original run".into()));
    }
    let ctx = Context {
        config: old.config.clone(),
        out,
        base_dir: old.base_dir.clone(),
        replay: true,
    };
    let new = dispatch(old.command.clone(), ctx)?;
    if new.result_digest != old.result_digest {
        return Err(CliError::Failed(format!(
            "replay result {} differs from recorded {}",
            new.result_digest, old.result_digest
        )));
    }
    println!("replay matches {} ({})", path.display(), new.result_digest);
    Ok(new)
}
