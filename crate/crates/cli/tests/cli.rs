use std::path::Path;
use std::process::{Command, Output};

use mgnm::data::{self, Dataset};
use mgnm::decoder::HoiPrediction;

fn mgnm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgnm"))
        .args(args)
        .env_remove("MGNM_SEED")
        .env_remove("MGNM_OUT_DIR")
        .output()
        .expect("spawn mgnm")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 12] = [
    "--set",
    "model.node_dim=8",
    "--set",
    "model.visual_dim=8",
    "--set",
    "model.text_dim=8",
    "--set",
    "model.backbone_dim=8",
    "--set",
    "model.branches=2",
    "--set",
    "train.epochs=2",
];

fn synth(path: &Path, seed: &str) {
    ok(&mgnm(&[
        "synth",
        "--task",
        "spatial-rule",
        "--scenes",
        "12",
        "--test-scenes",
        "4",
        "--seed",
        seed,
        "-o",
        s(path),
    ]));
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"), dir.path().join("c.jsonl"));
    synth(&a, "5");
    synth(&b, "5");
    synth(&c, "6");
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_ne!(bytes, std::fs::read(&c).unwrap());
    let d = Dataset::load(&a).unwrap();
    assert_eq!((d.train.len(), d.test.len()), (12, 4));
    assert!(a.with_extension("jsonl.manifest.json").exists());
}

#[test]
fn perfect_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("d.jsonl");
    synth(&data_path, "1");
    let d = Dataset::load(&data_path).unwrap();
    let preds: Vec<HoiPrediction> = d
        .test
        .iter()
        .flat_map(|scene| {
            scene.annotations.iter().map(|a| HoiPrediction {
                image_key: scene.image_key.clone(),
                human_box: a.human_box,
                object_box: a.object_box,
                object_category: a.object_category,
                action: a.action,
                score: 1.0,
                logit: 10.0,
                human_score: 1.0,
                object_score: 1.0,
                action_prob: 1.0,
            })
        })
        .collect();
    let pred_path = dir.path().join("p.jsonl");
    data::save_predictions(&pred_path, &preds).unwrap();
    let out = ok(&mgnm(&["eval", "--data", s(&data_path), "--predictions", s(&pred_path)]));
    let default = out.lines().find(|l| l.starts_with("default")).expect(&out);
    assert!(default.contains("full 1.0000"), "{out}");
}

#[test]
fn train_infer_plot_dump_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("d.jsonl");
    synth(&data_path, "2");
    let run = dir.path().join("run");
    let mut args = vec!["train", "--data", s(&data_path), "-o", s(&run)];
    args.extend(TINY);
    ok(&mgnm(&args));
    for f in ["checkpoint.bin", "metrics.jsonl", "predictions.jsonl", "report.json", "config.toml", "manifest.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    // an existing run is not overwritten without --resume (a usage error)
    let again = mgnm(&args);
    assert_eq!(again.status.code(), Some(2));

    // the run's config.toml supplies the model dimensions
    let ck = run.join("checkpoint.bin");
    let preds = dir.path().join("preds.jsonl");
    ok(&mgnm(&["infer", "--data", s(&data_path), "--checkpoint", s(&ck), "-o", s(&preds)]));
    assert_eq!(data::load_predictions(&preds).unwrap(), data::load_predictions(&run.join("predictions.jsonl")).unwrap());

    let plots = dir.path().join("plots");
    ok(&mgnm(&["plot", "--data", s(&data_path), "--checkpoint", s(&ck), "-o", s(&plots)]));
    assert!(plots.join("pr_curves.svg").exists());
    assert!(std::fs::read_dir(&plots)
        .unwrap()
        .any(|e| e.unwrap().file_name().to_string_lossy().ends_with(".png")));

    let graph = dir.path().join("graph.json");
    ok(&mgnm(&["dump-graph", "--data", s(&data_path), "--checkpoint", s(&ck), "-o", s(&graph)]));
    let g: serde_json::Value = serde_json::from_slice(&std::fs::read(&graph).unwrap()).unwrap();
    assert!(g.to_string().contains("adjacency"));

    let out = ok(&mgnm(&["--replay", s(&run.join("manifest.json"))]));
    assert!(out.contains("replay matches"), "{out}");
    assert_eq!(
        std::fs::read(run.join("report.json")).unwrap(),
        std::fs::read(dir.path().join("run.replay").join("report.json")).unwrap()
    );
}

#[test]
fn config_errors_exit_two() {
    let bad_key = mgnm(&["synth", "--set", "model.no_such_key=1", "-o", "/dev/null"]);
    assert_eq!(bad_key.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[train]\nlr = \"fast\"\n").unwrap();
    let bad_type = mgnm(&["--config", s(&cfg), "synth", "-o", s(&dir.path().join("x.jsonl"))]);
    assert_eq!(bad_type.status.code(), Some(2));
    let missing = mgnm(&["eval", "--data", s(&dir.path().join("absent.jsonl"))]);
    assert_eq!(missing.status.code(), Some(1));
}
