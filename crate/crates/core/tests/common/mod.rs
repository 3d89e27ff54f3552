//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use mgnm::autograd::{Mat, Tape, Var};
use mgnm::data::{HoiAnnotation, SceneRecord};
use mgnm::decoder::{DecoderConfig, HoiPrediction};
use mgnm::geometry::{BBox, Detection};
use mgnm::model::{build_store, scene_inputs, ModelConfig, SceneInputs};
use mgnm::nn::ParameterStore;
use mgnm::providers::{ProviderConfig, ProviderSet};
use mgnm::registry::Registry;
use mgnm::training::{build_targets, PreparedScene};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

/// Norm-wise relative error `|a - n| / max(|a| + |n|, floor)`.
pub fn rel_err(analytic: &Mat, numeric: &Mat) -> f64 {
    let diff = (analytic - numeric).mapv(|x| x * x).sum().sqrt();
    let scale = analytic.mapv(|x| x * x).sum().sqrt() + numeric.mapv(|x| x * x).sum().sqrt();
    diff / scale.max(1e-12)
}

/// Central finite differences of `loss` with respect to every trainable
/// tensor it touches, compared with the tape gradient.
pub struct GradCheck {
    pub name: String,
    pub rel_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

pub fn finite_difference_report<F>(store: &ParameterStore, loss: F) -> Vec<GradCheck>
where
    F: for<'s> Fn(&mut Tape<'s>, &'s ParameterStore) -> Var,
{
    const H: f64 = 1e-6;
    let grads = {
        let mut t = Tape::new();
        let l = loss(&mut t, store);
        t.backward(l).into_params()
    };
    let value = |s: &ParameterStore| {
        let mut t = Tape::new();
        let l = loss(&mut t, s);
        t.value(l)[[0, 0]]
    };
    let mut work = store.clone();
    let mut out = Vec::new();
    for (name, analytic) in &grads {
        let base = store.value(name).unwrap().clone();
        let mut numeric = Mat::zeros(base.raw_dim());
        for idx in 0..base.len() {
            let (r, c) = (idx / base.ncols(), idx % base.ncols());
            let mut plus = base.clone();
            plus[[r, c]] += H;
            work.set_value(name, plus).unwrap();
            let fp = value(&work);
            let mut minus = base.clone();
            minus[[r, c]] -= H;
            work.set_value(name, minus).unwrap();
            let fm = value(&work);
            numeric[[r, c]] = (fp - fm) / (2.0 * H);
        }
        work.set_value(name, base).unwrap();
        out.push(GradCheck {
            name: name.clone(),
            rel_err: rel_err(analytic, &numeric),
            analytic_norm: analytic.mapv(|x| x * x).sum().sqrt(),
            numeric_norm: numeric.mapv(|x| x * x).sum().sqrt(),
        });
    }
    out
}

pub fn bbox(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

pub fn small_registry() -> Registry {
    Registry::new(
        vec!["person".into(), "cup".into(), "ball".into()],
        vec!["hold".into(), "kick".into(), "look".into()],
        vec![(0, 1), (1, 2), (2, 1), (2, 2), (0, 2)],
    )
    .unwrap()
}

/// Small model and matching stub providers of width `dim`.
pub fn small_model(dim: usize, seed: u64) -> (ModelConfig, ProviderSet) {
    let cfg = ModelConfig {
        node_dim: dim,
        visual_dim: dim,
        text_dim: dim,
        backbone_dim: dim,
        branches: 2,
        decoder: DecoderConfig {
            layers: 2,
            heads: 2,
            ff_mult: 2,
        },
        ..ModelConfig::default()
    };
    let providers = ProviderSet::stub(&ProviderConfig {
        seed,
        visual_dim: dim,
        text_dim: dim,
        backbone_dim: dim,
        node_dim: dim,
        backbone_side: 3,
        ..ProviderConfig::default()
    });
    (cfg, providers)
}

/// Two persons and two objects with annotations on two of the pairs.
pub fn two_by_two_record(key: &str) -> SceneRecord {
    let boxes = [
        (bbox(10.0, 10.0, 60.0, 140.0), 0),
        (bbox(120.0, 20.0, 170.0, 150.0), 0),
        (bbox(40.0, 80.0, 90.0, 120.0), 1),
        (bbox(150.0, 100.0, 200.0, 130.0), 2),
    ];
    let detections: Vec<Detection> = boxes
        .iter()
        .enumerate()
        .map(|(id, &(bbox, category))| Detection {
            id,
            bbox,
            category,
            score: 0.6 + 0.1 * id as f64,
        })
        .collect();
    let annotations = vec![
        HoiAnnotation {
            human_box: boxes[0].0,
            object_box: Some(boxes[2].0),
            object_category: 1,
            action: 0,
        },
        HoiAnnotation {
            human_box: boxes[1].0,
            object_box: Some(boxes[3].0),
            object_category: 2,
            action: 1,
        },
    ];
    SceneRecord {
        image_key: key.into(),
        width: 240.0,
        height: 180.0,
        appearance_keys: SceneRecord::default_appearance_keys(key, detections.len()),
        detections,
        annotations,
        feature_key: None,
    }
}

pub struct Fixture {
    pub registry: Registry,
    pub cfg: ModelConfig,
    pub providers: ProviderSet,
    pub store: ParameterStore,
    pub scene: PreparedScene,
}

pub fn two_by_two_fixture(dim: usize, seed: u64) -> Fixture {
    let registry = small_registry();
    let (cfg, providers) = small_model(dim, seed);
    let store = build_store(&cfg, &registry, &providers, seed).unwrap();
    let record = two_by_two_record("fixture-0");
    let inputs: SceneInputs = scene_inputs(&record, &cfg, &providers).unwrap().unwrap();
    let targets = build_targets(&inputs.table, &inputs.dets, &record.annotations, registry.num_actions(), 0.5).unwrap();
    Fixture {
        registry,
        cfg,
        providers,
        store,
        scene: PreparedScene { inputs, targets },
    }
}

/// AP by direct integration of the interpolated precision over recall:
/// the area is the sum over recall intervals `(r_{j-1}, r_j]` of the best
/// precision reached at any recall `>= r_j`.
pub fn brute_force_ap(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut points = Vec::new();
    let mut tp = 0.0;
    for (k, &f) in flags.iter().enumerate() {
        if f {
            tp += 1.0;
        }
        points.push((tp / num_gt as f64, tp / (k as f64 + 1.0)));
    }
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    recalls.dedup();
    let mut area = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let best = points
            .iter()
            .filter(|p| p.0 >= r)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        area += (r - prev) * best;
        prev = r;
    }
    Some(area)
}

fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let h = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = w * h;
    inter / (a.area() + b.area() - inter)
}

/// Greedy matching replayed from scratch: predictions in score order, each
/// taking the eligible unmatched gt of best overlap, ties to lower index.
/// Objects are required.
pub fn reference_match(preds: &[HoiPrediction], gts: &[(BBox, BBox)], thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap().then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![false; preds.len()];
    for i in order {
        let p = &preds[i];
        let o = p.object_box.unwrap();
        let mut cands: Vec<(f64, usize)> = gts
            .iter()
            .enumerate()
            .filter(|(j, _)| !taken[*j])
            .filter_map(|(j, (gh, go))| {
                let m = iou_ref(&p.human_box, gh).min(iou_ref(&o, go));
                let ok = iou_ref(&p.human_box, gh) > thresh && iou_ref(&o, go) > thresh;
                ok.then_some((m, j))
            })
            .collect();
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        if let Some(&(_, j)) = cands.first() {
            taken[j] = true;
            flags[i] = true;
        }
    }
    flags
}

/// Maximum number of matched ground truths over every injective
/// assignment of predictions to eligible ground truths.
pub fn max_assignment(preds: &[HoiPrediction], gts: &[(BBox, BBox)], thresh: f64) -> usize {
    fn go(i: usize, elig: &[Vec<usize>], used: &mut Vec<bool>) -> usize {
        if i == elig.len() {
            return 0;
        }
        let mut best = go(i + 1, elig, used);
        for &j in &elig[i] {
            if !used[j] {
                used[j] = true;
                best = best.max(1 + go(i + 1, elig, used));
                used[j] = false;
            }
        }
        best
    }
    let elig: Vec<Vec<usize>> = preds
        .iter()
        .map(|p| {
            (0..gts.len())
                .filter(|&j| {
                    iou_ref(&p.human_box, &gts[j].0) > thresh && iou_ref(&p.object_box.unwrap(), &gts[j].1) > thresh
                })
                .collect()
        })
        .collect();
    go(0, &elig, &mut vec![false; gts.len()])
}

pub fn prediction(image: &str, h: BBox, o: Option<BBox>, category: usize, action: usize, score: f64) -> HoiPrediction {
    HoiPrediction {
        image_key: image.into(),
        human_box: h,
        object_box: o,
        object_category: category,
        action,
        score,
        logit: 0.0,
        human_score: 1.0,
        object_score: 1.0,
        action_prob: score,
    }
}

/// Direct focal loss for one logit, straight from the definition.
pub fn focal_reference(z: f64, target: f64, alpha: f64, gamma: f64) -> f64 {
    let p = 1.0 / (1.0 + (-z).exp());
    let (pt, at) = if target > 0.5 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}
