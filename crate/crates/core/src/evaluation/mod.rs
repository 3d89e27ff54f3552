//! HOI detection metrics: greedy matching, precision-envelope AP, the
//! HICO-DET Default / Known-Object settings with Full / Rare / Non-rare
//! subsets, and V-COCO role AP under both scenarios.

mod ablation;

pub use ablation::{ablation_run, train_and_evaluate, AblationReport, AblationRow, RunResult};

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{HoiAnnotation, SceneRecord};
use crate::decoder::HoiPrediction;
use crate::geometry::{iou, BBox};
use crate::par;
use crate::registry::Registry;

pub const MATCH_IOU: f64 = 0.5;
/// A class is rare when it has fewer training instances than this.
pub const RARE_THRESHOLD: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiGroundTruth {
    pub image_key: String,
    pub human_box: BBox,
    #[serde(with = "crate::decoder::optional_box")]
    pub object_box: Option<BBox>,
    pub object_category: usize,
    pub action: usize,
}

pub fn ground_truths(scenes: &[SceneRecord]) -> Vec<HoiGroundTruth> {
    scenes
        .iter()
        .flat_map(|s| {
            s.annotations.iter().map(move |a: &HoiAnnotation| HoiGroundTruth {
                image_key: s.image_key.clone(),
                human_box: a.human_box,
                object_box: a.object_box,
                object_category: a.object_category,
                action: a.action,
            })
        })
        .collect()
}

/// How object boxes are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectRule {
    /// Both boxes must be present and overlap.
    Required,
    /// V-COCO scenario 1: a ground truth without an object box needs a
    /// prediction carrying the empty sentinel.
    Scenario1,
    /// V-COCO scenario 2: a ground truth without an object box ignores the
    /// predicted object entirely.
    Scenario2,
}

/// Pair overlap of a prediction with a ground truth when both boxes clear
/// the threshold; the overlap used for tie-breaking is the smaller IoU.
pub fn pair_overlap(pred: &HoiPrediction, gt: &HoiGroundTruth, thresh: f64, rule: ObjectRule) -> Option<f64> {
    let ih = iou(&pred.human_box, &gt.human_box);
    if ih <= thresh {
        return None;
    }
    match (gt.object_box, pred.object_box, rule) {
        (Some(g), Some(p), _) => {
            let io = iou(&p, &g);
            (io > thresh).then_some(ih.min(io))
        }
        (Some(_), None, _) => None,
        (None, _, ObjectRule::Required) => None,
        (None, None, _) => Some(ih),
        (None, Some(_), ObjectRule::Scenario1) => None,
        (None, Some(_), ObjectRule::Scenario2) => Some(ih),
    }
}

/// True-positive flags for predictions of one (image, class), given in
/// descending score order. Each prediction takes the unmatched ground truth
/// with the highest pair overlap (lowest index on ties).
pub fn match_predictions(preds: &[&HoiPrediction], gts: &[&HoiGroundTruth], thresh: f64, rule: ObjectRule) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] {
                    continue;
                }
                if let Some(ov) = pair_overlap(p, g, thresh, rule) {
                    if best.map_or(true, |(_, b)| ov > b) {
                        best = Some((j, ov));
                    }
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the precision-envelope PR curve of `flags` (descending score
/// order). `None` when there is no ground truth.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let curve = pr_curve(flags, num_gt);
    let mut envelope: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let step = 1.0 / num_gt as f64;
    Some(
        flags
            .iter()
            .zip(&envelope)
            .filter(|(tp, _)| **tp)
            .map(|(_, p)| step * p)
            .sum(),
    )
}

/// `(recall, precision)` after each prediction.
pub fn pr_curve(flags: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            tp += f as usize;
            let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
            (recall, tp as f64 / (k + 1) as f64)
        })
        .collect()
}

/// Rare / non-rare assignment of the HOI classes by training count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRegistry {
    pub classes: Vec<(usize, usize)>,
    pub train_counts: Vec<usize>,
}

impl SplitRegistry {
    pub fn from_counts(registry: &Registry, train_counts: Vec<usize>) -> Self {
        assert_eq!(train_counts.len(), registry.num_classes(), "one count per class");
        Self {
            classes: registry.hoi_classes.clone(),
            train_counts,
        }
    }

    pub fn from_training(registry: &Registry, train: &[SceneRecord]) -> Self {
        let mut counts = vec![0; registry.num_classes()];
        for a in train.iter().flat_map(|s| &s.annotations) {
            if let Some(c) = registry.class_of(a.action, a.object_category) {
                counts[c] += 1;
            }
        }
        Self::from_counts(registry, counts)
    }

    pub fn is_rare(&self, class: usize) -> bool {
        self.train_counts[class] < RARE_THRESHOLD
    }

    pub fn rare_classes(&self) -> Vec<usize> {
        (0..self.classes.len()).filter(|&c| self.is_rare(c)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HicoSetting {
    Default,
    KnownObject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub action: usize,
    pub object_category: usize,
    pub rare: bool,
    pub num_gt: usize,
    pub num_preds: usize,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HicoReport {
    pub setting: HicoSetting,
    /// Means over classes with at least one test instance; `None` when the
    /// subset has no such class.
    pub full: Option<f64>,
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
    pub classes: Vec<ClassMetrics>,
}

/// Flags in global score order plus the ground-truth count, per class.
pub(crate) struct ClassFlags {
    pub flags: Vec<bool>,
    pub num_gt: usize,
}

/// Sorts prediction indices by descending score; ties keep input order.
fn score_order(preds: &[HoiPrediction], idx: &mut [usize]) {
    idx.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
}

/// Shared per-class matching: `class_of` maps a prediction / ground truth
/// to its class, `admit` decides whether an image takes part for a class.
fn class_flags<FP, FG>(
    preds: &[HoiPrediction],
    gts: &[HoiGroundTruth],
    num_classes: usize,
    class_of_pred: FP,
    class_of_gt: FG,
    admit: &(dyn Fn(usize, &str) -> bool + Sync),
    rule: ObjectRule,
) -> Vec<ClassFlags>
where
    FP: Fn(&HoiPrediction) -> Option<usize>,
    FG: Fn(&HoiGroundTruth) -> Option<usize>,
{
    let mut pred_by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, p) in preds.iter().enumerate() {
        if let Some(c) = class_of_pred(p) {
            pred_by_class[c].push(i);
        }
    }
    let mut gt_by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (j, g) in gts.iter().enumerate() {
        if let Some(c) = class_of_gt(g) {
            gt_by_class[c].push(j);
        }
    }
    let classes: Vec<usize> = (0..num_classes).collect();
    par::par_map(&classes, |&c| {
        let mut idx: Vec<usize> = pred_by_class[c]
            .iter()
            .copied()
            .filter(|&i| admit(c, &preds[i].image_key))
            .collect();
        score_order(preds, &mut idx);
        let mut gts_of_image: HashMap<&str, Vec<&HoiGroundTruth>> = HashMap::new();
        for &j in &gt_by_class[c] {
            gts_of_image.entry(gts[j].image_key.as_str()).or_default().push(&gts[j]);
        }
        let mut preds_of_image: HashMap<&str, Vec<usize>> = HashMap::new();
        for (rank, &i) in idx.iter().enumerate() {
            preds_of_image.entry(preds[i].image_key.as_str()).or_default().push(rank);
        }
        let mut flags = vec![false; idx.len()];
        for (image, ranks) in &preds_of_image {
            let Some(g) = gts_of_image.get(image) else {
                continue;
            };
            let p: Vec<&HoiPrediction> = ranks.iter().map(|&r| &preds[idx[r]]).collect();
            for (r, f) in ranks.iter().zip(match_predictions(&p, g, MATCH_IOU, rule)) {
                flags[*r] = f;
            }
        }
        ClassFlags {
            flags,
            num_gt: gt_by_class[c].len(),
        }
    })
}

fn hico_flags(
    preds: &[HoiPrediction],
    gts: &[HoiGroundTruth],
    registry: &Registry,
    setting: HicoSetting,
) -> Vec<ClassFlags> {
    // object categories present in each image's ground truth
    let mut present: HashSet<(&str, usize)> = HashSet::new();
    for g in gts {
        present.insert((g.image_key.as_str(), g.object_category));
    }
    let admit = |c: usize, image: &str| match setting {
        HicoSetting::Default => true,
        HicoSetting::KnownObject => present.contains(&(image, registry.hoi_classes[c].1)),
    };
    class_flags(
        preds,
        gts,
        registry.num_classes(),
        |p| registry.class_of(p.action, p.object_category),
        |g| registry.class_of(g.action, g.object_category),
        &admit,
        ObjectRule::Required,
    )
}

pub fn evaluate_hico(
    preds: &[HoiPrediction],
    gts: &[HoiGroundTruth],
    registry: &Registry,
    splits: &SplitRegistry,
    setting: HicoSetting,
) -> HicoReport {
    let flags = hico_flags(preds, gts, registry, setting);
    let classes: Vec<ClassMetrics> = flags
        .iter()
        .enumerate()
        .map(|(c, f)| {
            let (action, object_category) = registry.hoi_classes[c];
            ClassMetrics {
                class: c,
                action,
                object_category,
                rare: splits.is_rare(c),
                num_gt: f.num_gt,
                num_preds: f.flags.len(),
                ap: average_precision(&f.flags, f.num_gt),
            }
        })
        .collect();
    let mean = |keep: &dyn Fn(&ClassMetrics) -> bool| {
        let aps: Vec<f64> = classes.iter().filter(|m| keep(m)).filter_map(|m| m.ap).collect();
        (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
    };
    HicoReport {
        setting,
        full: mean(&|_| true),
        rare: mean(&|m| m.rare),
        non_rare: mean(&|m| !m.rare),
        classes,
    }
}

/// PR curve of every evaluable class under a HICO setting.
pub fn hico_pr_curves(
    preds: &[HoiPrediction],
    gts: &[HoiGroundTruth],
    registry: &Registry,
    setting: HicoSetting,
) -> Vec<(usize, Vec<(f64, f64)>)> {
    hico_flags(preds, gts, registry, setting)
        .into_iter()
        .enumerate()
        .filter(|(_, f)| f.num_gt > 0)
        .map(|(c, f)| (c, pr_curve(&f.flags, f.num_gt)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VcocoScenario {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcocoReport {
    pub scenario: VcocoScenario,
    /// Role AP per action; `None` for actions without ground truth.
    pub per_action: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// Role AP with one role per action: predictions and ground truths are
/// grouped by action alone.
pub fn evaluate_vcoco(
    preds: &[HoiPrediction],
    gts: &[HoiGroundTruth],
    num_actions: usize,
    scenario: VcocoScenario,
) -> VcocoReport {
    let rule = match scenario {
        VcocoScenario::One => ObjectRule::Scenario1,
        VcocoScenario::Two => ObjectRule::Scenario2,
    };
    let flags = class_flags(
        preds,
        gts,
        num_actions,
        |p| (p.action < num_actions).then_some(p.action),
        |g| (g.action < num_actions).then_some(g.action),
        &|_, _| true,
        rule,
    );
    let per_action: Vec<Option<f64>> = flags.iter().map(|f| average_precision(&f.flags, f.num_gt)).collect();
    let aps: Vec<f64> = per_action.iter().flatten().copied().collect();
    VcocoReport {
        scenario,
        mean: (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64),
        per_action,
    }
}

/// Both HICO settings plus both V-COCO scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub default: HicoReport,
    pub known_object: HicoReport,
    pub vcoco_s1: VcocoReport,
    pub vcoco_s2: VcocoReport,
}

pub fn evaluate_all(
    preds: &[HoiPrediction],
    gts: &[HoiGroundTruth],
    registry: &Registry,
    splits: &SplitRegistry,
) -> EvalReport {
    EvalReport {
        default: evaluate_hico(preds, gts, registry, splits, HicoSetting::Default),
        known_object: evaluate_hico(preds, gts, registry, splits, HicoSetting::KnownObject),
        vcoco_s1: evaluate_vcoco(preds, gts, registry.num_actions(), VcocoScenario::One),
        vcoco_s2: evaluate_vcoco(preds, gts, registry.num_actions(), VcocoScenario::Two),
    }
}

pub fn fmt_metric(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

impl EvalReport {
    /// Plain-text summary, one setting per line.
    pub fn summary(&self) -> String {
        let hico = |r: &HicoReport, name: &str| {
            format!(
                "{name:<13} full {}  rare {}  non-rare {}\n",
                fmt_metric(r.full),
                fmt_metric(r.rare),
                fmt_metric(r.non_rare)
            )
        };
        let mut s = hico(&self.default, "default");
        s += &hico(&self.known_object, "known-object");
        s += &format!("vcoco s1      role mAP {}\n", fmt_metric(self.vcoco_s1.mean));
        s += &format!("vcoco s2      role mAP {}\n", fmt_metric(self.vcoco_s2.mean));
        s
    }
}
