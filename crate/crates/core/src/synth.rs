//! Seeded synthetic HOI scenes whose labels follow a fixed rule, so that
//! each graph stage has a task on which it is the informative one.
//!
//! Scenes hold 1-3 persons and 1-4 objects. Only person-to-object pairs
//! with a non-person object are annotated; pairs between two persons are
//! negatives for every action. Rules, by task:
//!
//! * spatial: `POS` iff `iou(h, o) > 0.3` and the human center lies above
//!   the object center (smaller y), else `NEG`.
//! * visual: `POS` iff coordinate 0 of the image's stub visual embedding is
//!   positive, else `NEG`, for every pair of the scene.
//! * category: `POS` iff the scene holds a non-person object with an even
//!   category id, else `NEG`, for every pair of the scene. A pair's own
//!   object category does not decide its label; the other objects of the
//!   scene do.
//! * mixed: all three rules at once on actions `0..6`.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, HoiAnnotation, SceneRecord, Split};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Detection, PERSON};
use crate::hashing::keyed_rng;
use crate::par;
use crate::providers::{EmbeddingSource, ProviderKind, StubProvider};
use crate::registry::Registry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SpatialRule,
    VisualRule,
    CategoryRule,
    Mixed,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::SpatialRule,
        TaskKind::VisualRule,
        TaskKind::CategoryRule,
        TaskKind::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SpatialRule => "spatial-rule",
            TaskKind::VisualRule => "visual-rule",
            TaskKind::CategoryRule => "category-rule",
            TaskKind::Mixed => "mixed",
        }
    }

    /// Actions the rule needs.
    pub fn required_actions(self) -> usize {
        match self {
            TaskKind::Mixed => 6,
            _ => 2,
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown task `{s}`"))
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const SPATIAL_IOU: f64 = 0.3;
/// Coordinate of the visual embedding that decides the visual rule.
pub const VISUAL_COORD: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthTaskSpec {
    pub task: TaskKind,
    /// Categories including `person`.
    pub num_categories: usize,
    pub num_actions: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Object categories are drawn with weight `rank^-exponent`; 0 is
    /// uniform.
    pub long_tail_exponent: f64,
    pub seed: u64,
    /// Width of the stub visual embedding the visual rule reads.
    pub visual_dim: usize,
    /// Half-width of the uniform detector box jitter, relative to box size.
    pub jitter: f64,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::SpatialRule,
            num_categories: 5,
            num_actions: 2,
            train_scenes: 256,
            test_scenes: 64,
            long_tail_exponent: 0.0,
            seed: 0,
            visual_dim: 64,
            jitter: 0.005,
        }
    }
}

impl SynthTaskSpec {
    pub fn new(task: TaskKind, seed: u64) -> Self {
        Self {
            task,
            num_actions: task.required_actions(),
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.train_scenes + self.test_scenes == 0 {
            return bad("at least one scene is required".into());
        }
        if !(self.long_tail_exponent >= 0.0) {
            return bad("long-tail exponent must be non-negative".into());
        }
        if self.num_categories < 2 {
            return bad("need `person` and at least one object category".into());
        }
        if self.num_actions < self.task.required_actions() {
            return bad(format!(
                "task {} needs {} actions, got {}",
                self.task,
                self.task.required_actions(),
                self.num_actions
            ));
        }
        if self.visual_dim <= VISUAL_COORD {
            return bad("visual embedding too narrow".into());
        }
        if !(0.0..0.2).contains(&self.jitter) {
            return bad("jitter must lie in [0, 0.2)".into());
        }
        Ok(())
    }

    /// Category draw weights for ids `1..num_categories`.
    pub fn category_weights(&self) -> Vec<f64> {
        (1..self.num_categories)
            .map(|rank| (rank as f64).powf(-self.long_tail_exponent))
            .collect()
    }

    /// Registry over non-person object categories. An object of even
    /// category makes its scene even, so `(odd_scene, even category)` can
    /// never occur and is not registered.
    pub fn registry(&self) -> Registry {
        let categories: Vec<String> = (0..self.num_categories).map(category_name).collect();
        let actions: Vec<String> = (0..self.num_actions).map(action_name).collect();
        let odd_scene = match self.task {
            TaskKind::CategoryRule => Some(1),
            TaskKind::Mixed => Some(5),
            TaskKind::SpatialRule | TaskKind::VisualRule => None,
        };
        let classes = (0..self.num_actions)
            .flat_map(|a| (1..self.num_categories).map(move |c| (a, c)))
            .filter(|&(a, c)| !(Some(a) == odd_scene && c % 2 == 0))
            .collect();
        Registry::new(categories, actions, classes).expect("synthetic registry is well formed")
    }
}

const CATEGORY_NAMES: [&str; 16] = [
    "person",
    "cup",
    "bicycle",
    "book",
    "chair",
    "kite",
    "dog",
    "umbrella",
    "laptop",
    "bottle",
    "horse",
    "skateboard",
    "bench",
    "frisbee",
    "surfboard",
    "apple",
];

fn category_name(id: usize) -> String {
    match CATEGORY_NAMES.get(id) {
        Some(n) => n.to_string(),
        None => format!("object_{id}"),
    }
}

fn action_name(id: usize) -> String {
    const NAMES: [&str; 6] = [
        "near_above",
        "elsewhere",
        "bright_scene",
        "dark_scene",
        "even_scene",
        "odd_scene",
    ];
    NAMES.get(id).map_or_else(|| format!("action_{id}"), |n| n.to_string())
}

/// Generates the train and test splits. Each scene draws from its own
/// keyed generator, so scenes are independent of thread scheduling.
pub fn generate_synthetic(spec: &SynthTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let registry = spec.registry();
    let visual = StubProvider::new(ProviderKind::VisualImage, spec.visual_dim, spec.seed);
    let weights = WeightedIndex::new(spec.category_weights()).map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let make = |split: Split, n: usize| -> Result<Vec<SceneRecord>> {
        let idx: Vec<usize> = (0..n).collect();
        par::par_map(&idx, |&i| generate_scene(spec, &visual, &weights, split, i))
            .into_iter()
            .collect()
    };
    Ok(Dataset {
        registry,
        provider_seed: spec.seed,
        source: spec.task.name().to_string(),
        train: make(Split::Train, spec.train_scenes)?,
        test: make(Split::Test, spec.test_scenes)?,
    })
}

/// Shared appearance keys of synthetic detections. Synthetic appearance
/// carries no label signal, so every person and every object share one
/// embedding each.
pub const PERSON_APPEARANCE: &str = "synthetic:person";
pub const OBJECT_APPEARANCE: &str = "synthetic:object";
/// Image-level feature key of scenes whose label ignores the image
/// embedding. Per-image noise features would only let the model memorise
/// training scenes.
pub const SHARED_IMAGE: &str = "synthetic:image";

const PLACEMENT_TRIES: usize = 50;
const IOU_MARGIN: f64 = 0.1;
const OFFSET_MARGIN: f64 = 0.05;

pub fn scene_key(split: Split, index: usize) -> String {
    match split {
        Split::Train => format!("train-{index:05}"),
        Split::Test => format!("test-{index:05}"),
    }
}

fn generate_scene(
    spec: &SynthTaskSpec,
    visual: &StubProvider,
    weights: &WeightedIndex<f64>,
    split: Split,
    index: usize,
) -> Result<SceneRecord> {
    let key = scene_key(split, index);
    let mut rng = keyed_rng(spec.seed, "synth", &key);
    let width = rng.gen_range(320.0..640.0f64).round();
    let height = rng.gen_range(240.0..480.0f64).round();

    let num_persons = rng.gen_range(1..=3);
    let num_objects = rng.gen_range(1..=4);
    let mut persons = Vec::with_capacity(num_persons);
    for _ in 0..num_persons {
        let w = width * rng.gen_range(0.12..0.3);
        let h = height * rng.gen_range(0.3..0.65);
        persons.push(place(&mut rng, w, h, width, height));
    }
    let mut objects = Vec::with_capacity(num_objects);
    for _ in 0..num_objects {
        let category = weights.sample(&mut rng) + 1;
        let near = rng.gen_bool(0.7);
        let mut b = propose_object(&mut rng, &persons, near, width, height);
        for _ in 1..PLACEMENT_TRIES {
            if clear_of_boundary(&persons, &b, height) {
                break;
            }
            b = propose_object(&mut rng, &persons, near, width, height);
        }
        objects.push((b, category));
    }

    let mut detections = Vec::with_capacity(num_persons + num_objects);
    let boxes = persons
        .iter()
        .map(|&b| (b, PERSON))
        .chain(objects.iter().copied());
    for (id, (b, category)) in boxes.enumerate() {
        detections.push(Detection {
            id,
            bbox: jitter(&mut rng, &b, spec.jitter, width, height),
            category,
            score: rng.gen_range(0.5..=1.0),
        });
    }

    let v = visual.lookup(&key)?;
    let visual_pos = v[VISUAL_COORD] > 0.0;
    let even_scene = objects.iter().any(|&(_, c)| c % 2 == 0);
    let mut annotations = Vec::new();
    for h in &persons {
        for &(o, category) in &objects {
            let spatial_pos = spatial_rule(h, &o);
            let actions: Vec<usize> = match spec.task {
                TaskKind::SpatialRule => vec![pick(spatial_pos, 0)],
                TaskKind::VisualRule => vec![pick(visual_pos, 0)],
                TaskKind::CategoryRule => vec![pick(even_scene, 0)],
                TaskKind::Mixed => vec![pick(spatial_pos, 0), pick(visual_pos, 2), pick(even_scene, 4)],
            };
            for action in actions {
                annotations.push(HoiAnnotation {
                    human_box: *h,
                    object_box: Some(o),
                    object_category: category,
                    action,
                });
            }
        }
    }
    let appearance_keys = detections
        .iter()
        .map(|d| if d.is_person() { PERSON_APPEARANCE } else { OBJECT_APPEARANCE }.to_string())
        .collect();
    Ok(SceneRecord {
        image_key: key,
        width,
        height,
        detections,
        appearance_keys,
        annotations,
        feature_key: match spec.task {
            TaskKind::SpatialRule | TaskKind::CategoryRule => Some(SHARED_IMAGE.to_string()),
            TaskKind::VisualRule | TaskKind::Mixed => None,
        },
    })
}

fn propose_object(rng: &mut ChaCha8Rng, persons: &[BBox], near: bool, width: f64, height: f64) -> BBox {
    if near {
        // near a person so that the spatial rule has positives
        let anchor = persons[rng.gen_range(0..persons.len())];
        let w = anchor.width() * rng.gen_range(0.5..1.2);
        let h = anchor.height() * rng.gen_range(0.4..1.0);
        let (cx, cy) = anchor.center();
        let cx = cx + anchor.width() * rng.gen_range(-0.4..0.4);
        let cy = cy + anchor.height() * rng.gen_range(-0.4..0.4);
        clamp_box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0, width, height)
    } else {
        let w = width * rng.gen_range(0.05..0.3);
        let h = height * rng.gen_range(0.05..0.3);
        place(rng, w, h, width, height)
    }
}

/// True when the spatial label of `o` against every person survives
/// detector jitter: the overlap stays out of the band around the IoU
/// threshold and overlapping pairs are clearly offset vertically.
fn clear_of_boundary(persons: &[BBox], o: &BBox, height: f64) -> bool {
    persons.iter().all(|h| {
        let v = iou(h, o);
        if (SPATIAL_IOU - IOU_MARGIN..=SPATIAL_IOU + IOU_MARGIN).contains(&v) {
            return false;
        }
        v < SPATIAL_IOU || (h.center().1 - o.center().1).abs() > OFFSET_MARGIN * height
    })
}

pub fn spatial_rule(h: &BBox, o: &BBox) -> bool {
    iou(h, o) > SPATIAL_IOU && h.center().1 < o.center().1
}

fn pick(positive: bool, base: usize) -> usize {
    if positive {
        base
    } else {
        base + 1
    }
}

fn place(rng: &mut ChaCha8Rng, w: f64, h: f64, width: f64, height: f64) -> BBox {
    let x1 = rng.gen_range(0.0..(width - w).max(1.0));
    let y1 = rng.gen_range(0.0..(height - h).max(1.0));
    clamp_box(x1, y1, x1 + w, y1 + h, width, height)
}

fn clamp_box(x1: f64, y1: f64, x2: f64, y2: f64, width: f64, height: f64) -> BBox {
    let r = |x: f64| (x * 100.0).round() / 100.0;
    let x1 = r(x1.clamp(0.0, width - 2.0));
    let y1 = r(y1.clamp(0.0, height - 2.0));
    let x2 = r(x2.clamp(x1 + 1.0, width));
    let y2 = r(y2.clamp(y1 + 1.0, height));
    BBox::new(x1, y1, x2, y2).expect("clamped box is valid")
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox, amount: f64, width: f64, height: f64) -> BBox {
    if amount == 0.0 {
        return *b;
    }
    let dw = b.width() * amount;
    let dh = b.height() * amount;
    let mut j = |d: f64| rng.gen_range(-1.0..=1.0) * d;
    let (x1, y1) = (b.x1() + j(dw), b.y1() + j(dh));
    let (x2, y2) = (b.x2() + j(dw), b.y2() + j(dh));
    clamp_box(x1, y1, x2, y2, width, height)
}
