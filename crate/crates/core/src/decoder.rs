//! Cross-attention decoder over the backbone map, the action head and
//! score composition into HOI triplets.

use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{BBox, DetectionSet, PairTable};
use crate::nn::{self, ParameterStore};
use crate::registry::Registry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of the model width.
    pub ff_mult: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            ff_mult: 4,
        }
    }
}

pub const BACKBONE_PROJ: &str = "dec.kv";
pub const ACTION_HEAD: &str = "head.cls";

pub fn register_decoder(store: &mut ParameterStore, cfg: &DecoderConfig, width: usize, backbone_dim: usize) -> Result<()> {
    if cfg.heads == 0 || width % cfg.heads != 0 {
        return Err(Error::InvalidConfig(format!("{} heads do not divide width {width}", cfg.heads)));
    }
    nn::register_linear(store, BACKBONE_PROJ, backbone_dim, width)?;
    for l in 0..cfg.layers {
        nn::register_cross_attention(store, &format!("dec.{l}.attn"), width, width)?;
        nn::register_layer_norm(store, &format!("dec.{l}.ln1"), width)?;
        nn::register_linear(store, &format!("dec.{l}.ff1"), width, width * cfg.ff_mult)?;
        nn::register_linear(store, &format!("dec.{l}.ff2"), width * cfg.ff_mult, width)?;
        nn::register_layer_norm(store, &format!("dec.{l}.ln2"), width)?;
    }
    Ok(())
}

pub fn register_action_head(store: &mut ParameterStore, width: usize, num_actions: usize) -> Result<()> {
    nn::register_linear(store, ACTION_HEAD, width, num_actions)
}

pub struct Decoded {
    pub output: Var,
    /// `[layer][head]` attention of pair queries over backbone cells.
    pub attention: Vec<Vec<Mat>>,
}

/// Pair features attend to the projected backbone map; no attention among
/// the queries themselves. Output rows stay aligned with input rows.
pub fn decode<'s>(
    t: &mut Tape<'s>,
    store: &'s ParameterStore,
    cfg: &DecoderConfig,
    queries: Var,
    backbone: Var,
) -> Result<Decoded> {
    let mut x = queries;
    let mut attention = Vec::with_capacity(cfg.layers);
    if cfg.layers == 0 {
        return Ok(Decoded { output: x, attention });
    }
    let kv = nn::linear(t, store, BACKBONE_PROJ, backbone)?;
    for l in 0..cfg.layers {
        let att = nn::cross_attention(t, store, &format!("dec.{l}.attn"), x, kv, cfg.heads)?;
        attention.push(att.weights);
        let res = t.add(x, att.output)?;
        x = nn::layer_norm(t, store, &format!("dec.{l}.ln1"), res)?;
        let h = nn::linear(t, store, &format!("dec.{l}.ff1"), x)?;
        let h = t.relu(h);
        let h = nn::linear(t, store, &format!("dec.{l}.ff2"), h)?;
        let res = t.add(x, h)?;
        x = nn::layer_norm(t, store, &format!("dec.{l}.ln2"), res)?;
    }
    Ok(Decoded { output: x, attention })
}

/// Independent per-action logits (multi-label).
pub fn action_logits<'s>(t: &mut Tape<'s>, store: &'s ParameterStore, decoded: Var) -> Result<Var> {
    nn::linear(t, store, ACTION_HEAD, decoded)
}

/// A scored `<human, action, object>` triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiPrediction {
    pub image_key: String,
    pub human_box: BBox,
    /// `None` is the empty-object sentinel (serialized as the all-zero box).
    #[serde(with = "optional_box")]
    pub object_box: Option<BBox>,
    pub object_category: usize,
    pub action: usize,
    pub score: f64,
    pub logit: f64,
    pub human_score: f64,
    pub object_score: f64,
    pub action_prob: f64,
}

pub(crate) mod optional_box {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::geometry::BBox;

    pub fn serialize<S: Serializer>(b: &Option<BBox>, s: S) -> Result<S::Ok, S::Error> {
        b.map(|b| b.to_array()).unwrap_or([0.0; 4]).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<BBox>, D::Error> {
        let v = <Option<[f64; 4]>>::deserialize(d)?;
        match v {
            None => Ok(None),
            Some(a) if a == [0.0; 4] => Ok(None),
            Some(a) => BBox::try_from(a).map(Some).map_err(serde::de::Error::custom),
        }
    }
}

/// `score = (s_h * s_o)^lambda * sigmoid(logit)` for every valid
/// `(action, object category)` of every pair, sorted by descending score.
pub fn compose_scores(
    image_key: &str,
    logits: &Mat,
    table: &PairTable,
    dets: &DetectionSet,
    registry: &Registry,
    lambda: f64,
) -> Vec<HoiPrediction> {
    let mut out = Vec::new();
    for (p, &(h, o)) in table.pairs.iter().enumerate() {
        let hd = &dets.detections[h];
        let od = &dets.detections[o];
        let prior = (hd.score * od.score).powf(lambda);
        for a in 0..logits.ncols() {
            if registry.class_of(a, od.category).is_none() {
                continue;
            }
            let logit = logits[[p, a]];
            let prob = sigmoid(logit);
            out.push(HoiPrediction {
                image_key: image_key.to_string(),
                human_box: hd.bbox,
                object_box: Some(od.bbox),
                object_category: od.category,
                action: a,
                score: prior * prob,
                logit,
                human_score: hd.score,
                object_score: od.score,
                action_prob: prob,
            });
        }
    }
    // stable: ties keep pair-major order
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{enumerate_pairs, Detection, PairPolicy};
    use ndarray::array;

    fn scene() -> (DetectionSet, PairTable, Registry) {
        let d = |id, cat, score, x: f64| Detection {
            id,
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(),
            category: cat,
            score,
        };
        let dets = DetectionSet {
            image_width: 100.0,
            image_height: 100.0,
            detections: vec![d(0, 0, 1.0, 0.0), d(1, 1, 1.0, 20.0), d(2, 2, 0.5, 40.0)],
        };
        let table = enumerate_pairs(&dets, PairPolicy::default()).unwrap();
        let registry = Registry::new(
            vec!["person".into(), "cup".into(), "bike".into()],
            vec!["hold".into(), "ride".into()],
            vec![(0, 1), (1, 2), (0, 2)],
        )
        .unwrap();
        (dets, table, registry)
    }

    #[test]
    fn unit_confidences_and_zero_logit_give_half() {
        let (dets, table, reg) = scene();
        let logits = Mat::zeros((table.len(), 2));
        let preds = compose_scores("img", &logits, &table, &dets, &reg, 1.0);
        let cup = preds.iter().find(|p| p.object_category == 1).unwrap();
        assert_eq!(cup.score, 0.5);
        // invalid combinations skipped: cup only with action 0, bike with both
        assert_eq!(preds.len(), 3);
    }

    #[test]
    fn lambda_zero_ignores_detector() {
        let (dets, table, reg) = scene();
        let logits = array![[0.3, -0.2], [1.5, 0.7]];
        for p in compose_scores("img", &logits, &table, &dets, &reg, 0.0) {
            assert_eq!(p.score, sigmoid(p.logit));
        }
    }

    #[test]
    fn saturated_logits_stay_in_range() {
        let (dets, table, reg) = scene();
        let logits = array![[100.0, -100.0], [-100.0, 100.0]];
        for p in compose_scores("img", &logits, &table, &dets, &reg, 1.0) {
            assert!(p.score.is_finite() && (0.0..=1.0).contains(&p.score));
        }
    }

    #[test]
    fn sentinel_box_roundtrip() {
        let (dets, table, reg) = scene();
        let mut p = compose_scores("img", &Mat::zeros((2, 2)), &table, &dets, &reg, 1.0).remove(0);
        p.object_box = None;
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"object_box\":[0.0,0.0,0.0,0.0]"));
        let back: HoiPrediction = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }
}
