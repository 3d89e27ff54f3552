//! Model configuration, parameter registration and the end-to-end forward
//! pass: providers, graph, decoder, action head.

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::data::SceneRecord;
use crate::decoder::{self, DecoderConfig, HoiPrediction};
use crate::error::{Error, Result};
use crate::geometry::{self, DetectionSet, PairPolicy, PairTable, SPATIAL_DIM};
use crate::graph::{self, names, GraphSnapshot, GraphState, MfiInputs, StageFlags};
use crate::hashing::hex_digest;
use crate::nn::{self, FusionConfig, ParameterStore};
use crate::par;
use crate::providers::{self, AdapterConfig, DetectionPolicy, ProviderSet};
use crate::registry::Registry;

pub const TEXT_CATEGORY_TABLE: &str = "provider.text.category";
pub const TEXT_INTERACTION_TABLE: &str = "provider.text.interaction";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Node width `d`; pair features are `2d` wide.
    pub node_dim: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    pub backbone_dim: usize,
    pub branches: usize,
    /// Iterations of the graph loop.
    pub steps: usize,
    pub decoder: DecoderConfig,
    pub adapter: AdapterConfig,
    pub stages: StageFlags,
    pub pair_policy: PairPolicy,
    pub detection_policy: DetectionPolicy,
    /// Exponent on the detector confidences in the final score.
    pub score_lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            node_dim: 64,
            visual_dim: 64,
            text_dim: 64,
            backbone_dim: 64,
            branches: 4,
            steps: 2,
            decoder: DecoderConfig::default(),
            adapter: AdapterConfig::default(),
            stages: StageFlags::all(),
            pair_policy: PairPolicy::default(),
            detection_policy: DetectionPolicy::default(),
            score_lambda: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn pair_dim(&self) -> usize {
        2 * self.node_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.node_dim == 0 || self.visual_dim == 0 || self.text_dim == 0 || self.backbone_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.node_dim % self.branches.max(1) != 0 || self.branches == 0 {
            return bad(format!("{} branches do not divide node width {}", self.branches, self.node_dim));
        }
        if self.decoder.heads == 0 || self.pair_dim() % self.decoder.heads != 0 {
            return bad(format!("{} heads do not divide pair width {}", self.decoder.heads, self.pair_dim()));
        }
        if self.score_lambda < 0.0 {
            return bad("score_lambda must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.adapter.rho_init) {
            return bad("adapter rho must lie in [0, 1]".into());
        }
        self.detection_policy.validate()
    }

    /// Hex digest of the canonical JSON encoding plus the label-space size.
    pub fn hash(&self, registry: &Registry) -> String {
        let body = serde_json::json!({
            "model": self,
            "categories": registry.num_categories(),
            "actions": registry.num_actions(),
        });
        hex_digest(body.to_string().as_bytes())
    }
}

/// Registers every trainable tensor of the interaction predictor and the
/// frozen text tables of the label space.
pub fn build_store(cfg: &ModelConfig, registry: &Registry, providers: &ProviderSet, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let d = cfg.node_dim;
    let d2 = cfg.pair_dim();
    let mut s = ParameterStore::new(seed);

    nn::register_mmf(&mut s, names::MMF, d2, SPATIAL_DIM)?;
    let fusion = |a, b| FusionConfig {
        branches: cfg.branches,
        in_a: a,
        in_b: b,
        out_dim: d,
    };
    nn::register_mbf(&mut s, names::MBF_ADJ, &fusion(d2, SPATIAL_DIM))?;
    nn::register_linear(&mut s, names::ADJ_LINEAR, d, d)?;
    nn::register_mbf(&mut s, names::MBF_VISUAL, &fusion(cfg.visual_dim, d))?;
    nn::register_mbf(&mut s, names::MBF_TEXTUAL, &fusion(cfg.text_dim, d))?;
    nn::register_layer_norm(&mut s, names::LN_VISUAL, d)?;
    nn::register_layer_norm(&mut s, names::LN_TEXTUAL, d)?;
    nn::register_layer_norm(&mut s, names::LN_PAIR, d2)?;
    nn::register_layer_norm(&mut s, names::LN_INTERACTION, d2)?;
    nn::register_linear(&mut s, names::PROJ_INTERACTION, cfg.text_dim, d2)?;

    if cfg.adapter.enabled {
        providers::register_adapter(&mut s, "adapter.v", cfg.visual_dim, &cfg.adapter)?;
        providers::register_adapter(&mut s, "adapter.t", cfg.text_dim, &cfg.adapter)?;
        providers::register_adapter(&mut s, "adapter.i", cfg.text_dim, &cfg.adapter)?;
    }

    decoder::register_decoder(&mut s, &cfg.decoder, d2, cfg.backbone_dim)?;
    decoder::register_action_head(&mut s, d2, registry.num_actions())?;

    let (cat, inter) = text_tables(registry, providers, cfg.text_dim)?;
    s.register_frozen(TEXT_CATEGORY_TABLE, cat)?;
    s.register_frozen(TEXT_INTERACTION_TABLE, inter)?;
    Ok(s)
}

/// Category-prompt and interaction-prompt embeddings, one row per category.
pub fn text_tables(registry: &Registry, providers: &ProviderSet, text_dim: usize) -> Result<(Mat, Mat)> {
    let c = registry.num_categories();
    let mut cat = Mat::zeros((c, text_dim));
    let mut inter = Mat::zeros((c, text_dim));
    for id in 0..c {
        let row = providers.category_text(registry, id)?;
        check_dim("text embedding", &row, text_dim)?;
        cat.row_mut(id).assign(&ndarray::ArrayView1::from(&row[..]));
        let row = providers.interaction_text(registry, id)?;
        check_dim("text embedding", &row, text_dim)?;
        inter.row_mut(id).assign(&ndarray::ArrayView1::from(&row[..]));
    }
    Ok((cat, inter))
}

fn check_dim(what: &str, v: &[f64], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(crate::error::shape_err(what, (1, dim), (1, v.len())));
    }
    Ok(())
}

/// Frozen per-image inputs: filtered detections, pairs and provider
/// features.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInputs {
    pub image_key: String,
    pub dets: DetectionSet,
    pub table: PairTable,
    pub appearance: Mat,
    pub visual: Mat,
    pub backbone: Mat,
    pub node_category: Vec<usize>,
    pub object_category: Vec<usize>,
}

impl SceneInputs {
    /// Builds inputs for an already filtered detection set.
    /// `appearance_keys` is indexed by detection id.
    pub fn from_detections(
        image_key: &str,
        dets: DetectionSet,
        appearance_keys: &[String],
        cfg: &ModelConfig,
        providers: &ProviderSet,
    ) -> Result<Self> {
        let table = geometry::enumerate_pairs(&dets, cfg.pair_policy)?;
        Self::from_table(image_key, dets, table, appearance_keys, cfg, providers)
    }

    pub fn from_table(
        image_key: &str,
        dets: DetectionSet,
        table: PairTable,
        appearance_keys: &[String],
        cfg: &ModelConfig,
        providers: &ProviderSet,
    ) -> Result<Self> {
        let mut appearance = Mat::zeros((dets.len(), cfg.node_dim));
        for (i, det) in dets.detections.iter().enumerate() {
            let row = providers.node_appearance(appearance_keys, det.id)?;
            check_dim("node appearance", &row, cfg.node_dim)?;
            appearance.row_mut(i).assign(&ndarray::ArrayView1::from(&row[..]));
        }
        let (visual, backbone) = image_features(image_key, cfg, providers)?;
        let node_category = dets.detections.iter().map(|d| d.category).collect();
        let object_category = table.pairs.iter().map(|&(_, o)| dets.detections[o].category).collect();
        Ok(Self {
            image_key: image_key.to_string(),
            dets,
            table,
            appearance,
            visual,
            backbone,
            node_category,
            object_category,
        })
    }

    pub fn num_pairs(&self) -> usize {
        self.table.len()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub record_graph: bool,
    pub record_attention: bool,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub decoded: Var,
    pub pair_features: Var,
    /// `[layer][head]` attention matrices when requested.
    pub attention: Vec<Vec<Mat>>,
    pub graph_trace: Vec<GraphSnapshot>,
}

fn adapted<'s>(t: &mut Tape<'s>, store: &'s ParameterStore, cfg: &ModelConfig, name: &str, x: Var) -> Result<Var> {
    if cfg.adapter.enabled {
        providers::apply_adapter(t, store, name, x)
    } else {
        Ok(x)
    }
}

/// Records the full interaction predictor for one image on `t`.
pub fn forward<'s>(
    t: &mut Tape<'s>,
    store: &'s ParameterStore,
    cfg: &ModelConfig,
    scene: &'s SceneInputs,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    let nodes = t.constant_ref(&scene.appearance);
    let spatial = if cfg.stages.spatial {
        t.constant_ref(&scene.table.spatial)
    } else {
        t.constant(Mat::zeros(scene.table.spatial.raw_dim()))
    };

    let visual = t.constant_ref(&scene.visual);
    let visual = adapted(t, store, cfg, "adapter.v", visual)?;

    let cat_table = t.param(store, TEXT_CATEGORY_TABLE)?;
    let text = t.gather_rows(cat_table, &scene.node_category);
    let text = adapted(t, store, cfg, "adapter.t", text)?;

    let inter_table = t.param(store, TEXT_INTERACTION_TABLE)?;
    let inter = t.gather_rows(inter_table, &scene.object_category);
    let inter = adapted(t, store, cfg, "adapter.i", inter)?;
    let inter = nn::linear(t, store, names::PROJ_INTERACTION, inter)?;

    let inputs = MfiInputs {
        spatial,
        visual,
        text,
        interaction: inter,
    };
    let mut state = GraphState::new(&scene.table, nodes);
    let mut trace = Vec::new();
    let pair_features = graph::run_mfi(
        t,
        store,
        &mut state,
        &inputs,
        cfg.steps,
        cfg.stages,
        opts.record_graph.then_some(&mut trace),
    )?;

    let backbone = t.constant_ref(&scene.backbone);
    let dec = decoder::decode(t, store, &cfg.decoder, pair_features, backbone)?;
    let logits = decoder::action_logits(t, store, dec.output)?;
    Ok(ForwardOutput {
        logits,
        decoded: dec.output,
        pair_features,
        attention: if opts.record_attention { dec.attention } else { Vec::new() },
        graph_trace: trace,
    })
}

/// Logits for one image without keeping the tape around.
pub fn predict_logits(store: &ParameterStore, cfg: &ModelConfig, scene: &SceneInputs) -> Result<Mat> {
    let mut t = Tape::new();
    let out = forward(&mut t, store, cfg, scene, ForwardOptions::default())?;
    Ok(t.value(out.logits).clone())
}

/// Visual embedding (`1 x visual_dim`) and backbone map for one image key.
fn image_features(key: &str, cfg: &ModelConfig, providers: &ProviderSet) -> Result<(Mat, Mat)> {
    let v = providers.visual_embedding(key)?;
    check_dim("visual embedding", &v, cfg.visual_dim)?;
    let visual = Mat::from_shape_vec((1, v.len()), v).expect("row vector");
    let backbone = providers.backbone_map(key)?;
    if backbone.ncols() != cfg.backbone_dim {
        return Err(crate::error::shape_err(
            "backbone map",
            (backbone.nrows(), cfg.backbone_dim),
            backbone.dim(),
        ));
    }
    Ok((visual, backbone))
}

/// Frozen inputs of one scene record, or `None` when filtering leaves no
/// human-object pair.
pub fn scene_inputs(record: &SceneRecord, cfg: &ModelConfig, providers: &ProviderSet) -> Result<Option<SceneInputs>> {
    let dets = record.filtered(&cfg.detection_policy);
    match SceneInputs::from_detections(&record.image_key, dets, &record.appearance_keys, cfg, providers) {
        Ok(mut s) => {
            if let Some(key) = &record.feature_key {
                (s.visual, s.backbone) = image_features(key, cfg, providers)?;
            }
            Ok(Some(s))
        }
        Err(Error::EmptyPairSet) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Scored triplets for every scene, in scene order and descending score
/// within each scene.
pub fn predict(
    store: &ParameterStore,
    cfg: &ModelConfig,
    registry: &Registry,
    scenes: &[SceneInputs],
) -> Result<Vec<HoiPrediction>> {
    let per_scene = par::par_map(scenes, |s| -> Result<Vec<HoiPrediction>> {
        let logits = predict_logits(store, cfg, s)?;
        Ok(decoder::compose_scores(
            &s.image_key,
            &logits,
            &s.table,
            &s.dets,
            registry,
            cfg.score_lambda,
        ))
    });
    let mut out = Vec::new();
    for p in per_scene {
        out.extend(p?);
    }
    Ok(out)
}
