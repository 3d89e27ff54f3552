//! The four-stage multimodal graph: spatial initialisation of pair
//! features, adjacency weights, visual and textual message passing into the
//! nodes, and the interaction update of the pairs, iterated `T` times.

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::Result;
use crate::geometry::PairTable;
use crate::nn::{self, ParameterStore};

/// Which stages run. Disabling `spatial` zeroes the spatial features fed to
/// both the pair initialisation and the adjacency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageFlags {
    pub spatial: bool,
    pub visual: bool,
    pub textual: bool,
    pub interaction: bool,
}

impl Default for StageFlags {
    fn default() -> Self {
        Self::all()
    }
}

impl StageFlags {
    pub fn all() -> Self {
        Self {
            spatial: true,
            visual: true,
            textual: true,
            interaction: true,
        }
    }

    pub fn without(mut self, stage: Stage) -> Self {
        match stage {
            Stage::Spatial => self.spatial = false,
            Stage::Visual => self.visual = false,
            Stage::Textual => self.textual = false,
            Stage::Interaction => self.interaction = false,
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Spatial,
    Visual,
    Textual,
    Interaction,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Spatial, Stage::Visual, Stage::Textual, Stage::Interaction];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Spatial => "spatial",
            Stage::Visual => "visual",
            Stage::Textual => "textual",
            Stage::Interaction => "interaction",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim().to_lowercase())
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

/// Parameter names of the graph blocks.
pub mod names {
    pub const MMF: &str = "mmf";
    pub const MBF_ADJ: &str = "mbf.wg";
    pub const ADJ_LINEAR: &str = "wg.linear";
    pub const MBF_VISUAL: &str = "mbf.v";
    pub const MBF_TEXTUAL: &str = "mbf.t";
    pub const LN_VISUAL: &str = "ln.visual";
    pub const LN_TEXTUAL: &str = "ln.textual";
    pub const LN_PAIR: &str = "ln.inter.pair";
    pub const LN_INTERACTION: &str = "ln.inter.text";
    pub const PROJ_INTERACTION: &str = "proj.i";
}

/// Graph tensors on a tape. `nodes` rows follow the detection order of the
/// pair table; `pairs` row `p` is pair `p` of the table.
pub struct GraphState<'a> {
    pub table: &'a PairTable,
    pub nodes: Var,
    pub pairs: Option<Var>,
    pub adjacency: Option<Var>,
    pub step: usize,
    human: Vec<usize>,
    object: Vec<usize>,
    human_weight: Vec<f64>,
    object_weight: Vec<f64>,
}

impl<'a> GraphState<'a> {
    pub fn new(table: &'a PairTable, nodes: Var) -> Self {
        let degree: Vec<f64> = table.incident.iter().map(|v| v.len() as f64).collect();
        let human = table.human_index();
        let object = table.object_index();
        let human_weight = human.iter().map(|&h| 1.0 / degree[h]).collect();
        let object_weight = object.iter().map(|&o| 1.0 / degree[o]).collect();
        Self {
            table,
            nodes,
            pairs: None,
            adjacency: None,
            step: 0,
            human,
            object,
            human_weight,
            object_weight,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.table.num_nodes()
    }
}

/// Snapshot of the graph tensors after one iteration (0 = after the
/// spatial initialisation).
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSnapshot {
    pub iteration: usize,
    pub nodes: Mat,
    pub pairs: Mat,
    pub adjacency: Option<Mat>,
}

/// `(H, O)`: node rows of each pair's human and object.
pub fn gather_pairs(t: &mut Tape<'_>, state: &GraphState<'_>) -> (Var, Var) {
    let h = t.gather_rows(state.nodes, &state.human);
    let o = t.gather_rows(state.nodes, &state.object);
    (h, o)
}

fn human_object<'s>(t: &mut Tape<'s>, state: &GraphState<'_>) -> Result<Var> {
    let (h, o) = gather_pairs(t, state);
    t.concat_cols(&[h, o])
}

/// `E = MMF(H ++ O, S)`; runs once before the loop.
pub fn spatial_stage_init<'s>(t: &mut Tape<'s>, store: &'s ParameterStore, state: &mut GraphState<'_>, spatial: Var) -> Result<()> {
    let ho = human_object(t, state)?;
    state.pairs = Some(nn::mmf(t, store, names::MMF, ho, spatial)?);
    Ok(())
}

/// `W_G = Linear(MBF(H ++ O, S))` from freshly gathered node rows.
pub fn compute_adjacency<'s>(t: &mut Tape<'s>, store: &'s ParameterStore, state: &mut GraphState<'_>, spatial: Var) -> Result<Var> {
    let ho = human_object(t, state)?;
    let fused = nn::mbf(t, store, names::MBF_ADJ, ho, spatial)?;
    let w = nn::linear(t, store, names::ADJ_LINEAR, fused)?;
    state.adjacency = Some(w);
    Ok(w)
}

/// Shared body of the visual and textual stages: per pair and endpoint
/// role, `relu(relu(W_G[p]) * MBF(modal, N)[endpoint])`, averaged over the
/// pairs incident to each node, then `N = LN(N + msg)`. Gating with
/// `relu(W_G)` makes a non-positive adjacency channel block its message.
fn modality_stage<'s>(
    t: &mut Tape<'s>,
    store: &'s ParameterStore,
    state: &mut GraphState<'_>,
    fusion: &str,
    norm: &str,
    modal: Var,
) -> Result<()> {
    let adjacency = state
        .adjacency
        .expect("adjacency is computed before message passing");
    let fused = nn::mbf(t, store, fusion, modal, state.nodes)?;
    let adjacency = t.relu(adjacency);
    let n = state.num_nodes();

    let to_human = t.gather_rows(fused, &state.human);
    let to_human = t.mul(adjacency, to_human)?;
    let to_human = t.relu(to_human);
    let to_object = t.gather_rows(fused, &state.object);
    let to_object = t.mul(adjacency, to_object)?;
    let to_object = t.relu(to_object);

    let msg_h = t.scatter_rows(to_human, &state.human, &state.human_weight, n);
    let msg_o = t.scatter_rows(to_object, &state.object, &state.object_weight, n);
    let msg = t.add(msg_h, msg_o)?;
    let res = t.add(state.nodes, msg)?;
    state.nodes = nn::layer_norm(t, store, norm, res)?;
    Ok(())
}

/// Visual message passing with one image-level embedding (1 x d_v).
pub fn visual_stage<'s>(t: &mut Tape<'s>, store: &'s ParameterStore, state: &mut GraphState<'_>, visual: Var) -> Result<()> {
    modality_stage(t, store, state, names::MBF_VISUAL, names::LN_VISUAL, visual)
}

/// Textual message passing with one category-prompt embedding per node.
pub fn textual_stage<'s>(t: &mut Tape<'s>, store: &'s ParameterStore, state: &mut GraphState<'_>, text: Var) -> Result<()> {
    modality_stage(t, store, state, names::MBF_TEXTUAL, names::LN_TEXTUAL, text)
}

/// `E = LN(LN(E + H ++ O) + I)` with `I` already projected to the pair
/// width.
pub fn interaction_stage<'s>(
    t: &mut Tape<'s>,
    store: &'s ParameterStore,
    state: &mut GraphState<'_>,
    interaction: Var,
) -> Result<()> {
    let pairs = state.pairs.expect("pair features are initialised first");
    let ho = human_object(t, state)?;
    let e = t.add(pairs, ho)?;
    let e = nn::layer_norm(t, store, names::LN_PAIR, e)?;
    let e = t.add(e, interaction)?;
    state.pairs = Some(nn::layer_norm(t, store, names::LN_INTERACTION, e)?);
    Ok(())
}

/// Modal inputs of the loop, already adapted and projected.
pub struct MfiInputs {
    pub spatial: Var,
    pub visual: Var,
    pub text: Var,
    pub interaction: Var,
}

/// Spatial initialisation followed by `steps` iterations of
/// adjacency, visual, textual and interaction stages. Returns `E`.
pub fn run_mfi<'s>(
    t: &mut Tape<'s>,
    store: &'s ParameterStore,
    state: &mut GraphState<'_>,
    inputs: &MfiInputs,
    steps: usize,
    stages: StageFlags,
    mut trace: Option<&mut Vec<GraphSnapshot>>,
) -> Result<Var> {
    spatial_stage_init(t, store, state, inputs.spatial)?;
    let mut record = |t: &Tape<'s>, state: &GraphState<'_>| {
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(GraphSnapshot {
                iteration: state.step,
                nodes: t.value(state.nodes).clone(),
                pairs: t.value(state.pairs.expect("initialised")).clone(),
                adjacency: state.adjacency.map(|w| t.value(w).clone()),
            });
        }
    };
    record(t, state);
    for _ in 0..steps {
        state.step += 1;
        compute_adjacency(t, store, state, inputs.spatial)?;
        if stages.visual {
            visual_stage(t, store, state, inputs.visual)?;
        }
        if stages.textual {
            textual_stage(t, store, state, inputs.text)?;
        }
        if stages.interaction {
            interaction_stage(t, store, state, inputs.interaction)?;
        }
        record(t, state);
    }
    Ok(state.pairs.expect("initialised"))
}
