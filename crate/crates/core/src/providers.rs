//! Feature providers standing in for the frozen detector, the
//! vision-language encoders and the backbone: deterministic stubs or
//! precomputed embedding files behind one interface. Also hosts the
//! detection filter, the prompt templates and the embedding adapter.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{Detection, DetectionSet};
use crate::hashing::keyed_rng;
use crate::nn::{self, Init, ParameterStore};
use crate::registry::Registry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionPolicy {
    pub score_threshold: f64,
    pub max_persons: usize,
    pub max_objects: usize,
}

impl Default for DetectionPolicy {
    fn default() -> Self {
        Self {
            score_threshold: 0.2,
            max_persons: 15,
            max_objects: 15,
        }
    }
}

impl DetectionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) || self.max_persons == 0 || self.max_objects == 0 {
            return Err(Error::InvalidConfig(format!("invalid detection policy {self:?}")));
        }
        Ok(())
    }
}

/// Keeps detections scoring at least the threshold, caps persons and
/// objects separately, and orders persons first, each group by descending
/// score then input position.
pub fn filter_detections(raw: &[Detection], image_width: f64, image_height: f64, policy: &DetectionPolicy) -> DetectionSet {
    let rank = |person: bool, cap: usize| {
        let mut v: Vec<(usize, &Detection)> = raw
            .iter()
            .enumerate()
            .filter(|(_, d)| d.is_person() == person && d.score >= policy.score_threshold)
            .collect();
        v.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
        v.truncate(cap);
        v.into_iter().map(|(_, d)| d.clone())
    };
    let mut detections: Vec<Detection> = rank(true, policy.max_persons).collect();
    detections.extend(rank(false, policy.max_objects));
    DetectionSet {
        image_width,
        image_height,
        detections,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    VisualImage,
    TextCategory,
    TextInteraction,
    BackboneMap,
    NodeAppearance,
}

impl ProviderKind {
    fn code(self) -> u8 {
        match self {
            ProviderKind::VisualImage => 1,
            ProviderKind::TextCategory => 2,
            ProviderKind::TextInteraction => 3,
            ProviderKind::BackboneMap => 4,
            ProviderKind::NodeAppearance => 5,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            1 => ProviderKind::VisualImage,
            2 => ProviderKind::TextCategory,
            3 => ProviderKind::TextInteraction,
            4 => ProviderKind::BackboneMap,
            5 => ProviderKind::NodeAppearance,
            _ => return None,
        })
    }

    fn domain(self) -> &'static str {
        match self {
            ProviderKind::VisualImage => "visual",
            ProviderKind::TextCategory | ProviderKind::TextInteraction => "text",
            ProviderKind::BackboneMap => "backbone",
            ProviderKind::NodeAppearance => "appearance",
        }
    }
}

/// A read-only source of embeddings keyed by strings.
pub trait EmbeddingSource: Send + Sync {
    fn kind(&self) -> ProviderKind;
    fn dim(&self) -> usize;
    fn lookup(&self, key: &str) -> Result<Vec<f64>>;
}

/// Seeded pseudo-random embeddings: a 64-bit hash of the key seeds a
/// counter-based generator.
#[derive(Debug, Clone)]
pub struct StubProvider {
    kind: ProviderKind,
    dim: usize,
    seed: u64,
}

impl StubProvider {
    pub fn new(kind: ProviderKind, dim: usize, seed: u64) -> Self {
        Self { kind, dim, seed }
    }
}

impl EmbeddingSource for StubProvider {
    fn kind(&self) -> ProviderKind {
        self.kind
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn lookup(&self, key: &str) -> Result<Vec<f64>> {
        let mut rng = keyed_rng(self.seed, self.kind.domain(), key);
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if self.kind == ProviderKind::BackboneMap {
            // unit variance entries
            let s = 3f64.sqrt();
            v.iter_mut().for_each(|x| *x *= s);
        } else {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Embeddings loaded from a precomputed file.
#[derive(Debug, Clone)]
pub struct FileProvider {
    kind: ProviderKind,
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl FileProvider {
    pub fn new(kind: ProviderKind, dim: usize, table: HashMap<String, Vec<f64>>) -> Result<Self> {
        for (k, v) in &table {
            if v.len() != dim {
                return Err(Error::Parse {
                    index: 0,
                    message: format!("embedding `{k}` has {} values, expected {dim}", v.len()),
                });
            }
        }
        Ok(Self { kind, dim, table })
    }

    /// Loads an embeddings file, rejecting a dimension other than
    /// `expected_dim`.
    pub fn load(path: &Path, expected_kind: ProviderKind, expected_dim: usize) -> Result<Self> {
        let file = EmbeddingsFile::read(path)?;
        if file.kind != expected_kind {
            return Err(Error::InvalidConfig(format!(
                "{} holds {:?} embeddings, expected {expected_kind:?}",
                path.display(),
                file.kind
            )));
        }
        if file.dim != expected_dim {
            return Err(Error::InvalidConfig(format!(
                "{} has dimension {}, expected {expected_dim}",
                path.display(),
                file.dim
            )));
        }
        let table = file
            .records
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().map(f64::from).collect()))
            .collect();
        Self::new(file.kind, file.dim, table)
    }
}

impl EmbeddingSource for FileProvider {
    fn kind(&self) -> ProviderKind {
        self.kind
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn lookup(&self, key: &str) -> Result<Vec<f64>> {
        self.table
            .get(key)
            .cloned()
            .ok_or_else(|| Error::MissingEmbedding(key.to_string()))
    }
}

pub const EMBEDDINGS_MAGIC: &[u8; 4] = b"MGEM";
pub const EMBEDDINGS_VERSION: u32 = 1;

/// Binary embeddings container. All integers and reals little-endian:
/// `magic[4] version:u32 kind:u8 dim:u32 count:u32`, then `count` records of
/// `key_len:u32 key:utf8[key_len] values:f32[dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingsFile {
    pub kind: ProviderKind,
    pub dim: usize,
    pub records: Vec<(String, Vec<f32>)>,
}

impl EmbeddingsFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(EMBEDDINGS_MAGIC)?;
        w.write_u32::<LittleEndian>(EMBEDDINGS_VERSION)?;
        w.write_u8(self.kind.code())?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u32::<LittleEndian>(self.records.len() as u32)?;
        for (key, values) in &self.records {
            if values.len() != self.dim {
                return Err(Error::InvalidConfig(format!("embedding `{key}` has wrong dimension")));
            }
            w.write_u32::<LittleEndian>(key.len() as u32)?;
            w.write_all(key.as_bytes())?;
            for &v in values {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let header_err = |e: std::io::Error| Error::Parse {
            index: 0,
            message: format!("embeddings header: {e}"),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(header_err)?;
        if &magic != EMBEDDINGS_MAGIC {
            return Err(Error::Parse {
                index: 0,
                message: "not an embeddings file".into(),
            });
        }
        let version = r.read_u32::<LittleEndian>().map_err(header_err)?;
        if version != EMBEDDINGS_VERSION {
            return Err(Error::Version {
                found: version,
                expected: EMBEDDINGS_VERSION,
            });
        }
        let kind_code = r.read_u8().map_err(header_err)?;
        let kind = ProviderKind::from_code(kind_code).ok_or_else(|| Error::Parse {
            index: 0,
            message: format!("unknown provider kind {kind_code}"),
        })?;
        let dim = r.read_u32::<LittleEndian>().map_err(header_err)? as usize;
        let count = r.read_u32::<LittleEndian>().map_err(header_err)? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for index in 0..count {
            let rec_err = |e: std::io::Error| Error::Parse {
                index,
                message: e.to_string(),
            };
            let len = r.read_u32::<LittleEndian>().map_err(rec_err)? as usize;
            let mut key = vec![0u8; len];
            r.read_exact(&mut key).map_err(rec_err)?;
            let key = String::from_utf8(key).map_err(|e| Error::Parse {
                index,
                message: e.to_string(),
            })?;
            let mut values = vec![0f32; dim];
            r.read_f32_into::<LittleEndian>(&mut values).map_err(rec_err)?;
            records.push((key, values));
        }
        Ok(Self { kind, dim, records })
    }
}

fn normalize_name(name: &str) -> String {
    name.to_lowercase().replace('_', " ")
}

/// `a photo of a <category>`.
pub fn category_prompt(registry: &Registry, category: &str) -> Result<String> {
    registry.category_id(category)?;
    Ok(format!("a photo of a {}", normalize_name(category)))
}

/// `a photo of a person interacting with <category>`.
pub fn interaction_prompt(registry: &Registry, category: &str) -> Result<String> {
    registry.category_id(category)?;
    Ok(format!("a photo of a person interacting with {}", normalize_name(category)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderSource {
    Stub,
    File,
}

/// Dimensions, seeds and file locations of the provider set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub seed: u64,
    pub visual_dim: usize,
    pub text_dim: usize,
    pub backbone_dim: usize,
    pub node_dim: usize,
    /// Backbone feature map is `backbone_side x backbone_side` cells.
    pub backbone_side: usize,
    pub visual_file: Option<String>,
    pub text_file: Option<String>,
    pub backbone_file: Option<String>,
    pub appearance_file: Option<String>,
    /// Optional TOML file mapping category names to text-embedding keys.
    pub category_keys: Option<String>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            visual_dim: 64,
            text_dim: 64,
            backbone_dim: 64,
            node_dim: 64,
            backbone_side: 7,
            visual_file: None,
            text_file: None,
            backbone_file: None,
            appearance_file: None,
            category_keys: None,
        }
    }
}

/// Category-name to embedding-key overrides for text lookups.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryKeys {
    #[serde(default)]
    pub category: HashMap<String, String>,
    #[serde(default)]
    pub interaction: HashMap<String, String>,
}

/// The full set of frozen feature sources for one dataset.
#[derive(Clone)]
pub struct ProviderSet {
    pub visual: Arc<dyn EmbeddingSource>,
    pub text: Arc<dyn EmbeddingSource>,
    pub backbone: Arc<dyn EmbeddingSource>,
    pub appearance: Arc<dyn EmbeddingSource>,
    pub backbone_cells: usize,
    pub backbone_dim: usize,
    pub keys: CategoryKeys,
}

impl ProviderSet {
    pub fn stub(cfg: &ProviderConfig) -> Self {
        let cells = cfg.backbone_side * cfg.backbone_side;
        Self {
            visual: Arc::new(StubProvider::new(ProviderKind::VisualImage, cfg.visual_dim, cfg.seed)),
            text: Arc::new(StubProvider::new(ProviderKind::TextCategory, cfg.text_dim, cfg.seed)),
            backbone: Arc::new(StubProvider::new(
                ProviderKind::BackboneMap,
                cells * cfg.backbone_dim,
                cfg.seed,
            )),
            appearance: Arc::new(StubProvider::new(ProviderKind::NodeAppearance, cfg.node_dim, cfg.seed)),
            backbone_cells: cells,
            backbone_dim: cfg.backbone_dim,
            keys: CategoryKeys::default(),
        }
    }

    /// Stubs, with any configured file replacing the matching stub.
    pub fn from_config(cfg: &ProviderConfig, base: &Path) -> Result<Self> {
        let mut set = Self::stub(cfg);
        let resolve = |p: &String| base.join(p);
        if let Some(p) = &cfg.visual_file {
            set.visual = Arc::new(FileProvider::load(&resolve(p), ProviderKind::VisualImage, cfg.visual_dim)?);
        }
        if let Some(p) = &cfg.text_file {
            set.text = Arc::new(FileProvider::load(&resolve(p), ProviderKind::TextCategory, cfg.text_dim)?);
        }
        if let Some(p) = &cfg.backbone_file {
            set.backbone = Arc::new(FileProvider::load(
                &resolve(p),
                ProviderKind::BackboneMap,
                set.backbone_cells * cfg.backbone_dim,
            )?);
        }
        if let Some(p) = &cfg.appearance_file {
            set.appearance = Arc::new(FileProvider::load(&resolve(p), ProviderKind::NodeAppearance, cfg.node_dim)?);
        }
        if let Some(p) = &cfg.category_keys {
            let text = std::fs::read_to_string(resolve(p))?;
            set.keys = serde_json::from_str(&text).map_err(|e| Error::Parse {
                index: 0,
                message: e.to_string(),
            })?;
        }
        Ok(set)
    }

    pub fn visual_embedding(&self, image_key: &str) -> Result<Vec<f64>> {
        self.visual.lookup(image_key)
    }

    pub fn text_embedding(&self, prompt: &str) -> Result<Vec<f64>> {
        self.text.lookup(prompt)
    }

    /// Embedding of the category prompt, or of the manifest key if one is
    /// configured for the category.
    pub fn category_text(&self, registry: &Registry, category: usize) -> Result<Vec<f64>> {
        let name = registry.category_name(category)?;
        match self.keys.category.get(name) {
            Some(key) => self.text.lookup(key),
            None => self.text.lookup(&category_prompt(registry, name)?),
        }
    }

    pub fn interaction_text(&self, registry: &Registry, category: usize) -> Result<Vec<f64>> {
        let name = registry.category_name(category)?;
        match self.keys.interaction.get(name) {
            Some(key) => self.text.lookup(key),
            None => self.text.lookup(&interaction_prompt(registry, name)?),
        }
    }

    /// `cells x backbone_dim` feature map.
    pub fn backbone_map(&self, image_key: &str) -> Result<Mat> {
        let flat = self.backbone.lookup(image_key)?;
        Mat::from_shape_vec((self.backbone_cells, self.backbone_dim), flat)
            .map_err(|e| Error::InvalidConfig(format!("backbone map for `{image_key}`: {e}")))
    }

    /// Appearance of detection `det_index` under the scene's per-detection
    /// keys.
    pub fn node_appearance(&self, keys: &[String], det_index: usize) -> Result<Vec<f64>> {
        match keys.get(det_index) {
            Some(key) => self.appearance.lookup(key),
            None => Err(Error::MissingEmbedding(format!("appearance key of detection {det_index}"))),
        }
    }
}

/// Default per-detection appearance key, `<image>#<index>`.
pub fn appearance_key(image_key: &str, det_index: usize) -> String {
    format!("{image_key}#{det_index}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub enabled: bool,
    pub rho_init: f64,
    pub rho_trainable: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rho_init: 0.5,
            rho_trainable: true,
        }
    }
}

/// Bottleneck adapter `rho * up(relu(down(e))) + (1 - rho) * e` with a
/// `dim -> dim / 4 -> dim` bottleneck.
pub fn register_adapter(store: &mut ParameterStore, name: &str, dim: usize, cfg: &AdapterConfig) -> Result<()> {
    let hidden = (dim / 4).max(1);
    nn::register_linear(store, &format!("{name}.down"), dim, hidden)?;
    nn::register_linear(store, &format!("{name}.up"), hidden, dim)?;
    let rho = format!("{name}.rho");
    store.register(&rho, 1, 1, Init::Constant(cfg.rho_init))?;
    store.set_trainable(&rho, cfg.rho_trainable)
}

pub fn apply_adapter<'s>(t: &mut Tape<'s>, store: &'s ParameterStore, name: &str, e: Var) -> Result<Var> {
    let h = nn::linear(t, store, &format!("{name}.down"), e)?;
    let h = t.relu(h);
    let up = nn::linear(t, store, &format!("{name}.up"), h)?;
    let rho = t.param(store, &format!("{name}.rho"))?;
    t.mix(up, e, rho)
}
