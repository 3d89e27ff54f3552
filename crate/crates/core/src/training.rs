//! Target assignment, the focal objective, AdamW, and the seeded epoch loop
//! with per-epoch checkpoints and exact resume.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{focal_loss_value, Mat, Tape};
use crate::data::{HoiAnnotation, SceneRecord};
use crate::error::{Error, Result};
use crate::geometry::{iou, DetectionSet, PairTable};
use crate::hashing::keyed_rng;
use crate::model::{self, ForwardOptions, ModelConfig, SceneInputs};
use crate::nn::checkpoint::{Checkpoint, Dtype, Moments};
use crate::nn::ParameterStore;
use crate::par;
use crate::providers::ProviderSet;
use crate::registry::Registry;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MOMENTS_FILE: &str = "optimizer.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Evaluate every this many epochs (0: only after the last epoch).
    pub eval_every: usize,
    /// Optional step drop `(epoch, factor)`: lr is multiplied by `factor`
    /// from that epoch on.
    pub lr_drop: Option<(usize, f64)>,
    /// Worker threads for per-image passes; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 200,
            batch_size: 8,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            clip_norm: 0.1,
            eval_every: 0,
            lr_drop: None,
            threads: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return bad("focal alpha must lie in (0, 1)");
        }
        if !(self.focal_gamma >= 0.0) {
            return bad("focal gamma must be non-negative");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) || !(self.eps > 0.0) {
            return bad("weight decay, clip norm and eps must be non-negative");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_drop {
            Some((at, factor)) if epoch >= at => self.lr * factor,
            _ => self.lr,
        }
    }
}

/// `target[p, a] = 1` iff some annotation with action `a` and the pair's
/// object category overlaps the pair's human and object boxes with IoU
/// above `iou_thresh` each. Annotations without an object box never match.
pub fn build_targets(
    table: &PairTable,
    dets: &DetectionSet,
    gts: &[HoiAnnotation],
    num_actions: usize,
    iou_thresh: f64,
) -> Result<Mat> {
    let mut t = Mat::zeros((table.len(), num_actions));
    for gt in gts {
        if gt.action >= num_actions {
            return Err(Error::UnknownId {
                registry: "action",
                id: gt.action,
            });
        }
        let Some(gt_o) = gt.object_box else {
            continue;
        };
        for (p, &(h, o)) in table.pairs.iter().enumerate() {
            let hd = &dets.detections[h];
            let od = &dets.detections[o];
            if od.category == gt.object_category
                && iou(&hd.bbox, &gt.human_box) > iou_thresh
                && iou(&od.bbox, &gt_o) > iou_thresh
            {
                t[[p, gt.action]] = 1.0;
            }
        }
    }
    Ok(t)
}

/// Mean focal loss over all entries.
pub fn focal_loss(logits: &Mat, targets: &Mat, alpha: f64, gamma: f64) -> Result<f64> {
    if logits.dim() != targets.dim() {
        return Err(crate::error::shape_err("focal_loss", targets.dim(), logits.dim()));
    }
    Ok(focal_loss_value(logits, targets, alpha, gamma))
}

/// AdamW with bias-corrected moments and weight decay applied to the
/// parameters directly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    moments: BTreeMap<String, (Mat, Mat)>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    /// One update of every trainable tensor. Each needs an entry in
    /// `grads`; frozen tensors are skipped.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &BTreeMap<String, Mat>, lr: f64) -> Result<()> {
        for (name, p) in store.iter() {
            if p.trainable && !grads.contains_key(name) {
                return Err(Error::MissingGradient(name.to_string()));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let decay = 1.0 - lr * self.weight_decay;
        for (name, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let g = &grads[name];
            if g.dim() != p.value.dim() {
                return Err(crate::error::shape_err(name, p.value.dim(), g.dim()));
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Mat::zeros(g.raw_dim()), Mat::zeros(g.raw_dim())));
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }

    pub fn to_moments(&self, epoch: u64) -> Moments {
        Moments {
            step: self.step,
            epoch,
            tensors: self
                .moments
                .iter()
                .map(|(k, (m, v))| (k.clone(), m.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn restore(&mut self, moments: &Moments) {
        self.step = moments.step;
        self.moments = moments
            .tensors
            .iter()
            .map(|(k, m, v)| (k.clone(), (m.clone(), v.clone())))
            .collect();
    }
}

/// A scene with frozen inputs and its target matrix, built once.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub inputs: SceneInputs,
    pub targets: Mat,
}

/// Filters detections, enumerates pairs and looks up provider features for
/// every scene. Scenes without a single pair are dropped.
pub fn prepare_scenes(
    scenes: &[SceneRecord],
    registry: &Registry,
    cfg: &ModelConfig,
    providers: &ProviderSet,
) -> Result<Vec<PreparedScene>> {
    let prepared = par::par_map(scenes, |s| -> Result<Option<PreparedScene>> {
        let Some(inputs) = model::scene_inputs(s, cfg, providers)? else {
            return Ok(None);
        };
        let targets = build_targets(&inputs.table, &inputs.dets, &s.annotations, registry.num_actions(), 0.5)?;
        Ok(Some(PreparedScene { inputs, targets }))
    });
    let mut out = Vec::with_capacity(prepared.len());
    for p in prepared {
        if let Some(p) = p? {
            out.push(p);
        }
    }
    Ok(out)
}

/// Loss and parameter gradients of one scene.
pub fn scene_gradients(
    store: &ParameterStore,
    cfg: &ModelConfig,
    scene: &PreparedScene,
    alpha: f64,
    gamma: f64,
) -> Result<(f64, BTreeMap<String, Mat>)> {
    let mut t = Tape::new();
    let out = model::forward(&mut t, store, cfg, &scene.inputs, ForwardOptions::default())?;
    let loss = t.focal_loss(out.logits, &scene.targets, alpha, gamma)?;
    let value = t.value(loss)[[0, 0]];
    Ok((value, t.backward(loss).into_params()))
}

/// Sums per-image gradients in input order into `store`'s gradient slots,
/// scaled by `1 / n`, and returns the trainable gradients. Tensors no image
/// touched get zeros.
fn reduce_gradients(store: &mut ParameterStore, per_image: &[BTreeMap<String, Mat>]) -> Result<()> {
    store.zero_grads();
    let scale = 1.0 / per_image.len() as f64;
    for g in per_image {
        for (name, grad) in g {
            let p = store.get_mut(name)?;
            if p.trainable {
                p.grad.scaled_add(scale, grad);
            }
        }
    }
    Ok(())
}

fn gradient_map(store: &ParameterStore) -> BTreeMap<String, Mat> {
    store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, p)| (n.to_string(), p.grad.clone()))
        .collect()
}

/// Image order of one epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = keyed_rng(seed, "shuffle", &epoch.to_string());
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Mean pre-clip gradient norm over the epoch's steps.
    pub grad_norm: f64,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<serde_json::Value>,
}

/// Where per-epoch state goes; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct RunDir {
    pub path: Option<PathBuf>,
}

impl RunDir {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: Some(path.into()),
        }
    }

    fn file(&self, name: &str) -> Option<PathBuf> {
        self.path.as_ref().map(|p| p.join(name))
    }
}

pub type EvalHook<'a> = dyn FnMut(usize, &ParameterStore) -> Result<serde_json::Value> + 'a;

pub struct Trainer<'a> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub store: ParameterStore,
    pub optimizer: AdamW,
    pub config_hash: String,
    /// Epochs completed so far.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
    run_dir: RunDir,
    eval: Option<Box<EvalHook<'a>>>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: ModelConfig, train: TrainConfig, store: ParameterStore, config_hash: String) -> Result<Self> {
        train.validate()?;
        model.validate()?;
        Ok(Self {
            optimizer: AdamW::from_config(&train),
            model,
            train,
            store,
            config_hash,
            epoch: 0,
            history: Vec::new(),
            run_dir: RunDir::default(),
            eval: None,
        })
    }

    pub fn with_run_dir(mut self, dir: RunDir) -> Result<Self> {
        if let Some(p) = &dir.path {
            fs::create_dir_all(p)?;
        }
        self.run_dir = dir;
        Ok(self)
    }

    pub fn with_eval(mut self, hook: Box<EvalHook<'a>>) -> Self {
        self.eval = Some(hook);
        self
    }

    /// Loads the checkpoint and optimizer sidecar of the run directory and
    /// continues after the epoch they were written at.
    pub fn resume(&mut self) -> Result<()> {
        let (Some(ck), Some(mo)) = (self.run_dir.file(CHECKPOINT_FILE), self.run_dir.file(MOMENTS_FILE)) else {
            return Err(Error::InvalidConfig("resume needs a run directory".into()));
        };
        self.resume_from(&ck, &mo)
    }

    pub fn resume_from(&mut self, checkpoint: &Path, moments: &Path) -> Result<()> {
        Checkpoint::load(checkpoint)?.apply(&mut self.store, &self.config_hash)?;
        let m = Moments::load(moments)?;
        self.optimizer.restore(&m);
        self.epoch = m.epoch as usize;
        if let Some(path) = self.run_dir.file(METRICS_FILE) {
            // drop log lines past the checkpoint
            if let Ok(text) = fs::read_to_string(&path) {
                let kept: Vec<&str> = text
                    .lines()
                    .filter(|l| {
                        serde_json::from_str::<EpochLog>(l).map_or(false, |e| e.epoch <= self.epoch)
                    })
                    .collect();
                self.history = kept.iter().filter_map(|l| serde_json::from_str(l).ok()).collect();
                let mut body = kept.join("\n");
                if !body.is_empty() {
                    body.push('\n');
                }
                fs::write(&path, body)?;
            }
        }
        Ok(())
    }

    /// Runs the remaining epochs.
    pub fn fit(&mut self, scenes: &[PreparedScene]) -> Result<&[EpochLog]> {
        self.fit_until(scenes, self.train.epochs)?;
        Ok(&self.history)
    }

    /// Runs epochs until `self.epoch == last` (1-based count).
    pub fn fit_until(&mut self, scenes: &[PreparedScene], last: usize) -> Result<()> {
        if scenes.is_empty() {
            return Err(Error::InvalidConfig("no training scenes".into()));
        }
        let pool = par::Pool::new(self.train.threads);
        while self.epoch < last.min(self.train.epochs) {
            let log = self.run_epoch(scenes, &pool)?;
            self.history.push(log);
        }
        Ok(())
    }

    fn run_epoch(&mut self, scenes: &[PreparedScene], pool: &par::Pool) -> Result<EpochLog> {
        let started = Instant::now();
        let epoch = self.epoch + 1;
        let lr = self.train.lr_at(epoch);
        let order = epoch_order(self.train.seed, epoch, scenes.len());
        let (alpha, gamma) = (self.train.focal_alpha, self.train.focal_gamma);
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(self.train.batch_size) {
            let store = &self.store;
            let model = &self.model;
            let results =
                pool.install(|| par::par_map(batch, |&i| scene_gradients(store, model, &scenes[i], alpha, gamma)));
            let mut losses = Vec::with_capacity(batch.len());
            let mut grads = Vec::with_capacity(batch.len());
            for r in results {
                let (l, g) = r?;
                losses.push(l);
                grads.push(g);
            }
            let loss = losses.iter().sum::<f64>() / losses.len() as f64;
            reduce_gradients(&mut self.store, &grads)?;
            let norm = if self.train.clip_norm > 0.0 {
                self.store.clip_grad_norm(self.train.clip_norm)
            } else {
                self.store.grad_norm()
            };
            if !loss.is_finite() || !norm.is_finite() {
                let step = self.optimizer.step as usize + 1;
                self.dump_diagnostics(epoch, step, batch, scenes, &losses, norm)?;
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            let g = gradient_map(&self.store);
            self.optimizer.step(&mut self.store, &g, lr)?;
            loss_sum += loss;
            norm_sum += norm;
            batches += 1;
        }
        self.epoch = epoch;

        let eval_now = epoch == self.train.epochs || (self.train.eval_every > 0 && epoch % self.train.eval_every == 0);
        let eval = match (&mut self.eval, eval_now) {
            (Some(hook), true) => Some(hook(epoch, &self.store)?),
            _ => None,
        };
        let log = EpochLog {
            epoch,
            step: self.optimizer.step,
            loss: loss_sum / batches as f64,
            lr,
            grad_norm: norm_sum / batches as f64,
            seconds: started.elapsed().as_secs_f64(),
            eval,
        };
        log::info!("epoch {epoch}: loss {:.6}", log.loss);
        self.persist(&log)?;
        Ok(log)
    }

    fn persist(&self, log: &EpochLog) -> Result<()> {
        let Some(dir) = &self.run_dir.path else {
            return Ok(());
        };
        // write-then-rename so a crash never leaves a torn checkpoint
        let ck = Checkpoint::from_store(&self.store, &self.config_hash, Dtype::F64);
        let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
        ck.save(&tmp)?;
        fs::rename(&tmp, dir.join(CHECKPOINT_FILE))?;
        let tmp = dir.join(format!("{MOMENTS_FILE}.tmp"));
        self.optimizer.to_moments(log.epoch as u64).save(&tmp)?;
        fs::rename(&tmp, dir.join(MOMENTS_FILE))?;

        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(METRICS_FILE))?;
        crate::data::write_line(&mut f, log)?;
        Ok(())
    }

    fn dump_diagnostics(
        &self,
        epoch: usize,
        step: usize,
        batch: &[usize],
        scenes: &[PreparedScene],
        losses: &[f64],
        grad_norm: f64,
    ) -> Result<()> {
        let report = serde_json::json!({
            "epoch": epoch,
            "step": step,
            "grad_norm": format!("{grad_norm}"),
            "images": batch.iter().zip(losses).map(|(&i, l)| serde_json::json!({
                "image_key": scenes[i].inputs.image_key,
                "pairs": scenes[i].inputs.num_pairs(),
                "loss": format!("{l}"),
            })).collect::<Vec<_>>(),
            "non_finite_parameters": self.store.iter()
                .filter(|(_, p)| p.value.iter().any(|x| !x.is_finite()))
                .map(|(n, _)| n)
                .collect::<Vec<_>>(),
        });
        log::error!("non-finite loss at epoch {epoch}, step {step}: {report}");
        if let Some(path) = self.run_dir.file(DIAGNOSTICS_FILE) {
            let mut f = fs::File::create(path)?;
            writeln!(f, "{report:#}")?;
        }
        Ok(())
    }
}
