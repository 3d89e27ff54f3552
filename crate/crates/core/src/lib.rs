//! Two-stage human-object interaction detection on top of a multimodal
//! graph network.
//!
//! A frozen detector (or a stub) yields boxes; persons are paired with every
//! other detection; the graph refines per-pair features with spatial,
//! visual, textual and interaction cues; a cross-attention decoder over the
//! backbone map produces per-action logits that are scored into
//! `<human, action, object>` triplets and evaluated with HICO-DET / V-COCO
//! style mAP.

pub mod autograd;
pub mod data;
pub mod decoder;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod graph;
pub mod hashing;
pub mod model;
pub mod nn;
pub mod par;
pub mod providers;
pub mod registry;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
