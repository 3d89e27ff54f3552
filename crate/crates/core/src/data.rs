//! Scene records, the line-delimited dataset and prediction files, and the
//! HICO-DET-style annotation converter.
//!
//! Datasets and prediction files are UTF-8 JSON lines. Line 0 is a header
//! carrying the format name and version; every following line is one
//! record. Parse errors report the zero-based line index, so the header is
//! record 0 and the first scene is record 1.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::decoder::{optional_box, HoiPrediction};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection, DetectionSet};
use crate::providers::{appearance_key, filter_detections, DetectionPolicy};
use crate::registry::Registry;

pub const DATASET_FORMAT: &str = "mgnm-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const PREDICTIONS_FORMAT: &str = "mgnm-predictions";
pub const PREDICTIONS_VERSION: u32 = 1;

/// One ground-truth `<human, action, object>` triplet of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiAnnotation {
    pub human_box: BBox,
    /// `None` when the object is not visible (serialized as the zero box).
    #[serde(with = "optional_box")]
    pub object_box: Option<BBox>,
    pub object_category: usize,
    pub action: usize,
}

/// Detector output and annotations for one image. Image-level embeddings
/// are looked up under `feature_key` if set, else `image_key`; node
/// appearance under `appearance_keys[i]` for detection `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub image_key: String,
    pub width: f64,
    pub height: f64,
    pub detections: Vec<Detection>,
    pub appearance_keys: Vec<String>,
    pub annotations: Vec<HoiAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_key: Option<String>,
}

impl SceneRecord {
    /// `<image>#<index>` keys, one per detection.
    pub fn default_appearance_keys(image_key: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| appearance_key(image_key, i)).collect()
    }

    pub fn filtered(&self, policy: &DetectionPolicy) -> DetectionSet {
        filter_detections(&self.detections, self.width, self.height, policy)
    }

    fn validate(&self, registry: &Registry) -> Result<()> {
        if self.appearance_keys.len() != self.detections.len() {
            return Err(Error::InvalidConfig(format!(
                "{}: {} appearance keys for {} detections",
                self.image_key,
                self.appearance_keys.len(),
                self.detections.len()
            )));
        }
        for (i, d) in self.detections.iter().enumerate() {
            if d.id != i {
                return Err(Error::InvalidConfig(format!(
                    "{}: detection {i} carries id {}",
                    self.image_key, d.id
                )));
            }
            registry.check_category(d.category)?;
        }
        for a in &self.annotations {
            registry.check_category(a.object_category)?;
            registry.check_action(a.action)?;
            if registry.class_of(a.action, a.object_category).is_none() {
                return Err(Error::InvalidConfig(format!(
                    "{}: ({}, {}) is not a registered HOI class",
                    self.image_key, a.action, a.object_category
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub registry: Registry,
    /// Seed of the stub providers the scenes were generated against.
    pub provider_seed: u64,
    /// Free-form origin tag, e.g. the synthetic task name.
    pub source: String,
    pub train: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    source: String,
    provider_seed: u64,
    registry: Registry,
    train: usize,
    test: usize,
}

#[derive(Serialize, Deserialize)]
struct DatasetLine<R> {
    split: Split,
    scene: R,
}

impl Dataset {
    pub fn scenes(&self, split: Split) -> &[SceneRecord] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in self.train.iter().chain(&self.test) {
            s.validate(&self.registry)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            source: self.source.clone(),
            provider_seed: self.provider_seed,
            registry: self.registry.clone(),
            train: self.train.len(),
            test: self.test.len(),
        };
        write_line(w, &header)?;
        for (split, scenes) in [(Split::Train, &self.train), (Split::Test, &self.test)] {
            for scene in scenes {
                write_line(w, &DatasetLine { split, scene })?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let header: DatasetHeader = match lines.next() {
            Some((i, line)) => parse_line(i, &line?)?,
            None => return Err(parse_err(0, "empty dataset file")),
        };
        check_format(&header.format, DATASET_FORMAT, header.version, DATASET_VERSION)?;
        let mut registry = header.registry;
        registry.rebuild()?;

        let mut train = Vec::with_capacity(header.train);
        let mut test = Vec::with_capacity(header.test);
        let mut last = 0;
        for (i, line) in lines {
            last = i;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DatasetLine<SceneRecord> = parse_line(i, &line)?;
            rec.scene
                .validate(&registry)
                .map_err(|e| parse_err(i, &e.to_string()))?;
            match rec.split {
                Split::Train => train.push(rec.scene),
                Split::Test => test.push(rec.scene),
            }
        }
        if train.len() != header.train || test.len() != header.test {
            return Err(parse_err(
                last + 1,
                &format!(
                    "truncated: header announces {}+{} scenes, found {}+{}",
                    header.train,
                    header.test,
                    train.len(),
                    test.len()
                ),
            ));
        }
        Ok(Self {
            registry,
            provider_seed: header.provider_seed,
            source: header.source,
            train,
            test,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionsHeader {
    format: String,
    version: u32,
    count: usize,
}

pub fn save_predictions(path: &Path, preds: &[HoiPrediction]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_predictions(&mut w, preds)?;
    w.flush()?;
    Ok(())
}

pub fn write_predictions<W: Write>(w: &mut W, preds: &[HoiPrediction]) -> Result<()> {
    write_line(
        w,
        &PredictionsHeader {
            format: PREDICTIONS_FORMAT.into(),
            version: PREDICTIONS_VERSION,
            count: preds.len(),
        },
    )?;
    for p in preds {
        write_line(w, p)?;
    }
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<HoiPrediction>> {
    read_predictions(BufReader::new(File::open(path)?))
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<HoiPrediction>> {
    let mut lines = r.lines().enumerate();
    let header: PredictionsHeader = match lines.next() {
        Some((i, line)) => parse_line(i, &line?)?,
        None => return Err(parse_err(0, "empty predictions file")),
    };
    check_format(&header.format, PREDICTIONS_FORMAT, header.version, PREDICTIONS_VERSION)?;
    let mut out = Vec::with_capacity(header.count);
    for (i, line) in lines {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(parse_line(i, &line)?);
        }
    }
    if out.len() != header.count {
        return Err(parse_err(
            out.len() + 1,
            &format!("truncated: expected {} predictions, found {}", header.count, out.len()),
        ));
    }
    Ok(out)
}

pub(crate) fn write_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn parse_line<T: DeserializeOwned>(index: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| parse_err(index, &e.to_string()))
}

fn parse_err(index: usize, message: &str) -> Error {
    Error::Parse {
        index,
        message: message.to_string(),
    }
}

fn check_format(found: &str, expected: &str, version: u32, supported: u32) -> Result<()> {
    if found != expected {
        return Err(parse_err(0, &format!("format `{found}`, expected `{expected}`")));
    }
    if version != supported {
        return Err(Error::Version {
            found: version,
            expected: supported,
        });
    }
    Ok(())
}

/// Entry of an id table in a HICO-DET-style annotation file.
#[derive(Debug, Clone, Deserialize)]
pub struct NamedId {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct HicoBox {
    pub bbox: [f64; 4],
    pub category_id: usize,
}

#[derive(Debug, Clone, Deserialize)]
pub struct HicoInteraction {
    pub subject_id: usize,
    pub object_id: usize,
    /// Verb id; `object_id` of -1 style missing objects are not supported
    /// by this layout.
    pub category_id: usize,
}

#[derive(Debug, Clone, Deserialize)]
pub struct HicoImage {
    pub file_name: String,
    pub width: f64,
    pub height: f64,
    pub annotations: Vec<HicoBox>,
    pub hoi_annotation: Vec<HicoInteraction>,
}

/// The subset of the common JSON release of HICO-DET annotations this
/// converter reads: object and verb id tables plus per-image boxes and
/// subject/object/verb triplets. Ids in the file are arbitrary and are
/// remapped to dense registry ids in table order.
#[derive(Debug, Clone, Deserialize)]
pub struct HicoAnnotationFile {
    pub objects: Vec<NamedId>,
    pub verbs: Vec<NamedId>,
    /// Valid `(verb id, object id)` combinations in file ids.
    pub hoi_classes: Vec<(usize, usize)>,
    pub images: Vec<HicoImage>,
}

/// Converts annotation records into scenes whose detections are the
/// annotated boxes with unit confidence. Any id outside the tables fails.
pub fn convert_hico(file: &HicoAnnotationFile) -> Result<(Registry, Vec<SceneRecord>)> {
    let object_ids: HashMap<usize, usize> = file.objects.iter().enumerate().map(|(i, o)| (o.id, i)).collect();
    let verb_ids: HashMap<usize, usize> = file.verbs.iter().enumerate().map(|(i, v)| (v.id, i)).collect();
    let object = |id| {
        object_ids.get(&id).copied().ok_or(Error::UnknownId {
            registry: "category",
            id,
        })
    };
    let verb = |id| verb_ids.get(&id).copied().ok_or(Error::UnknownId { registry: "action", id });

    let classes = file
        .hoi_classes
        .iter()
        .map(|&(v, o)| Ok((verb(v)?, object(o)?)))
        .collect::<Result<Vec<_>>>()?;
    let registry = Registry::new(
        file.objects.iter().map(|o| o.name.clone()).collect(),
        file.verbs.iter().map(|v| v.name.clone()).collect(),
        classes,
    )?;

    let mut scenes = Vec::with_capacity(file.images.len());
    for (index, img) in file.images.iter().enumerate() {
        let wrap = |e: Error| parse_err(index, &format!("{}: {e}", img.file_name));
        let mut detections = Vec::with_capacity(img.annotations.len());
        for (i, b) in img.annotations.iter().enumerate() {
            let [x1, y1, x2, y2] = b.bbox;
            detections.push(Detection {
                id: i,
                bbox: BBox::new(x1, y1, x2, y2).map_err(wrap)?,
                category: object(b.category_id).map_err(wrap)?,
                score: 1.0,
            });
        }
        let mut annotations = Vec::with_capacity(img.hoi_annotation.len());
        for h in &img.hoi_annotation {
            let box_at = |i: usize| {
                detections
                    .get(i)
                    .ok_or(Error::UnknownId { registry: "box", id: i })
                    .map_err(wrap)
            };
            let subject = box_at(h.subject_id)?;
            let obj = box_at(h.object_id)?;
            if !subject.is_person() {
                return Err(wrap(Error::InvalidConfig(format!(
                    "subject {} is not a person",
                    h.subject_id
                ))));
            }
            let action = verb(h.category_id).map_err(wrap)?;
            if registry.class_of(action, obj.category).is_none() {
                return Err(wrap(Error::InvalidConfig(format!(
                    "verb {} with object category {} is not a registered HOI class",
                    h.category_id, file.objects[obj.category].id
                ))));
            }
            annotations.push(HoiAnnotation {
                human_box: subject.bbox,
                object_box: Some(obj.bbox),
                object_category: obj.category,
                action,
            });
        }
        let key = img.file_name.rsplit_once('.').map_or(img.file_name.as_str(), |(stem, _)| stem);
        scenes.push(SceneRecord {
            image_key: key.to_string(),
            width: img.width,
            height: img.height,
            appearance_keys: SceneRecord::default_appearance_keys(key, detections.len()),
            detections,
            annotations,
            feature_key: None,
        });
    }
    Ok((registry, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn dataset() -> Dataset {
        let registry = Registry::dense(vec!["person".into(), "cup".into()], vec!["hold".into(), "look".into()]).unwrap();
        let scene = |key: &str| SceneRecord {
            image_key: key.into(),
            width: 64.0,
            height: 48.0,
            detections: vec![
                Detection {
                    id: 0,
                    bbox: bx(1.0, 2.0, 20.0, 40.0),
                    category: 0,
                    score: 0.9,
                },
                Detection {
                    id: 1,
                    bbox: bx(15.0, 20.0, 30.0, 35.5),
                    category: 1,
                    score: 0.7123456789,
                },
            ],
            appearance_keys: SceneRecord::default_appearance_keys(key, 2),
            annotations: vec![HoiAnnotation {
                human_box: bx(1.0, 2.0, 20.0, 40.0),
                object_box: Some(bx(15.0, 20.0, 30.0, 35.5)),
                object_category: 1,
                action: 0,
            }],
            feature_key: (key == "b").then(|| "shared".to_string()),
        };
        Dataset {
            registry,
            provider_seed: 3,
            source: "test".into(),
            train: vec![scene("a"), scene("b")],
            test: vec![scene("c")],
        }
    }

    fn encode(d: &Dataset) -> Vec<u8> {
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        buf
    }

    #[test]
    fn dataset_roundtrip() {
        let d = dataset();
        let back = Dataset::read_from(&encode(&d)[..]).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn truncated_dataset_is_a_parse_error() {
        let buf = encode(&dataset());
        let text = String::from_utf8(buf).unwrap();
        // drop the last line entirely
        let cut = text.trim_end().rfind('\n').unwrap() + 1;
        let err = Dataset::read_from(text[..cut].as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { index: 3, .. }), "{err}");
        // cut inside a record
        let err = Dataset::read_from(text[..cut + 10].as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { index: 3, .. }), "{err}");
    }

    #[test]
    fn unknown_version_is_rejected() {
        let text = String::from_utf8(encode(&dataset())).unwrap();
        let text = text.replacen("\"version\":1", "\"version\":9", 1);
        let err = Dataset::read_from(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Version { found: 9, expected: 1 }));
    }

    #[test]
    fn unregistered_category_fails_at_load() {
        let text = String::from_utf8(encode(&dataset())).unwrap();
        let text = text.replacen("\"category\":1", "\"category\":7", 1);
        let err = Dataset::read_from(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { index: 1, .. }), "{err}");
    }

    #[test]
    fn predictions_roundtrip() {
        let p = HoiPrediction {
            image_key: "a".into(),
            human_box: bx(0.0, 0.0, 1.0, 1.0),
            object_box: None,
            object_category: 0,
            action: 1,
            score: 0.25,
            logit: -1.0986122886681098,
            human_score: 0.5,
            object_score: 1.0,
            action_prob: 0.25,
        };
        let mut buf = Vec::new();
        write_predictions(&mut buf, &[p.clone(), p.clone()]).unwrap();
        assert_eq!(read_predictions(&buf[..]).unwrap(), vec![p.clone(), p]);
        let err = read_predictions(&buf[..buf.len() - 5]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }
}
