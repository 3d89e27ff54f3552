//! Box algebra, human-object pair enumeration and handcrafted spatial
//! features.

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};

/// Category id reserved for people.
pub const PERSON: usize = 0;

/// Length of the spatial feature vector of one pair.
pub const SPATIAL_DIM: usize = 36;

/// Offset inside every logarithm of the spatial features.
pub const LOG_EPS: f64 = 1e-6;

/// Axis-aligned box in absolute pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 < 0.0 || y1 < 0.0 || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Clamps raw coordinates into `[0, width] x [0, height]`. The flag
    /// reports whether any coordinate moved.
    pub fn clamped(x1: f64, y1: f64, x2: f64, y2: f64, width: f64, height: f64) -> Result<(Self, bool)> {
        let c = |v: f64, hi: f64| v.clamp(0.0, hi);
        let (cx1, cy1, cx2, cy2) = (c(x1, width), c(y1, height), c(x2, width), c(y2, height));
        let moved = (cx1, cy1, cx2, cy2) != (x1, y1, x2, y2);
        Ok((Self::new(cx1, cy1, cx2, cy2)?, moved))
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Smallest box enclosing both.
    pub fn enclosing(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Result<BBox> {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union; symmetric and in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    // Union computed from the sorted pair keeps the result bit-symmetric.
    let (lo, hi) = if a.area() <= b.area() {
        (a.area(), b.area())
    } else {
        (b.area(), a.area())
    };
    (inter / (lo + hi - inter)).clamp(0.0, 1.0)
}

/// The 36-slot spatial encoding of a human-object pair.
///
/// | slots | content |
/// |-------|---------|
/// | 0-3   | human centre x, centre y, width, height over image size |
/// | 4-7   | object centre x, centre y, width, height over image size |
/// | 8-11  | human x1, y1, x2, y2 over image size |
/// | 12-15 | object x1, y1, x2, y2 over image size |
/// | 16-17 | human, object area over image area |
/// | 18-19 | human, object aspect ratio (w / h) |
/// | 20    | IoU |
/// | 21-22 | object centre minus human centre, over image width / height |
/// | 23-25 | ln of object/human width, height, area ratios |
/// | 26-30 | enclosing box x1, y1, x2, y2 over image size, its area over image area |
/// | 31-32 | intersection over human area, over object area |
/// | 33-35 | ln(x + eps) of slots 16, 17 and 30 |
pub fn spatial_features(h: &BBox, o: &BBox, image_w: f64, image_h: f64) -> [f64; SPATIAL_DIM] {
    let mut f = [0.0; SPATIAL_DIM];
    let img_area = image_w * image_h;
    let (hcx, hcy) = h.center();
    let (ocx, ocy) = o.center();

    f[0] = hcx / image_w;
    f[1] = hcy / image_h;
    f[2] = h.width() / image_w;
    f[3] = h.height() / image_h;
    f[4] = ocx / image_w;
    f[5] = ocy / image_h;
    f[6] = o.width() / image_w;
    f[7] = o.height() / image_h;

    f[8] = h.x1 / image_w;
    f[9] = h.y1 / image_h;
    f[10] = h.x2 / image_w;
    f[11] = h.y2 / image_h;
    f[12] = o.x1 / image_w;
    f[13] = o.y1 / image_h;
    f[14] = o.x2 / image_w;
    f[15] = o.y2 / image_h;

    f[16] = h.area() / img_area;
    f[17] = o.area() / img_area;
    f[18] = h.width() / h.height();
    f[19] = o.width() / o.height();
    f[20] = iou(h, o);
    f[21] = (ocx - hcx) / image_w;
    f[22] = (ocy - hcy) / image_h;

    let log_ratio = |num: f64, den: f64| ((num + LOG_EPS) / (den + LOG_EPS)).ln();
    f[23] = log_ratio(o.width(), h.width());
    f[24] = log_ratio(o.height(), h.height());
    f[25] = log_ratio(o.area(), h.area());

    let u = h.enclosing(o);
    f[26] = u.x1 / image_w;
    f[27] = u.y1 / image_h;
    f[28] = u.x2 / image_w;
    f[29] = u.y2 / image_h;
    f[30] = u.area() / img_area;

    let inter = h.intersection_area(o);
    f[31] = inter / h.area();
    f[32] = inter / o.area();

    f[33] = (f[16] + LOG_EPS).ln();
    f[34] = (f[17] + LOG_EPS).ln();
    f[35] = (f[30] + LOG_EPS).ln();
    f
}

/// Output of the frozen detector for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Index of the detection in its scene record; keys appearance lookups.
    pub id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
}

impl Detection {
    pub fn is_person(&self) -> bool {
        self.category == PERSON
    }
}

/// Detections of one image after filtering; graph nodes follow this order.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub image_width: f64,
    pub image_height: f64,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn num_persons(&self) -> usize {
        self.detections.iter().filter(|d| d.is_person()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairPolicy {
    /// Persons may be the object of another person's pair.
    pub persons_as_objects: bool,
}

impl Default for PairPolicy {
    fn default() -> Self {
        Self {
            persons_as_objects: true,
        }
    }
}

/// Human-object pairs over the nodes of a [`DetectionSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairTable {
    /// `(human node, object node)` per pair.
    pub pairs: Vec<(usize, usize)>,
    /// One spatial feature row per pair.
    pub spatial: Mat,
    /// Pair indices incident to each node, in either role.
    pub incident: Vec<Vec<usize>>,
}

impl PairTable {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.incident.len()
    }

    pub fn human_index(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn object_index(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    /// Builds a table from explicit pairs, computing spatial rows and the
    /// incidence map.
    pub fn from_pairs(dets: &DetectionSet, pairs: Vec<(usize, usize)>) -> Self {
        let mut spatial = Mat::zeros((pairs.len(), SPATIAL_DIM));
        let mut incident = vec![Vec::new(); dets.len()];
        for (p, &(h, o)) in pairs.iter().enumerate() {
            let row = spatial_features(
                &dets.detections[h].bbox,
                &dets.detections[o].bbox,
                dets.image_width,
                dets.image_height,
            );
            spatial.row_mut(p).assign(&ndarray::ArrayView1::from(&row[..]));
            incident[h].push(p);
            incident[o].push(p);
        }
        Self {
            pairs,
            spatial,
            incident,
        }
    }
}

/// One pair per (person, other detection) in input order. Objects that are
/// themselves persons are included when the policy allows it.
pub fn enumerate_pairs(dets: &DetectionSet, policy: PairPolicy) -> Result<PairTable> {
    let mut pairs = Vec::new();
    for (h, hd) in dets.detections.iter().enumerate() {
        if !hd.is_person() {
            continue;
        }
        for (o, od) in dets.detections.iter().enumerate() {
            if o == h || (od.is_person() && !policy.persons_as_objects) {
                continue;
            }
            pairs.push((h, o));
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyPairSet);
    }
    Ok(PairTable::from_pairs(dets, pairs))
}
