//! Clips, detections and annotations, plus the seeded synthetic world that
//! acts as ground truth for every downstream experiment.

mod attention;
mod generate;
mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use attention::{synthesize_attention, AttentionStyle};
pub use generate::{clip_seed, generate_attention, generate_clip, generate_split, GenConfig, Split};
pub use io::{read_split, write_clip, AttentionKey, ClipRecord};

/// Side length of the square virtual image, in pixels.
pub const IMAGE_SIZE: f64 = 512.0;

/// Category index of the person class.
pub const PERSON_CLASS: usize = 0;

/// Axis-aligned box in image pixels. Serialized as `[x1, y1, x2, y2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite() && *v >= 0.0) || x1 >= x2 || y1 >= y2 {
            return Err(Error::Data(format!("invalid box {:?}", [x1, y1, x2, y2])));
        }
        Ok(b)
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
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub id: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub confidence: f64,
    pub feature: Vec<f64>,
}

/// Class-level triplet without localization. Serialized as `[s, p, o]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct UnlocalizedTriplet {
    pub subject_class: usize,
    pub predicate_id: usize,
    pub object_class: usize,
}

impl From<[usize; 3]> for UnlocalizedTriplet {
    fn from(v: [usize; 3]) -> Self {
        Self {
            subject_class: v[0],
            predicate_id: v[1],
            object_class: v[2],
        }
    }
}

impl From<UnlocalizedTriplet> for [usize; 3] {
    fn from(t: UnlocalizedTriplet) -> Self {
        [t.subject_class, t.predicate_id, t.object_class]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassedBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
}

/// Localized ground-truth triplet (generated data only).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthTriplet {
    pub subject: ClassedBox,
    pub predicate_id: usize,
    pub object: ClassedBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frame {
    pub t: usize,
    pub detections: Vec<Detection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_gt: Option<Vec<GroundTruthTriplet>>,
}

impl Frame {
    pub fn detection(&self, id: u32) -> Option<&Detection> {
        self.detections.iter().find(|d| d.id == id)
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.detections.iter().position(|d| d.id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoClip {
    pub clip_id: String,
    pub frames: Vec<Frame>,
    pub middle_index: usize,
    pub annotations: Vec<UnlocalizedTriplet>,
}

impl VideoClip {
    pub fn middle_frame(&self) -> &Frame {
        &self.frames[self.middle_index]
    }

    /// Structural checks: frame order, middle index, unique detection ids,
    /// box validity and confidence range.
    pub fn validate(&self) -> Result<()> {
        if self.middle_index >= self.frames.len() {
            return Err(Error::Data(format!(
                "{}: middle_index {} out of {} frames",
                self.clip_id,
                self.middle_index,
                self.frames.len()
            )));
        }
        for frame in &self.frames {
            let mut ids: Vec<u32> = frame.detections.iter().map(|d| d.id).collect();
            ids.sort_unstable();
            if ids.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Data(format!(
                    "{}: duplicate detection id in frame {}",
                    self.clip_id, frame.t
                )));
            }
            for d in &frame.detections {
                if !(d.confidence > 0.0 && d.confidence <= 1.0) {
                    return Err(Error::Data(format!(
                        "{}: detection {} confidence {} outside (0, 1]",
                        self.clip_id, d.id, d.confidence
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Which entity of a triplet an attention map refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntitySide {
    Subject,
    Object,
}

impl EntitySide {
    pub fn as_str(&self) -> &'static str {
        match self {
            EntitySide::Subject => "subject",
            EntitySide::Object => "object",
        }
    }

    pub fn class_of(&self, t: &UnlocalizedTriplet) -> usize {
        match self {
            EntitySide::Subject => t.subject_class,
            EntitySide::Object => t.object_class,
        }
    }
}

/// Non-negative `height x width` grid, row-major. JSON: `{h, w, values}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionMap {
    #[serde(rename = "h")]
    pub height: usize,
    #[serde(rename = "w")]
    pub width: usize,
    pub values: Vec<f64>,
}

impl AttentionMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let map = Self { height, width, values };
        map.validate()?;
        Ok(map)
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            values: vec![1.0 / n as f64; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.values.len() != self.height * self.width {
            return Err(Error::Data(format!(
                "attention map {}x{} with {} values",
                self.height,
                self.width,
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data("attention map has negative or non-finite cells".into()));
        }
        Ok(())
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Pixel width and height of one cell.
    pub fn cell_size(&self) -> (f64, f64) {
        (IMAGE_SIZE / self.width as f64, IMAGE_SIZE / self.height as f64)
    }

    /// Row and column ranges of the cells whose centers fall inside `b`
    /// (half-open on the far edges, so abutting boxes never share a cell).
    pub fn box_cells(&self, b: &BoundingBox) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (cw, ch) = self.cell_size();
        let span = |lo: f64, hi: f64, cell: f64, n: usize| {
            let start = ((lo / cell - 0.5).ceil().max(0.0) as usize).min(n);
            let end = ((hi / cell - 0.5).ceil().max(0.0) as usize).min(n);
            start..end.max(start)
        };
        (span(b.y1, b.y2, ch, self.height), span(b.x1, b.x2, cw, self.width))
    }

    pub fn cell_count(&self, b: &BoundingBox) -> usize {
        let (rows, cols) = self.box_cells(b);
        rows.len() * cols.len()
    }

    /// Sum of values over the cells of `b`.
    pub fn mass_in(&self, b: &BoundingBox) -> f64 {
        let (rows, cols) = self.box_cells(b);
        rows.map(|r| self.values[r * self.width + cols.start..r * self.width + cols.end].iter().sum::<f64>())
            .sum()
    }

    /// Index of the largest cell as `(row, col)`; first occurrence on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }
}
