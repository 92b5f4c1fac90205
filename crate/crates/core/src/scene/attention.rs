//! Synthetic stand-ins for grounding-model cross-attention maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{iou, AttentionMap, BoundingBox, EntitySide, Frame, UnlocalizedTriplet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStyle {
    /// Cells per side.
    pub grid: usize,
    /// Bump std as a fraction of the box half-extent, in cells.
    pub sharpness: f64,
    /// Chance that one same-class distractor receives a full-strength bump.
    pub leak_prob: f64,
}

impl Default for AttentionStyle {
    fn default() -> Self {
        Self {
            grid: 32,
            sharpness: 0.5,
            leak_prob: 0.0,
        }
    }
}

/// Unit-mass Gaussian bump centered on `b`, in cell-index coordinates.
fn bump(grid: usize, b: &BoundingBox, sharpness: f64) -> Vec<f64> {
    let cell = super::IMAGE_SIZE / grid as f64;
    let (cx, cy) = b.center();
    let (mx, my) = (cx / cell - 0.5, cy / cell - 0.5);
    let sx = (sharpness * b.width() / cell / 2.0).max(0.35);
    let sy = (sharpness * b.height() / cell / 2.0).max(0.35);
    let mut out = vec![0.0; grid * grid];
    for r in 0..grid {
        let dy = (r as f64 - my) / sy;
        for c in 0..grid {
            let dx = (c as f64 - mx) / sx;
            out[r * grid + c] = (-0.5 * (dx * dx + dy * dy)).exp();
        }
    }
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        out.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Attention map for one entity of `triplet` on `frame`.
///
/// Targets are the oracle instances of the triplet; without oracle data every
/// detection of the entity class is a target. Other same-class detections
/// pick up `(1 - quality) / 2` weight each, and the remaining `1 - quality`
/// of the mass is spread uniformly. A class absent from the frame yields the
/// uniform map.
pub fn synthesize_attention(
    frame: &Frame,
    triplet: &UnlocalizedTriplet,
    side: EntitySide,
    quality: f64,
    style: &AttentionStyle,
    seed: u64,
) -> AttentionMap {
    let grid = style.grid.max(1);
    let q = quality.clamp(0.0, 1.0);
    let class = side.class_of(triplet);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut targets: Vec<BoundingBox> = frame
        .oracle_gt
        .iter()
        .flatten()
        .filter(|g| {
            g.subject.class_id == triplet.subject_class
                && g.object.class_id == triplet.object_class
                && g.predicate_id == triplet.predicate_id
        })
        .map(|g| match side {
            EntitySide::Subject => g.subject.bbox,
            EntitySide::Object => g.object.bbox,
        })
        .collect();
    targets.dedup();
    if targets.is_empty() {
        targets = frame
            .detections
            .iter()
            .filter(|d| d.class_id == class)
            .map(|d| d.bbox)
            .collect();
    }
    if targets.is_empty() {
        return AttentionMap::uniform(grid, grid);
    }
    let others: Vec<BoundingBox> = frame
        .detections
        .iter()
        .filter(|d| d.class_id == class && targets.iter().all(|t| iou(t, &d.bbox) < 0.5))
        .map(|d| d.bbox)
        .collect();

    let mut weighted: Vec<(f64, &BoundingBox)> = targets.iter().map(|t| (1.0 / targets.len() as f64, t)).collect();
    weighted.extend(others.iter().map(|o| ((1.0 - q) * 0.5, o)));
    if !others.is_empty() && rng.gen_bool(style.leak_prob.clamp(0.0, 1.0)) {
        let k = rng.gen_range(0..others.len());
        let w = rng.gen_range(0.6..1.4);
        weighted[targets.len() + k].0 = w;
    }
    let norm: f64 = weighted.iter().map(|(w, _)| w).sum();

    let n = grid * grid;
    let mut values = vec![(1.0 - q) / n as f64; n];
    for (w, b) in weighted {
        if w <= 0.0 {
            continue;
        }
        for (v, bv) in values.iter_mut().zip(bump(grid, b, style.sharpness)) {
            *v += q * w / norm * bv;
        }
    }
    let total: f64 = values.iter().sum();
    values.iter_mut().for_each(|v| *v /= total);
    AttentionMap {
        height: grid,
        width: grid,
        values,
    }
}
