//! Relation-aware matching: resolve each class-level annotation to concrete
//! detections using attention maps, then split the frame's candidate pairs
//! into matched (P+) and unmatched (P-) sets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::diff::sigmoid;
use crate::error::{Error, Result};
use crate::scene::{iou, AttentionMap, BoundingBox, ClipRecord, Detection, EntitySide, Frame, PERSON_CLASS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RamConfig {
    pub tau_r: f64,
    pub tau_gs: f64,
    /// Off means plain class-level matching.
    pub enabled: bool,
    /// Restrict pair subjects to the person class.
    pub person_subjects: bool,
}

impl Default for RamConfig {
    fn default() -> Self {
        Self {
            tau_r: 0.3,
            tau_gs: 0.2,
            enabled: true,
            person_subjects: true,
        }
    }
}

impl RamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_r) {
            return Err(Error::InvalidConfig(format!("tau_r = {} outside [0, 1]", self.tau_r)));
        }
        if !(0.0..1.0).contains(&self.tau_gs) {
            return Err(Error::InvalidConfig(format!("tau_gs = {} outside [0, 1)", self.tau_gs)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReliabilityResult {
    pub sigma_spat: f64,
    pub r: f64,
    /// Weighted centroid `(mu_x, mu_y)` in cell-index coordinates.
    pub centroid: (f64, f64),
    pub total_mass: f64,
}

/// Spatial dispersion of the normalized map around its centroid, mapped to
/// `(0, 1]`. A map without mass gets `r = 0`.
pub fn reliability(a: &AttentionMap) -> ReliabilityResult {
    let total = a.total_mass();
    if !(total > 0.0) {
        return ReliabilityResult {
            sigma_spat: 0.0,
            r: 0.0,
            centroid: (0.0, 0.0),
            total_mass: total.max(0.0),
        };
    }
    let (mut mx, mut my) = (0.0, 0.0);
    for row in 0..a.height {
        for col in 0..a.width {
            let w = a.get(row, col) / total;
            mx += w * col as f64;
            my += w * row as f64;
        }
    }
    let mut var = 0.0;
    for row in 0..a.height {
        for col in 0..a.width {
            let w = a.get(row, col) / total;
            let (dx, dy) = (col as f64 - mx, row as f64 - my);
            var += w * (dx * dx + dy * dy);
        }
    }
    let sigma_spat = var.max(0.0).sqrt();
    let diag = ((a.height * a.height + a.width * a.width) as f64).sqrt();
    ReliabilityResult {
        sigma_spat,
        r: (-sigma_spat / diag).exp(),
        centroid: (mx, my),
        total_mass: total,
    }
}

/// Fraction of the map's mass inside `b`.
pub fn concentration(a: &AttentionMap, b: &BoundingBox) -> Result<f64> {
    let total = a.total_mass();
    if !(total > 0.0) {
        return Err(Error::ZeroAttentionMass);
    }
    Ok(a.mass_in(b) / total)
}

/// In-box mass per covered cell.
pub fn density(a: &AttentionMap, b: &BoundingBox) -> Result<f64> {
    let cells = a.cell_count(b);
    if cells == 0 {
        return Err(Error::EmptyBoxProjection);
    }
    Ok(a.mass_in(b) / cells as f64)
}

/// `C(b) * sigmoid(rho(b))`.
pub fn grounding_score(a: &AttentionMap, b: &BoundingBox) -> Result<f64> {
    let c = concentration(a, b)?;
    let rho = density(a, b)?;
    Ok(c * sigmoid(rho))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateScore {
    pub detection: u32,
    pub concentration: f64,
    pub density: f64,
    pub gs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingResult {
    pub candidates: Vec<CandidateScore>,
    /// Highest-scoring candidate when its score exceeds the threshold.
    pub best: Option<u32>,
}

/// Scores every candidate; a box covering no cells scores 0.
pub fn ground(a: &AttentionMap, candidates: &[&Detection], tau_gs: f64) -> Result<GroundingResult> {
    let mut scores = Vec::with_capacity(candidates.len());
    for d in candidates {
        let c = concentration(a, &d.bbox)?;
        let (rho, gs) = match density(a, &d.bbox) {
            Ok(rho) => (rho, c * sigmoid(rho)),
            Err(Error::EmptyBoxProjection) => (0.0, 0.0),
            Err(e) => return Err(e),
        };
        scores.push(CandidateScore {
            detection: d.id,
            concentration: c,
            density: rho,
            gs,
        });
    }
    let mut best: Option<&CandidateScore> = None;
    for s in &scores {
        best = match best {
            Some(b) if b.gs > s.gs || (b.gs == s.gs && b.detection < s.detection) => Some(b),
            _ => Some(s),
        };
    }
    Ok(GroundingResult {
        best: best.filter(|b| b.gs > tau_gs).map(|b| b.detection),
        candidates: scores,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "detections")]
pub enum MatchDecision {
    Grounded(u32),
    ClassFallback(Vec<u32>),
    Discarded,
}

impl MatchDecision {
    pub fn detections(&self) -> &[u32] {
        match self {
            MatchDecision::Grounded(id) => std::slice::from_ref(id),
            MatchDecision::ClassFallback(ids) => ids,
            MatchDecision::Discarded => &[],
        }
    }
}

/// Resolves one annotation entity to detections of `entity_class`.
pub fn match_entity(entity_class: usize, detections: &[Detection], a: &AttentionMap, cfg: &RamConfig) -> MatchDecision {
    let mut candidates: Vec<&Detection> = detections.iter().filter(|d| d.class_id == entity_class).collect();
    if candidates.is_empty() {
        return MatchDecision::Discarded;
    }
    candidates.sort_by_key(|d| d.id);
    let fallback = || MatchDecision::ClassFallback(candidates.iter().map(|d| d.id).collect());
    if !cfg.enabled || reliability(a).r < cfg.tau_r {
        return fallback();
    }
    match ground(a, &candidates, cfg.tau_gs) {
        Ok(GroundingResult { best: Some(id), .. }) => MatchDecision::Grounded(id),
        Ok(_) => MatchDecision::Discarded,
        // reliability already rejects massless maps
        Err(_) => fallback(),
    }
}

/// Ordered `(subject, object)` candidate pairs in detection order.
pub fn candidate_pairs(frame: &Frame, person_subjects: bool) -> Vec<(u32, u32)> {
    let has_person = frame.detections.iter().any(|d| d.class_id == PERSON_CLASS);
    let restrict = person_subjects && has_person;
    let mut pairs = Vec::new();
    for s in &frame.detections {
        if restrict && s.class_id != PERSON_CLASS {
            continue;
        }
        for o in &frame.detections {
            if o.id != s.id {
                pairs.push((s.id, o.id));
            }
        }
    }
    pairs
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositivePair {
    pub s: u32,
    pub o: u32,
    pub predicates: Vec<usize>,
}

/// Matched and unmatched candidate pairs of one frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchPartition {
    pub clip_id: String,
    pub t: usize,
    pub positives: Vec<PositivePair>,
    pub negatives: Vec<(u32, u32)>,
}

impl MatchPartition {
    pub fn positive_set(&self) -> BTreeSet<(u32, u32)> {
        self.positives.iter().map(|p| (p.s, p.o)).collect()
    }
}

/// Entity decisions for one annotation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationMatch {
    pub subject: MatchDecision,
    pub object: MatchDecision,
}

/// Splits the frame's candidate pairs. Each non-discarded annotation marks
/// the cross product of its resolved subjects and objects as positive.
pub fn build_partition(
    clip_id: &str,
    frame: &Frame,
    annotations: &[crate::scene::UnlocalizedTriplet],
    decisions: &[AnnotationMatch],
    person_subjects: bool,
) -> MatchPartition {
    let mut labels: BTreeMap<(u32, u32), BTreeSet<usize>> = BTreeMap::new();
    for (ann, dec) in annotations.iter().zip(decisions) {
        for &s in dec.subject.detections() {
            for &o in dec.object.detections() {
                if s != o {
                    labels.entry((s, o)).or_default().insert(ann.predicate_id);
                }
            }
        }
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (s, o) in candidate_pairs(frame, person_subjects) {
        match labels.get(&(s, o)) {
            Some(preds) => positives.push(PositivePair {
                s,
                o,
                predicates: preds.iter().copied().collect(),
            }),
            None => negatives.push((s, o)),
        }
    }
    MatchPartition {
        clip_id: clip_id.to_string(),
        t: frame.t,
        positives,
        negatives,
    }
}

/// Matches every middle-frame annotation of a clip. A missing attention map
/// counts as a massless one.
pub fn match_clip(record: &ClipRecord, cfg: &RamConfig) -> (Vec<AnnotationMatch>, MatchPartition) {
    let clip = &record.clip;
    let frame = clip.middle_frame();
    let empty = AttentionMap {
        height: 1,
        width: 1,
        values: vec![0.0],
    };
    let decisions: Vec<AnnotationMatch> = clip
        .annotations
        .iter()
        .enumerate()
        .map(|(i, ann)| {
            let side = |s: EntitySide| match_entity(s.class_of(ann), &frame.detections, record.map(i, s).unwrap_or(&empty), cfg);
            AnnotationMatch {
                subject: side(EntitySide::Subject),
                object: side(EntitySide::Object),
            }
        })
        .collect();
    let partition = build_partition(&clip.clip_id, frame, &clip.annotations, &decisions, cfg.person_subjects);
    (decisions, partition)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelMetrics {
    pub match_count: usize,
    pub true_positives: usize,
    /// Distinct ground-truth pairs in the evaluated frames.
    pub gt_pairs: usize,
    /// Ground-truth pairs hit by at least one true positive.
    pub gt_covered: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PseudoLabelMetrics {
    fn from_counts(match_count: usize, true_positives: usize, gt_pairs: usize, gt_covered: usize) -> Self {
        let precision = if match_count > 0 {
            true_positives as f64 / match_count as f64
        } else {
            0.0
        };
        let recall = if gt_pairs > 0 {
            gt_covered as f64 / gt_pairs as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            match_count,
            true_positives,
            gt_pairs,
            gt_covered,
            precision,
            recall,
            f1,
        }
    }

    /// Pools counts over frames, then recomputes the ratios.
    pub fn pooled<'a>(items: impl IntoIterator<Item = &'a PseudoLabelMetrics>) -> Self {
        let (mut m, mut tp, mut g, mut c) = (0, 0, 0, 0);
        for x in items {
            m += x.match_count;
            tp += x.true_positives;
            g += x.gt_pairs;
            c += x.gt_covered;
        }
        Self::from_counts(m, tp, g, c)
    }
}

/// Distinct `(subject, object)` ground-truth instances of a frame.
pub fn gt_pairs(frame: &Frame) -> Vec<(crate::scene::ClassedBox, crate::scene::ClassedBox)> {
    let mut out: Vec<(crate::scene::ClassedBox, crate::scene::ClassedBox)> = Vec::new();
    for g in frame.oracle_gt.iter().flatten() {
        if !out.iter().any(|(s, o)| *s == g.subject && *o == g.object) {
            out.push((g.subject, g.object));
        }
    }
    out
}

/// Whether detections `s` and `o` localize a ground-truth pair (IoU > 0.5 on
/// both sides, classes equal). Returns the pair's index in [`gt_pairs`].
pub fn oracle_pair_index(
    pairs: &[(crate::scene::ClassedBox, crate::scene::ClassedBox)],
    s: &Detection,
    o: &Detection,
) -> Option<usize> {
    pairs.iter().position(|(gs, go)| {
        gs.class_id == s.class_id
            && go.class_id == o.class_id
            && iou(&gs.bbox, &s.bbox) > 0.5
            && iou(&go.bbox, &o.bbox) > 0.5
    })
}

/// Pseudo-label quality of a partition against the frame's oracle.
pub fn pseudo_label_metrics(partition: &MatchPartition, frame: &Frame) -> Result<PseudoLabelMetrics> {
    if frame.oracle_gt.is_none() {
        return Err(Error::Data(format!("frame {} has no oracle ground truth", frame.t)));
    }
    let pairs = gt_pairs(frame);
    let mut covered = vec![false; pairs.len()];
    let mut tp = 0;
    for p in &partition.positives {
        let (Some(s), Some(o)) = (frame.detection(p.s), frame.detection(p.o)) else {
            return Err(Error::Data(format!("partition references unknown detection in frame {}", frame.t)));
        };
        if let Some(k) = oracle_pair_index(&pairs, s, o) {
            tp += 1;
            covered[k] = true;
        }
    }
    Ok(PseudoLabelMetrics::from_counts(
        partition.positives.len(),
        tp,
        pairs.len(),
        covered.iter().filter(|c| **c).count(),
    ))
}
