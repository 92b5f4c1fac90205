//! Composite triplet scoring, ranking under both protocols, Recall@K against
//! oracle ground truth, and the evaluation report.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::ParamStore;
use crate::error::{Error, Result};
use crate::ram::{gt_pairs, match_clip, oracle_pair_index, pseudo_label_metrics, PseudoLabelMetrics, RamConfig};
use crate::relnet::{ClipInputs, ForwardOutput, RelNet};
use crate::scene::{iou, ClipRecord, Detection, Frame, GroundTruthTriplet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Only the top predicate of each pair.
    WithConstraint,
    /// Every predicate of each pair.
    NoConstraint,
}

impl Protocol {
    pub const ALL: [Protocol; 2] = [Protocol::WithConstraint, Protocol::NoConstraint];

    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::WithConstraint => "with_constraint",
            Protocol::NoConstraint => "no_constraint",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub iou_threshold: f64,
    pub pa_scoring: bool,
    pub pam: bool,
    pub histogram_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![10, 20, 50],
            iou_threshold: 0.5,
            pa_scoring: true,
            pam: true,
            histogram_bins: 20,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::InvalidConfig("ks must be a non-empty list of positive integers".into()));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::InvalidConfig("iou_threshold must lie in [0, 1]".into()));
        }
        if self.histogram_bins == 0 {
            return Err(Error::InvalidConfig("histogram_bins must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedTriplet {
    pub subject: u32,
    pub object: u32,
    pub predicate: usize,
    pub score: f64,
}

/// `conf_s * conf_o * pc_p`, times `pa` when affinity scoring is on.
pub fn composite_score(conf_s: f64, conf_o: f64, pc_p: f64, pa: f64, pa_enabled: bool) -> f64 {
    let base = conf_s * conf_o * pc_p;
    if pa_enabled {
        base * pa
    } else {
        base
    }
}

/// Score descending, then `(subject, object, predicate)` ascending.
pub fn compare_ranked(a: &RankedTriplet, b: &RankedTriplet) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.subject.cmp(&b.subject))
        .then(a.object.cmp(&b.object))
        .then(a.predicate.cmp(&b.predicate))
}

/// Scores a frame's pairs and sorts the resulting candidates.
pub fn rank_frame(out: &ForwardOutput, frame: &Frame, protocol: Protocol, pa_enabled: bool) -> Result<Vec<RankedTriplet>> {
    let c = out.pc.cols();
    if out.pc.rows() != out.pairs.len() || out.pa.len() != out.pairs.len() {
        return Err(Error::shape("rank_frame", out.pc.shape(), [out.pairs.len(), c]));
    }
    let mut ranked = Vec::with_capacity(match protocol {
        Protocol::WithConstraint => out.pairs.len(),
        Protocol::NoConstraint => out.pairs.len() * c,
    });
    for (i, &(s, o)) in out.pairs.iter().enumerate() {
        let (Some(ds), Some(dobj)) = (frame.detection(s), frame.detection(o)) else {
            return Err(Error::Data(format!("pair ({s}, {o}) not in frame {}", frame.t)));
        };
        let row = out.pc.row(i);
        let mut push = |p: usize| {
            ranked.push(RankedTriplet {
                subject: s,
                object: o,
                predicate: p,
                score: composite_score(ds.confidence, dobj.confidence, row[p], out.pa[i], pa_enabled),
            })
        };
        match protocol {
            Protocol::WithConstraint => {
                let mut best = 0;
                for p in 1..c {
                    if row[p] > row[best] {
                        best = p;
                    }
                }
                if c > 0 {
                    push(best);
                }
            }
            Protocol::NoConstraint => (0..c).for_each(&mut push),
        }
    }
    ranked.sort_by(compare_ranked);
    Ok(ranked)
}

/// Whether candidate `r` localizes and labels ground-truth triplet `g`.
pub fn triplet_hits(r: &RankedTriplet, s: &Detection, o: &Detection, g: &GroundTruthTriplet, iou_thr: f64) -> bool {
    debug_assert!(r.subject == s.id && r.object == o.id);
    r.predicate == g.predicate_id
        && s.class_id == g.subject.class_id
        && o.class_id == g.object.class_id
        && iou(&s.bbox, &g.subject.bbox) >= iou_thr
        && iou(&o.bbox, &g.object.bbox) >= iou_thr
}

/// Candidate-to-GT compatibility lists for the top-`k` candidates.
pub fn hit_lists(ranked: &[RankedTriplet], frame: &Frame, gt: &[GroundTruthTriplet], k: usize, iou_thr: f64) -> Vec<Vec<usize>> {
    ranked
        .iter()
        .take(k)
        .map(|r| match (frame.detection(r.subject), frame.detection(r.object)) {
            (Some(s), Some(o)) => (0..gt.len()).filter(|&j| triplet_hits(r, s, o, &gt[j], iou_thr)).collect(),
            _ => Vec::new(),
        })
        .collect()
}

/// Size of a maximum one-to-one matching between candidates (in rank
/// order) and ground truth. Candidates are inserted one at a time with
/// augmenting paths, so earlier candidates keep a match once they have one.
pub fn max_matching(hits: &[Vec<usize>], n_gt: usize) -> usize {
    fn augment(c: usize, hits: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
        for &g in &hits[c] {
            if seen[g] {
                continue;
            }
            seen[g] = true;
            if owner[g].map_or(true, |o| augment(o, hits, owner, seen)) {
                owner[g] = Some(c);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; n_gt];
    let mut matched = 0;
    for c in 0..hits.len() {
        let mut seen = vec![false; n_gt];
        if augment(c, hits, &mut owner, &mut seen) {
            matched += 1;
        }
    }
    matched
}

/// Fraction of ground-truth triplets recovered by the top `k` candidates;
/// `None` for frames without ground truth.
pub fn recall_at_k(ranked: &[RankedTriplet], frame: &Frame, gt: &[GroundTruthTriplet], k: usize, iou_thr: f64) -> Option<f64> {
    if gt.is_empty() {
        return None;
    }
    let hits = hit_lists(ranked, frame, gt, k, iou_thr);
    Some(max_matching(&hits, gt.len()) as f64 / gt.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub subset: String,
    pub protocol: Protocol,
    pub k: usize,
    pub recall: f64,
    pub frames: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub pos_count: usize,
    pub neg_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoStat {
    pub clip_id: String,
    pub ni_ratio: f64,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: Option<u64>,
    pub clips: usize,
    pub pa_scoring: bool,
    pub pam: bool,
    /// Recall per subset (`all`, `high_ni`, `low_ni`), protocol and K.
    pub recalls: Vec<RecallEntry>,
    pub pseudo_labels: PseudoLabelMetrics,
    pub pa_mean_positive: f64,
    pub pa_mean_negative: f64,
    pub pa_histogram: Vec<HistogramBin>,
    pub videos: Vec<VideoStat>,
    pub high_ni_clips: Vec<String>,
    pub low_ni_clips: Vec<String>,
}

impl EvalReport {
    pub fn recall(&self, subset: &str, protocol: Protocol, k: usize) -> Option<f64> {
        self.recalls
            .iter()
            .find(|e| e.subset == subset && e.protocol == protocol && e.k == k)
            .map(|e| e.recall)
    }

    pub fn pa_gap(&self) -> f64 {
        self.pa_mean_positive - self.pa_mean_negative
    }
}

/// Per-clip intermediate results.
struct ClipEval {
    clip_id: String,
    /// `(protocol, k) -> per-frame recalls`.
    recalls: BTreeMap<(Protocol, usize), Vec<f64>>,
    pa_pos: Vec<f64>,
    pa_neg: Vec<f64>,
    pairs: usize,
    interactive: usize,
    pseudo: Option<PseudoLabelMetrics>,
}

fn eval_clip(net: &RelNet, store: &ParamStore, rec: &ClipRecord, cfg: &EvalConfig, ram: &RamConfig) -> Result<ClipEval> {
    let inputs = ClipInputs::build(&rec.clip, &net.cfg)?;
    let outputs = net.infer(store, &inputs, cfg.pam)?;
    let mut ce = ClipEval {
        clip_id: rec.clip.clip_id.clone(),
        recalls: BTreeMap::new(),
        pa_pos: Vec::new(),
        pa_neg: Vec::new(),
        pairs: 0,
        interactive: 0,
        pseudo: None,
    };
    for (frame, out) in rec.clip.frames.iter().zip(&outputs) {
        let gt = frame.oracle_gt.as_deref().unwrap_or(&[]);
        for protocol in Protocol::ALL {
            let ranked = rank_frame(out, frame, protocol, cfg.pa_scoring)?;
            for &k in &cfg.ks {
                if let Some(r) = recall_at_k(&ranked, frame, gt, k, cfg.iou_threshold) {
                    ce.recalls.entry((protocol, k)).or_default().push(r);
                }
            }
        }
        let pairs = gt_pairs(frame);
        for (i, &(s, o)) in out.pairs.iter().enumerate() {
            let (s, o) = (frame.detection(s).expect("pair ids"), frame.detection(o).expect("pair ids"));
            ce.pairs += 1;
            if oracle_pair_index(&pairs, s, o).is_some() {
                ce.interactive += 1;
                ce.pa_pos.push(out.pa[i]);
            } else {
                ce.pa_neg.push(out.pa[i]);
            }
        }
    }
    if rec.clip.middle_frame().oracle_gt.is_some() {
        let (_, partition) = match_clip(rec, ram);
        ce.pseudo = Some(pseudo_label_metrics(&partition, rec.clip.middle_frame())?);
    }
    Ok(ce)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Runs the model over every clip and aggregates all metrics. Clips are
/// reduced in clip-id order.
pub fn evaluate(net: &RelNet, store: &ParamStore, records: &[ClipRecord], cfg: &EvalConfig, ram: &RamConfig) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    let mut clips: Vec<ClipEval> = records
        .par_iter()
        .map(|r| eval_clip(net, store, r, cfg, ram))
        .collect::<Result<_>>()?;
    clips.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));

    let videos: Vec<VideoStat> = clips
        .iter()
        .map(|c| VideoStat {
            clip_id: c.clip_id.clone(),
            ni_ratio: if c.pairs > 0 {
                (c.pairs - c.interactive) as f64 / c.pairs as f64
            } else {
                0.0
            },
            pairs: c.pairs,
        })
        .collect();
    let mut by_ni: Vec<usize> = (0..videos.len()).collect();
    by_ni.sort_by(|&a, &b| {
        videos[a]
            .ni_ratio
            .total_cmp(&videos[b].ni_ratio)
            .then(videos[a].clip_id.cmp(&videos[b].clip_id))
    });
    let q = videos.len().div_ceil(4);
    let low: Vec<usize> = by_ni[..q].to_vec();
    let high: Vec<usize> = by_ni[videos.len() - q..].to_vec();

    let mut recalls = Vec::new();
    let all: Vec<usize> = (0..clips.len()).collect();
    for (subset, members) in [("all", &all), ("high_ni", &high), ("low_ni", &low)] {
        for protocol in Protocol::ALL {
            for &k in &cfg.ks {
                let mut ordered: Vec<usize> = members.clone();
                ordered.sort_unstable();
                let frames: Vec<f64> = ordered
                    .iter()
                    .flat_map(|&i| clips[i].recalls.get(&(protocol, k)).cloned().unwrap_or_default())
                    .collect();
                recalls.push(RecallEntry {
                    subset: subset.to_string(),
                    protocol,
                    k,
                    recall: mean(&frames),
                    frames: frames.len(),
                });
            }
        }
    }

    let bins = cfg.histogram_bins;
    let mut pa_histogram: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            bin_lo: b as f64 / bins as f64,
            bin_hi: (b + 1) as f64 / bins as f64,
            pos_count: 0,
            neg_count: 0,
        })
        .collect();
    let bin_of = |v: f64| ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for c in &clips {
        for &v in &c.pa_pos {
            pa_histogram[bin_of(v)].pos_count += 1;
            pos.push(v);
        }
        for &v in &c.pa_neg {
            pa_histogram[bin_of(v)].neg_count += 1;
            neg.push(v);
        }
    }

    Ok(EvalReport {
        seed: None,
        clips: clips.len(),
        pa_scoring: cfg.pa_scoring,
        pam: cfg.pam,
        recalls,
        pseudo_labels: PseudoLabelMetrics::pooled(clips.iter().filter_map(|c| c.pseudo.as_ref())),
        pa_mean_positive: mean(&pos),
        pa_mean_negative: mean(&neg),
        pa_histogram,
        high_ni_clips: high.iter().map(|&i| videos[i].clip_id.clone()).collect(),
        low_ni_clips: low.iter().map(|&i| videos[i].clip_id.clone()).collect(),
        videos,
    })
}
