//! Two-step training: a teacher trained on middle-frame pseudo labels, then
//! a student trained on labels propagated to every frame and softened by the
//! teacher's predictions.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{
    distance_weight, loss_pam, loss_rel_logits, pa_bce_logits, total_loss, LossComponents, LossConfig, MarginMode,
    PaTarget,
};
use crate::ram::{candidate_pairs, match_clip, MatchPartition, PositivePair, RamConfig};
use crate::relnet::{ClipInputs, ForwardOutput, ModelConfig, RelNet};
use crate::scene::{iou, ClipRecord, Detection, VideoClip};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 5,
            seed: 7,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr {} must be > 0", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("eps must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// `lr * (1 + cos(pi * step / total)) / 2`, clamped to 0 past the end.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// One AdamW update with decoupled weight decay, using the gradients
/// accumulated in `store`. Increments `store.step`.
pub fn optimizer_step(store: &mut ParamStore, cfg: &TrainConfig, lr: f64) {
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for p in store.iter_mut() {
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let g = p.grad[i];
            p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
            p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
            values[i] *= 1.0 - lr * cfg.weight_decay;
            let (m_hat, v_hat) = (p.m[i] / bc1, p.v[i] / bc2);
            values[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// A frame's partition with its distance from the annotated frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagatedFrame {
    pub delta_t: usize,
    pub partition: MatchPartition,
}

/// One entry per frame of the clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagatedLabels {
    pub frames: Vec<PropagatedFrame>,
}

/// Same-class detection with the highest IoU >= 0.5 against `reference`;
/// ties go to the lowest id.
fn best_overlap<'a>(detections: &'a [Detection], reference: &Detection) -> Option<&'a Detection> {
    let mut best: Option<(&Detection, f64)> = None;
    for d in detections.iter().filter(|d| d.class_id == reference.class_id) {
        let v = iou(&d.bbox, &reference.bbox);
        if v < 0.5 {
            continue;
        }
        best = match best {
            Some((b, bv)) if bv > v || (bv == v && b.id < d.id) => Some((b, bv)),
            _ => Some((d, v)),
        };
    }
    best.map(|(d, _)| d)
}

/// Copies middle-frame positives to every other frame through IoU >= 0.5
/// class-consistent detections.
pub fn propagate_labels(clip: &VideoClip, middle: &MatchPartition, person_subjects: bool) -> PropagatedLabels {
    let mid = clip.middle_frame();
    let mut frames = Vec::with_capacity(clip.frames.len());
    for (i, frame) in clip.frames.iter().enumerate() {
        let delta_t = i.abs_diff(clip.middle_index);
        if i == clip.middle_index {
            frames.push(PropagatedFrame {
                delta_t,
                partition: middle.clone(),
            });
            continue;
        }
        let mut labels: BTreeMap<(u32, u32), BTreeSet<usize>> = BTreeMap::new();
        for p in &middle.positives {
            let (Some(ms), Some(mo)) = (mid.detection(p.s), mid.detection(p.o)) else {
                continue;
            };
            if let (Some(s), Some(o)) = (best_overlap(&frame.detections, ms), best_overlap(&frame.detections, mo)) {
                if s.id != o.id {
                    labels.entry((s.id, o.id)).or_default().extend(&p.predicates);
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
        frames.push(PropagatedFrame {
            delta_t,
            partition: MatchPartition {
                clip_id: clip.clip_id.clone(),
                t: frame.t,
                positives,
                negatives,
            },
        });
    }
    PropagatedLabels { frames }
}

/// Supervision for one frame, indexed by the frame's pair rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSupervision {
    pub frame: usize,
    pub pa: Vec<PaTarget>,
    pub rel_rows: Vec<usize>,
    pub rel_targets: Tensor,
    /// Affinity label per pair row; `None` for rows outside the partition.
    pub pam_labels: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub inputs: ClipInputs,
    pub frames: Vec<FrameSupervision>,
}

fn row_index(inputs: &ClipInputs, frame: usize) -> BTreeMap<(u32, u32), usize> {
    inputs.frames[frame].pairs.iter().enumerate().map(|(i, p)| (*p, i)).collect()
}

/// Hard targets from a partition: positives get PA 1 and multi-hot
/// predicates, negatives PA 0.
pub fn hard_supervision(inputs: &ClipInputs, frame: usize, partition: &MatchPartition, num_predicates: usize) -> Result<FrameSupervision> {
    soft_supervision(inputs, frame, partition, num_predicates, 1.0, None)
}

/// Targets blended towards a teacher: `w * hard + (1 - w) * teacher` for
/// both affinity and predicates. `teacher = None` means `w = 1`.
pub fn soft_supervision(
    inputs: &ClipInputs,
    frame: usize,
    partition: &MatchPartition,
    num_predicates: usize,
    w: f64,
    teacher: Option<&ForwardOutput>,
) -> Result<FrameSupervision> {
    let rows = row_index(inputs, frame);
    let n = inputs.frames[frame].pairs.len();
    let lookup = |s: u32, o: u32| {
        rows.get(&(s, o)).copied().ok_or_else(|| {
            Error::Data(format!(
                "{}: pair ({s}, {o}) of frame {frame} is not a candidate pair",
                inputs.clip_id
            ))
        })
    };
    let blend = |hard: f64, soft: f64| if teacher.is_some() { w * hard + (1.0 - w) * soft } else { hard };
    let mut pa = Vec::with_capacity(partition.positives.len() + partition.negatives.len());
    let mut pam_labels = vec![None; n];
    let mut rel_rows = Vec::with_capacity(partition.positives.len());
    let mut rel = Vec::with_capacity(partition.positives.len() * num_predicates);
    for p in &partition.positives {
        let r = lookup(p.s, p.o)?;
        let y = blend(1.0, teacher.map_or(1.0, |t| t.pa[r]));
        pa.push(PaTarget { row: r, y, positive: true });
        pam_labels[r] = Some(y);
        rel_rows.push(r);
        for k in 0..num_predicates {
            let hard = if p.predicates.contains(&k) { 1.0 } else { 0.0 };
            rel.push(blend(hard, teacher.map_or(hard, |t| t.pc.get(r, k))));
        }
    }
    for &(s, o) in &partition.negatives {
        let r = lookup(s, o)?;
        let y = blend(0.0, teacher.map_or(0.0, |t| t.pa[r]));
        pa.push(PaTarget { row: r, y, positive: false });
        pam_labels[r] = Some(y);
    }
    Ok(FrameSupervision {
        frame,
        pa,
        rel_targets: Tensor::new(rel_rows.len(), num_predicates, rel)?,
        rel_rows,
        pam_labels,
    })
}

/// Sources of the pair partitions used for training.
pub fn middle_partitions(records: &[ClipRecord], ram: &RamConfig) -> Vec<MatchPartition> {
    records.par_iter().map(|r| match_clip(r, ram).1).collect()
}

/// Step-1 examples: hard labels on the middle frame only.
pub fn step1_examples(records: &[ClipRecord], partitions: &[MatchPartition], model: &ModelConfig) -> Result<Vec<TrainExample>> {
    records
        .par_iter()
        .zip(partitions)
        .map(|(rec, part)| {
            let inputs = ClipInputs::build(&rec.clip, model)?;
            let sup = hard_supervision(&inputs, rec.clip.middle_index, part, model.num_predicates)?;
            Ok(TrainExample {
                inputs,
                frames: vec![sup],
            })
        })
        .collect()
}

/// Step-2 examples: propagated labels on every frame, blended with the
/// teacher's outputs by temporal distance.
pub fn step2_examples(
    records: &[ClipRecord],
    partitions: &[MatchPartition],
    model: &ModelConfig,
    teacher: (&RelNet, &ParamStore),
    alpha: f64,
) -> Result<Vec<TrainExample>> {
    records
        .par_iter()
        .zip(partitions)
        .map(|(rec, part)| {
            let inputs = ClipInputs::build(&rec.clip, model)?;
            let teacher_out = teacher.0.infer(teacher.1, &inputs, teacher.0.cfg.pam)?;
            let labels = propagate_labels(&rec.clip, part, model.person_subjects);
            let mut frames = Vec::with_capacity(labels.frames.len());
            for (f, pf) in labels.frames.iter().enumerate() {
                if inputs.frames[f].pairs.is_empty() {
                    continue;
                }
                let w = distance_weight(pf.delta_t as f64, alpha);
                frames.push(soft_supervision(&inputs, f, &pf.partition, model.num_predicates, w, Some(&teacher_out[f]))?);
            }
            Ok(TrainExample { inputs, frames })
        })
        .collect()
}

/// Per-epoch means of the loss terms over clips.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "L_rel")]
    pub l_rel: f64,
    #[serde(rename = "L_PA")]
    pub l_pa: f64,
    #[serde(rename = "L_PAM")]
    pub l_pam: f64,
    pub total: f64,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
}

fn mix(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [a, b, c] {
        h = (h ^ v).wrapping_mul(0x100_0000_01b3).rotate_left(17);
    }
    h
}

/// Loss of one example on a fresh forward pass.
pub fn example_loss<'t>(
    tape: &'t Tape,
    net: &RelNet,
    store: &ParamStore,
    ex: &TrainExample,
    loss: &LossConfig,
    margin_mode: MarginMode,
    triplet_seed: u64,
) -> Result<(Var<'t>, LossComponents)> {
    let fw = net.forward(tape, store, &ex.inputs)?;
    let labels_of: BTreeMap<usize, &FrameSupervision> = ex.frames.iter().map(|s| (s.frame, s)).collect();
    let mut rel = Vec::new();
    let mut pa = Vec::new();
    let mut pam = Vec::new();
    for sup in &ex.frames {
        let Some(fv) = &fw.frames[sup.frame] else {
            continue;
        };
        rel.push(loss_rel_logits(fv.pc_logits, &sup.rel_rows, &sup.rel_targets)?);
        pa.push(pa_bce_logits(fv.pa_logits, &sup.pa, loss.pa_bce_mode)?);
        if loss.lambda_pam > 0.0 {
            if let Some((g, seq)) = fw.gram(sup.frame)? {
                let labels: Vec<Option<f64>> = seq
                    .iter()
                    .map(|&(f, i)| labels_of.get(&f).and_then(|s| s.pam_labels[i]))
                    .collect();
                let seed = mix(triplet_seed, sup.frame as u64, 0, 0);
                pam.push(loss_pam(g, &labels, loss.margin, margin_mode, loss.triplet_sample_cap, seed)?);
            }
        }
    }
    let mean = |v: Vec<Var<'t>>| -> Result<Var<'t>> {
        if v.is_empty() {
            return Ok(tape.constant(Tensor::scalar(0.0)));
        }
        let n = v.len() as f64;
        Ok(Var::concat(&v, 0)?.sum(None)?.scale(1.0 / n))
    };
    let (rel, pa, pam) = (mean(rel)?, mean(pa)?, mean(pam)?);
    let comps = LossComponents {
        rel: rel.item(),
        pa: pa.item(),
        pam: pam.item(),
    };
    Ok((total_loss(rel, pa, pam, loss)?, comps))
}

/// Trains `store` in place on `examples`; clips are visited in a fresh
/// seeded permutation each epoch, one optimizer step per clip.
pub fn train(
    net: &RelNet,
    store: &mut ParamStore,
    examples: &[TrainExample],
    loss: &LossConfig,
    margin_mode: MarginMode,
    train: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    train.validate()?;
    loss.validate()?;
    let total_steps = (train.epochs * examples.len()) as u64;
    let mut step = 0u64;
    let mut logs = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(train.seed, epoch as u64, 1, 0)));
        let mut sums = LossComponents::default();
        let mut lr = 0.0;
        for &i in &order {
            store.zero_grad();
            let tape = Tape::new();
            let seed = mix(train.seed, epoch as u64, i as u64, 2);
            let (l, comps) = example_loss(&tape, net, store, &examples[i], loss, margin_mode, seed)?;
            tape.backward_into(l, store)?;
            lr = cosine_lr(train.lr, step, total_steps);
            optimizer_step(store, train, lr);
            step += 1;
            sums.rel += comps.rel;
            sums.pa += comps.pa;
            sums.pam += comps.pam;
        }
        let n = examples.len() as f64;
        let means = LossComponents {
            rel: sums.rel / n,
            pa: sums.pa / n,
            pam: sums.pam / n,
        };
        logs.push(EpochLog {
            epoch,
            l_rel: means.rel,
            l_pa: means.pa,
            l_pam: means.pam,
            total: means.total(loss),
            lr,
        });
    }
    store.zero_grad();
    Ok(logs)
}

/// Result of a training step.
pub struct Trained {
    pub net: RelNet,
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
}

/// Teacher training on middle-frame partitions with a fixed hard margin.
pub fn train_step1(
    records: &[ClipRecord],
    partitions: &[MatchPartition],
    model: &ModelConfig,
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<Trained> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let examples = step1_examples(records, partitions, model)?;
    let (net, mut store) = RelNet::init(model)?;
    let log = train(&net, &mut store, &examples, loss, MarginMode::Hard, cfg)?;
    Ok(Trained { net, store, log })
}

/// Student training on propagated, teacher-blended labels. The student
/// starts from the teacher's weights.
pub fn train_step2(
    records: &[ClipRecord],
    partitions: &[MatchPartition],
    teacher: (&RelNet, &ParamStore),
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<Trained> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let model = teacher.0.cfg.clone();
    let examples = step2_examples(records, partitions, &model, teacher, loss.alpha)?;
    let net = RelNet::bind(&model, teacher.1)?;
    let mut store = ParamStore::new();
    for p in teacher.1.iter() {
        store.add(p.name.clone(), p.value.clone())?;
    }
    let log = train(&net, &mut store, &examples, loss, loss.margin_mode, cfg)?;
    Ok(Trained { net, store, log })
}
