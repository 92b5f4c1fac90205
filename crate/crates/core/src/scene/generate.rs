//! Seeded synthetic clips.
//!
//! Each clip holds `interactive_triplets` person-object interactions that
//! persist across frames with small motion, buried among distractor
//! detections. Interactive detections get systematically lower confidence
//! than distractors, and with `duplicate_prob` a second instance of an
//! interacting object's class is placed next to it, so class-level matching
//! is ambiguous.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::attention::{synthesize_attention, AttentionStyle};
use super::io::{AttentionKey, ClipRecord};
use super::{
    BoundingBox, ClassedBox, Detection, EntitySide, Frame, GroundTruthTriplet, UnlocalizedTriplet, VideoClip,
    IMAGE_SIZE, PERSON_CLASS,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Training clips.
    pub clips: usize,
    pub test_clips: usize,
    pub frames_per_clip: usize,
    pub interactive_triplets: usize,
    pub distractors_per_frame: usize,
    /// Object vocabulary size, person included (class 0).
    pub num_object_classes: usize,
    pub num_predicates: usize,
    pub feature_dim: usize,
    pub feature_noise: f64,
    /// Mean value of the interaction channel for interacting detections.
    pub interaction_signal: f64,
    /// Mean value of the predicate channels for interacting detections.
    pub predicate_signal: f64,
    /// Standard deviation of detector box noise, pixels.
    pub box_jitter: f64,
    /// Max per-frame displacement, pixels.
    pub max_speed: f64,
    pub interactive_confidence: [f64; 2],
    pub distractor_confidence: [f64; 2],
    pub attention_grid: usize,
    /// Mean grounding quality in `[0, 1]`; each map draws within +-0.15.
    pub attention_quality: f64,
    pub attention_sharpness: f64,
    pub attention_leak_prob: f64,
    pub duplicate_prob: f64,
    pub extra_predicate_prob: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            clips: 32,
            test_clips: 16,
            frames_per_clip: 4,
            interactive_triplets: 2,
            distractors_per_frame: 10,
            num_object_classes: 8,
            num_predicates: 6,
            feature_dim: 32,
            feature_noise: 0.35,
            interaction_signal: 0.8,
            predicate_signal: 0.8,
            box_jitter: 3.0,
            max_speed: 5.0,
            interactive_confidence: [0.35, 0.75],
            distractor_confidence: [0.55, 0.95],
            attention_grid: 32,
            attention_quality: 0.8,
            attention_sharpness: 0.5,
            attention_leak_prob: 0.1,
            duplicate_prob: 0.5,
            extra_predicate_prob: 0.3,
            seed: 7,
        }
    }
}

impl GenConfig {
    /// Feature channels needed for the class, interaction, geometry and
    /// predicate blocks.
    pub fn min_feature_dim(&self) -> usize {
        self.num_object_classes + 1 + 4 + self.num_predicates
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.clips == 0 {
            return bad("clips must be >= 1".into());
        }
        for (name, v) in [
            ("frames_per_clip", self.frames_per_clip),
            ("interactive_triplets", self.interactive_triplets),
            ("num_predicates", self.num_predicates),
            ("attention_grid", self.attention_grid),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.num_object_classes < 2 {
            return bad("num_object_classes must include person and at least one object".into());
        }
        if self.feature_dim < self.min_feature_dim() {
            return bad(format!(
                "feature_dim {} < required {}",
                self.feature_dim,
                self.min_feature_dim()
            ));
        }
        for (name, p) in [
            ("attention_quality", self.attention_quality),
            ("attention_leak_prob", self.attention_leak_prob),
            ("duplicate_prob", self.duplicate_prob),
            ("extra_predicate_prob", self.extra_predicate_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        for (name, [lo, hi]) in [
            ("interactive_confidence", self.interactive_confidence),
            ("distractor_confidence", self.distractor_confidence),
        ] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return bad(format!("{name} range [{lo}, {hi}] must lie in (0, 1]"));
            }
        }
        if self.feature_noise < 0.0 || self.box_jitter < 0.0 || self.max_speed < 0.0 {
            return bad("noise, jitter and speed must be >= 0".into());
        }
        if self.attention_sharpness <= 0.0 {
            return bad("attention_sharpness must be > 0".into());
        }
        Ok(())
    }

    pub fn attention_style(&self) -> AttentionStyle {
        AttentionStyle {
            grid: self.attention_grid,
            sharpness: self.attention_sharpness,
            leak_prob: self.attention_leak_prob,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Subject(usize),
    Object(usize),
    Duplicate,
    Distractor,
}

struct Instance {
    class_id: usize,
    start: BoundingBox,
    velocity: (f64, f64),
    role: Role,
}

/// Which half of the corpus a clip belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of clip `index` in `split` for a corpus seed.
pub fn clip_seed(corpus_seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x7261_696e,
        Split::Test => 0x7465_7374,
    };
    splitmix(splitmix(corpus_seed ^ tag) ^ index as u64)
}

fn box_within(x1: f64, y1: f64, w: f64, h: f64) -> BoundingBox {
    let x1 = x1.clamp(0.0, IMAGE_SIZE - w);
    let y1 = y1.clamp(0.0, IMAGE_SIZE - h);
    BoundingBox {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    }
}

fn random_box(rng: &mut ChaCha8Rng, w: (f64, f64), h: (f64, f64)) -> BoundingBox {
    let (w, h) = (rng.gen_range(w.0..w.1), rng.gen_range(h.0..h.1));
    box_within(rng.gen_range(0.0..IMAGE_SIZE - w), rng.gen_range(0.0..IMAGE_SIZE - h), w, h)
}

fn shifted(b: &BoundingBox, dx: f64, dy: f64) -> BoundingBox {
    box_within(b.x1 + dx, b.y1 + dy, b.width(), b.height())
}

fn random_velocity(rng: &mut ChaCha8Rng, max_speed: f64) -> (f64, f64) {
    if max_speed == 0.0 {
        return (0.0, 0.0);
    }
    (rng.gen_range(-max_speed..=max_speed), rng.gen_range(-max_speed..=max_speed))
}

/// Generates one clip; a pure function of `(cfg, seed)`.
///
/// # Panics
/// If `cfg` fails [`GenConfig::validate`].
pub fn generate_clip(cfg: &GenConfig, seed: u64) -> VideoClip {
    cfg.validate().expect("invalid GenConfig");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.feature_noise.max(0.0)).expect("noise std");
    let jitter = Normal::new(0.0, cfg.box_jitter.max(0.0)).expect("jitter std");

    let mut instances = Vec::new();
    let mut predicates: Vec<Vec<usize>> = Vec::new();
    let mut object_classes = Vec::new();
    for k in 0..cfg.interactive_triplets {
        let mut person = random_box(&mut rng, (60.0, 110.0), (120.0, 220.0));
        for _ in 0..30 {
            if instances.iter().all(|i: &Instance| super::iou(&i.start, &person) < 0.1) {
                break;
            }
            person = random_box(&mut rng, (60.0, 110.0), (120.0, 220.0));
        }
        let velocity = random_velocity(&mut rng, cfg.max_speed);
        let object_class = rng.gen_range(1..cfg.num_object_classes);
        let (ow, oh) = (rng.gen_range(30.0..80.0), rng.gen_range(30.0..80.0));
        let (pcx, pcy) = person.center();
        let ocx = pcx + rng.gen_range(-0.5..0.5) * person.width();
        let ocy = pcy + rng.gen_range(-0.4..0.4) * person.height();
        let object = box_within(ocx - ow / 2.0, ocy - oh / 2.0, ow, oh);

        let mut preds = vec![rng.gen_range(0..cfg.num_predicates)];
        if cfg.num_predicates > 1 && rng.gen_bool(cfg.extra_predicate_prob) {
            let extra = (preds[0] + rng.gen_range(1..cfg.num_predicates)) % cfg.num_predicates;
            preds.push(extra);
        }
        preds.sort_unstable();

        instances.push(Instance {
            class_id: PERSON_CLASS,
            start: person,
            velocity,
            role: Role::Subject(k),
        });
        instances.push(Instance {
            class_id: object_class,
            start: object,
            velocity,
            role: Role::Object(k),
        });
        if rng.gen_bool(cfg.duplicate_prob) {
            let size = (ow * rng.gen_range(0.8..1.2), oh * rng.gen_range(0.8..1.2));
            for _ in 0..20 {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let dist = rng.gen_range(1.1..1.8) * ow.max(oh);
                let (cx, cy) = object.center();
                let dup = box_within(
                    cx + dist * angle.cos() - size.0 / 2.0,
                    cy + dist * angle.sin() - size.1 / 2.0,
                    size.0,
                    size.1,
                );
                if super::iou(&dup, &object) < 0.3 {
                    let velocity = random_velocity(&mut rng, cfg.max_speed);
                    instances.push(Instance {
                        class_id: object_class,
                        start: dup,
                        velocity,
                        role: Role::Duplicate,
                    });
                    break;
                }
            }
        }
        predicates.push(preds);
        object_classes.push(object_class);
    }
    for _ in 0..cfg.distractors_per_frame {
        let class_id = rng.gen_range(1..cfg.num_object_classes);
        // keep distractors from masquerading as interacting instances
        let mut start = random_box(&mut rng, (25.0, 100.0), (25.0, 100.0));
        for _ in 0..30 {
            let clear = instances
                .iter()
                .filter(|i| i.role != Role::Distractor)
                .all(|i| super::iou(&i.start, &start) < 0.3);
            if clear {
                break;
            }
            start = random_box(&mut rng, (25.0, 100.0), (25.0, 100.0));
        }
        let velocity = random_velocity(&mut rng, cfg.max_speed);
        instances.push(Instance {
            class_id,
            start,
            velocity,
            role: Role::Distractor,
        });
    }
    // detection ids carry no information about roles
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(&mut rng);

    let middle_index = cfg.frames_per_clip / 2;
    let c = cfg.num_object_classes;
    let mut frames = Vec::with_capacity(cfg.frames_per_clip);
    for t in 0..cfg.frames_per_clip {
        let dt = t as f64 - middle_index as f64;
        let true_boxes: Vec<BoundingBox> = instances
            .iter()
            .map(|inst| shifted(&inst.start, inst.velocity.0 * dt, inst.velocity.1 * dt))
            .collect();

        let mut detections = Vec::with_capacity(instances.len());
        for (id, &i) in order.iter().enumerate() {
            let inst = &instances[i];
            let tb = true_boxes[i];
            let mut x1 = (tb.x1 + jitter.sample(&mut rng)).clamp(0.0, IMAGE_SIZE - 4.0);
            let mut y1 = (tb.y1 + jitter.sample(&mut rng)).clamp(0.0, IMAGE_SIZE - 4.0);
            let mut x2 = (tb.x2 + jitter.sample(&mut rng)).clamp(0.0, IMAGE_SIZE);
            let mut y2 = (tb.y2 + jitter.sample(&mut rng)).clamp(0.0, IMAGE_SIZE);
            if x2 < x1 + 4.0 {
                x2 = x1 + 4.0;
            }
            if y2 < y1 + 4.0 {
                y2 = y1 + 4.0;
            }
            x1 = x1.min(x2 - 4.0);
            y1 = y1.min(y2 - 4.0);
            let bbox = BoundingBox { x1, y1, x2, y2 };

            let interacting = matches!(inst.role, Role::Subject(_) | Role::Object(_));
            let [lo, hi] = if interacting {
                cfg.interactive_confidence
            } else {
                cfg.distractor_confidence
            };
            let confidence = if lo < hi { rng.gen_range(lo..=hi) } else { lo };

            let mut feature = vec![0.0; cfg.feature_dim];
            feature[inst.class_id] = 1.0;
            if interacting {
                feature[c] = cfg.interaction_signal;
            }
            let (cx, cy) = bbox.center();
            feature[c + 1] = cx / IMAGE_SIZE;
            feature[c + 2] = cy / IMAGE_SIZE;
            feature[c + 3] = bbox.width() / IMAGE_SIZE;
            feature[c + 4] = bbox.height() / IMAGE_SIZE;
            if let Role::Subject(k) | Role::Object(k) = inst.role {
                for &p in &predicates[k] {
                    feature[c + 5 + p] = cfg.predicate_signal;
                }
            }
            for v in feature.iter_mut() {
                *v += noise.sample(&mut rng);
            }

            detections.push(Detection {
                id: id as u32,
                bbox,
                class_id: inst.class_id,
                confidence,
                feature,
            });
        }

        let mut gt = Vec::new();
        for k in 0..cfg.interactive_triplets {
            let (si, oi) = (2 * k, 2 * k + 1);
            // instances are pushed subject, object, optional duplicate
            let si = instances
                .iter()
                .position(|x| x.role == Role::Subject(k))
                .unwrap_or(si);
            let oi = instances
                .iter()
                .position(|x| x.role == Role::Object(k))
                .unwrap_or(oi);
            for &p in &predicates[k] {
                gt.push(GroundTruthTriplet {
                    subject: ClassedBox {
                        bbox: true_boxes[si],
                        class_id: PERSON_CLASS,
                    },
                    predicate_id: p,
                    object: ClassedBox {
                        bbox: true_boxes[oi],
                        class_id: object_classes[k],
                    },
                });
            }
        }
        frames.push(Frame {
            t,
            detections,
            oracle_gt: Some(gt),
        });
    }

    let mut annotations = Vec::new();
    for k in 0..cfg.interactive_triplets {
        for &p in &predicates[k] {
            annotations.push(UnlocalizedTriplet {
                subject_class: PERSON_CLASS,
                predicate_id: p,
                object_class: object_classes[k],
            });
        }
    }

    VideoClip {
        clip_id: format!("clip_{seed:016x}"),
        frames,
        middle_index,
        annotations,
    }
}

/// Attention maps for both entities of every middle-frame annotation.
pub fn generate_attention(cfg: &GenConfig, clip: &VideoClip, seed: u64) -> Vec<(AttentionKey, super::AttentionMap)> {
    let style = cfg.attention_style();
    let frame = clip.middle_frame();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0xa77e_0000));
    let mut out = Vec::new();
    for (a, triplet) in clip.annotations.iter().enumerate() {
        for side in [EntitySide::Subject, EntitySide::Object] {
            let quality = (cfg.attention_quality + rng.gen_range(-0.15..=0.15)).clamp(0.0, 1.0);
            let map_seed = rng.gen::<u64>();
            let map = synthesize_attention(frame, triplet, side, quality, &style, map_seed);
            out.push((
                AttentionKey {
                    t: frame.t,
                    annotation: a,
                    side,
                },
                map,
            ));
        }
    }
    out
}

/// All clips (with attention sidecars) of one split.
pub fn generate_split(cfg: &GenConfig, split: Split) -> Result<Vec<ClipRecord>> {
    cfg.validate()?;
    let count = match split {
        Split::Train => cfg.clips,
        Split::Test => cfg.test_clips,
    };
    use rayon::prelude::*;
    Ok((0..count)
        .into_par_iter()
        .map(|i| {
            let seed = clip_seed(cfg.seed, split, i);
            let clip = generate_clip(cfg, seed);
            let attention = generate_attention(cfg, &clip, seed).into_iter().collect();
            ClipRecord { clip, attention }
        })
        .collect())
}
