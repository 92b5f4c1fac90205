//! Finite-difference validation of the primitive layer and of the full
//! training loss on a toy clip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::diff::{finite_diff_check, primitive_suite, GradcheckReport, ParamStore, Tensor};
use crate::error::Result;
use crate::losses::{LossConfig, MarginMode, PaBceMode};
use crate::pipeline::{example_loss, hard_supervision, TrainExample};
use crate::ram::{MatchPartition, PositivePair};
use crate::relnet::{ClipInputs, ModelConfig, RelNet};
use crate::scene::{BoundingBox, Detection, Frame, UnlocalizedTriplet, VideoClip};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Model used by the end-to-end check.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        d_v: 4,
        d_c: 2,
        d_r: 16,
        d_p: 4,
        layers: 2,
        num_predicates: 3,
        num_classes: 3,
        temporal_window: 2,
        pam: true,
        person_subjects: true,
        seed: 0,
    }
}

/// Two frames, one person and three objects, so three candidate pairs per
/// frame.
pub fn toy_clip(seed: u64) -> VideoClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let classes = [0usize, 1, 2, 1];
    let frames = (0..2)
        .map(|t| Frame {
            t,
            detections: classes
                .iter()
                .enumerate()
                .map(|(i, &class_id)| {
                    let x = 40.0 * i as f64 + 3.0 * t as f64;
                    Detection {
                        id: i as u32,
                        bbox: BoundingBox { x1: x, y1: 10.0, x2: x + 30.0, y2: 50.0 },
                        class_id,
                        confidence: 0.9,
                        feature: (0..4).map(|_| normal.sample(&mut rng)).collect(),
                    }
                })
                .collect(),
            oracle_gt: None,
        })
        .collect();
    VideoClip {
        clip_id: "toy".into(),
        frames,
        middle_index: 1,
        annotations: vec![UnlocalizedTriplet { subject_class: 0, predicate_id: 0, object_class: 1 }],
    }
}

fn toy_example(clip: &VideoClip, cfg: &ModelConfig) -> Result<TrainExample> {
    let inputs = ClipInputs::build(clip, cfg)?;
    let mut frames = Vec::new();
    for t in 0..2 {
        let partition = MatchPartition {
            clip_id: clip.clip_id.clone(),
            t,
            positives: vec![PositivePair { s: 0, o: 1, predicates: vec![0, 2] }],
            negatives: vec![(0, 2), (0, 3)],
        };
        frames.push(hard_supervision(&inputs, t, &partition, cfg.num_predicates)?);
    }
    // soft targets on the non-middle frame
    let first = &mut frames[0];
    for target in &mut first.pa {
        target.y = if target.positive { 0.8 } else { 0.3 };
        first.pam_labels[target.row] = Some(target.y);
    }
    Ok(TrainExample { inputs, frames })
}

/// Total-loss gradcheck on the toy model with every parameter, biases and
/// zero-initialized heads included, drawn from `U(-a, a)` with
/// `a = sqrt(6 / (rows + cols))`.
pub fn end_to_end_check(seed: u64, h: f64) -> Result<GradcheckReport> {
    let cfg = toy_model_config();
    let (net, init) = RelNet::init(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE2E);
    let mut store = ParamStore::new();
    for p in init.iter() {
        let (r, c) = (p.value.rows(), p.value.cols());
        let a = (6.0 / (r + c) as f64).sqrt();
        store.add(p.name.clone(), Tensor::from_fn(r, c, |_, _| rng.gen_range(-a..a)))?;
    }
    let example = toy_example(&toy_clip(seed), &cfg)?;
    let loss = LossConfig {
        lambda_pa: 1.0,
        lambda_pam: 0.5,
        margin: 0.3,
        pa_bce_mode: PaBceMode::Balanced,
        ..LossConfig::default()
    };
    finite_diff_check(
        |tape, s| Ok(example_loss(tape, &net, s, &example, &loss, MarginMode::Adaptive, seed)?.0),
        &mut store,
        h,
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Coordinates whose stencil crosses a kink; not compared.
    pub nonsmooth: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckSummary {
    pub seed: u64,
    pub tolerance: f64,
    pub fd_step: f64,
    pub checks: Vec<CheckLine>,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub nonsmooth: usize,
    pub passed: bool,
}

/// Every primitive over seeds `0..seeds`, then the end-to-end loss on the
/// toy clip and parameters of `base_seed`.
pub fn run_all(base_seed: u64, seeds: u64) -> Result<GradcheckSummary> {
    let mut checks: Vec<CheckLine> = primitive_suite(seeds, FD_STEP)?
        .into_iter()
        .map(|c| CheckLine {
            name: c.primitive.to_string(),
            seed: c.seed,
            max_rel_error: c.max_rel_error,
            coordinates: c.coordinates,
            nonsmooth: c.nonsmooth,
        })
        .collect();
    let report = end_to_end_check(base_seed, FD_STEP)?;
    checks.push(CheckLine {
        name: "end_to_end".into(),
        seed: base_seed,
        max_rel_error: report.max_rel_error,
        coordinates: report.coordinates,
        nonsmooth: report.nonsmooth,
    });
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let coordinates = checks.iter().map(|c| c.coordinates).sum();
    let nonsmooth = checks.iter().map(|c| c.nonsmooth).sum();
    Ok(GradcheckSummary {
        coordinates,
        nonsmooth,
        seed: base_seed,
        tolerance: TOLERANCE,
        fd_step: FD_STEP,
        passed: max_rel_error < TOLERANCE,
        checks,
        max_rel_error,
    })
}
