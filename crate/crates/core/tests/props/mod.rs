//! Property checks shared by the `properties` and `acceptance` targets.
//! Each check runs its own seeded runner for [`CASES`] cases.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use pavsgg::diff::{check_primitive, Tape, Tensor, Var, PRIMITIVES};
use pavsgg::evalrank::{compare_ranked, rank_frame, recall_at_k, Protocol, RankedTriplet};
use pavsgg::losses::{
    adaptive_margin, loss_pa_balanced, loss_pa_standard, loss_pam, loss_rel, pa_bce, soft_pa_target, MarginMode,
    PaBceMode, PaTarget,
};
use pavsgg::pipeline::{cosine_lr, propagate_labels};
use pavsgg::ram::{
    candidate_pairs, concentration, grounding_score, match_clip, reliability, MatchPartition, RamConfig,
};
use pavsgg::relnet::{attention_weights, ClipInputs, ForwardOutput, ModelConfig, RelNet};
use pavsgg::scene::{
    generate_attention, generate_clip, iou, AttentionMap, BoundingBox, ClassedBox, ClipRecord, Detection, Frame,
    GenConfig, GroundTruthTriplet, IMAGE_SIZE, PERSON_CLASS,
};

pub const CASES: u32 = 128;

pub type Check = fn() -> Result<(), String>;

/// Every property with its name.
pub const ALL: &[(&str, Check)] = &[
    ("iou_symmetric", iou_symmetric),
    ("iou_self_is_one", iou_self_is_one),
    ("generate_clip_reproducible", generate_clip_reproducible),
    ("annotations_backed_by_ground_truth", annotations_backed_by_ground_truth),
    ("attention_nonnegative_with_positive_cell", attention_nonnegative_with_positive_cell),
    ("reliability_range_and_unit_iff_single_cell", reliability_range_and_unit_iff_single_cell),
    ("reliability_scale_invariant", reliability_scale_invariant),
    ("concentration_partition_sums_to_one", concentration_partition_sums_to_one),
    ("grounding_score_range_and_monotone", grounding_score_range_and_monotone),
    ("disabled_ram_is_class_level", disabled_ram_is_class_level),
    ("ram_never_adds_positives", ram_never_adds_positives),
    ("match_count_monotone_in_tau_gs", match_count_monotone_in_tau_gs),
    ("partition_covers_candidates_once", partition_covers_candidates_once),
    ("primitive_gradcheck", primitive_gradcheck),
    ("backward_deterministic", backward_deterministic),
    ("softmax_rows_sum_to_one", softmax_rows_sum_to_one),
    ("gram_symmetric_psd", gram_symmetric_psd),
    ("attention_rows_sum_to_one", attention_rows_sum_to_one),
    ("pam_off_relation_path_ignores_affinity_init", pam_off_relation_path_ignores_affinity_init),
    ("pair_permutation_equivariance", pair_permutation_equivariance),
    ("heads_strictly_inside_unit_interval", heads_strictly_inside_unit_interval),
    ("balanced_bce_replication", balanced_bce_replication),
    ("losses_nonnegative_and_zero_when_degenerate", losses_nonnegative_and_zero_when_degenerate),
    ("hard_pam_shift_invariant", hard_pam_shift_invariant),
    ("soft_target_between_inputs", soft_target_between_inputs),
    ("adaptive_margin_range", adaptive_margin_range),
    ("propagation_keeps_middle_partition", propagation_keeps_middle_partition),
    ("propagation_partitions_disjoint", propagation_partitions_disjoint),
    ("cosine_schedule_non_increasing", cosine_schedule_non_increasing),
    ("pa_scaling_preserves_ranking", pa_scaling_preserves_ranking),
    ("with_constraint_within_no_constraint", with_constraint_within_no_constraint),
    ("recall_monotone_in_k", recall_monotone_in_k),
    ("ranking_is_total_order", ranking_is_total_order),
];

fn runner(name: &str) -> TestRunner {
    let mut seed = [0u8; 32];
    for (i, b) in name.bytes().enumerate() {
        seed[i % 32] ^= b;
    }
    let config = Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::from_seed(RngAlgorithm::ChaCha, &seed))
}

fn check<S: Strategy>(
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner(name).run(&strategy, test).map_err(|e| e.to_string())
}

fn fail(msg: impl Into<String>) -> TestCaseError {
    TestCaseError::fail(msg.into())
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, TestCaseError> {
    r.map_err(|e| fail(e.to_string()))
}

// ---------- strategies ----------

fn bbox() -> impl Strategy<Value = BoundingBox> {
    (0.0..400.0f64, 0.0..400.0f64, 0.5..110.0f64, 0.5..110.0f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
}

/// Maps with positive mass; cells are zero or in `[0.01, 1]`.
fn attention_map() -> impl Strategy<Value = AttentionMap> {
    (1usize..=10, 1usize..=10).prop_flat_map(|(h, w)| {
        (
            Just((h, w)),
            prop::collection::vec(prop_oneof![Just(0.0), 0.01..1.0f64], h * w),
            0..h * w,
        )
            .prop_map(|((h, w), mut values, hot)| {
                values[hot] = values[hot].max(0.5);
                AttentionMap::new(h, w, values).unwrap()
            })
    })
}

fn small_gen() -> GenConfig {
    GenConfig {
        frames_per_clip: 3,
        distractors_per_frame: 4,
        ..GenConfig::default()
    }
}

/// Generated clip plus its attention, with random quality and duplicates.
fn record() -> impl Strategy<Value = ClipRecord> {
    (any::<u64>(), 0.0..=1.0f64, 0.0..=1.0f64, 0usize..6).prop_map(|(seed, quality, dup, distractors)| {
        let cfg = GenConfig {
            attention_quality: quality,
            duplicate_prob: dup,
            distractors_per_frame: distractors,
            ..small_gen()
        };
        let clip = generate_clip(&cfg, seed);
        let attention = generate_attention(&cfg, &clip, seed).into_iter().collect();
        ClipRecord { clip, attention }
    })
}

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0..2.0f64, rows * cols).prop_map(move |v| Tensor::new(rows, cols, v).unwrap())
}

fn small_model() -> ModelConfig {
    ModelConfig {
        d_v: 32,
        d_c: 4,
        d_r: 104,
        d_p: 8,
        layers: 1,
        ..ModelConfig::default()
    }
}

// ---------- scene ----------

pub fn iou_symmetric() -> Result<(), String> {
    check("iou_symmetric", (bbox(), bbox()), |(a, b)| {
        let (x, y) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(x.to_bits(), y.to_bits());
        prop_assert!((0.0..=1.0).contains(&x));
        Ok(())
    })
}

pub fn iou_self_is_one() -> Result<(), String> {
    check("iou_self_is_one", bbox(), |a| {
        prop_assert_eq!(iou(&a, &a), 1.0);
        Ok(())
    })
}

pub fn generate_clip_reproducible() -> Result<(), String> {
    check("generate_clip_reproducible", any::<u64>(), |seed| {
        let cfg = small_gen();
        prop_assert_eq!(generate_clip(&cfg, seed), generate_clip(&cfg, seed));
        Ok(())
    })
}

pub fn annotations_backed_by_ground_truth() -> Result<(), String> {
    check("annotations_backed_by_ground_truth", (any::<u64>(), 1usize..4), |(seed, m)| {
        let cfg = GenConfig {
            interactive_triplets: m,
            ..small_gen()
        };
        let clip = generate_clip(&cfg, seed);
        let gt = clip.middle_frame().oracle_gt.clone().unwrap_or_default();
        prop_assert!(!clip.annotations.is_empty());
        for a in &clip.annotations {
            prop_assert!(gt.iter().any(|g| g.subject.class_id == a.subject_class
                && g.object.class_id == a.object_class
                && g.predicate_id == a.predicate_id));
        }
        Ok(())
    })
}

pub fn attention_nonnegative_with_positive_cell() -> Result<(), String> {
    check("attention_nonnegative_with_positive_cell", record(), |rec| {
        prop_assert!(!rec.attention.is_empty());
        for map in rec.attention.values() {
            prop_assert!(map.values.iter().all(|v| v.is_finite() && *v >= 0.0));
            prop_assert!(map.values.iter().any(|v| *v > 0.0));
        }
        Ok(())
    })
}

// ---------- ram ----------

pub fn reliability_range_and_unit_iff_single_cell() -> Result<(), String> {
    check("reliability_range_and_unit_iff_single_cell", attention_map(), |map| {
        let r = reliability(&map).r;
        prop_assert!(r > 0.0 && r <= 1.0, "r = {}", r);
        let nonzero = map.values.iter().filter(|v| **v > 0.0).count();
        prop_assert_eq!(r == 1.0, nonzero == 1, "r = {}, nonzero cells = {}", r, nonzero);
        Ok(())
    })
}

pub fn reliability_scale_invariant() -> Result<(), String> {
    check("reliability_scale_invariant", (attention_map(), 0.01..100.0f64), |(map, c)| {
        let scaled = AttentionMap::new(map.height, map.width, map.values.iter().map(|v| v * c).collect()).unwrap();
        let (a, b) = (reliability(&map).r, reliability(&scaled).r);
        prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        Ok(())
    })
}

/// Cut positions on cell boundaries (in pixels) splitting `n` cells.
fn cuts(n: usize, picks: &[usize]) -> Vec<f64> {
    let cell = IMAGE_SIZE / n as f64;
    let mut inner: BTreeSet<usize> = picks.iter().map(|p| 1 + p % n.max(1)).filter(|&p| p < n).collect();
    inner.insert(0);
    inner.insert(n);
    inner.into_iter().map(|i| i as f64 * cell).collect()
}

pub fn concentration_partition_sums_to_one() -> Result<(), String> {
    let strategy = (attention_map(), prop::collection::vec(0usize..16, 0..4), prop::collection::vec(0usize..16, 0..4));
    check("concentration_partition_sums_to_one", strategy, |(map, rc, cc)| {
        let ys = cuts(map.height, &rc);
        let xs = cuts(map.width, &cc);
        let mut total = 0.0;
        let mut cells = 0;
        for yw in ys.windows(2) {
            for xw in xs.windows(2) {
                let b = BoundingBox::new(xw[0], yw[0], xw[1], yw[1]).unwrap();
                cells += map.cell_count(&b);
                total += ok(concentration(&map, &b))?;
            }
        }
        prop_assert_eq!(cells, map.height * map.width);
        prop_assert!((total - 1.0).abs() <= 1e-12, "sum = {}", total);
        Ok(())
    })
}

pub fn grounding_score_range_and_monotone() -> Result<(), String> {
    check(
        "grounding_score_range_and_monotone",
        (attention_map(), bbox(), 0.0..5.0f64, any::<prop::sample::Index>()),
        |(map, b, delta, pick)| {
            let (rows, cols) = map.box_cells(&b);
            if rows.is_empty() || cols.is_empty() {
                prop_assert!(grounding_score(&map, &b).is_err());
                return Ok(());
            }
            let gs = ok(grounding_score(&map, &b))?;
            prop_assert!((0.0..1.0).contains(&gs), "gs = {}", gs);
            let cells: Vec<(usize, usize)> = rows.flat_map(|r| cols.clone().map(move |c| (r, c))).collect();
            let (r, c) = cells[pick.index(cells.len())];
            let mut values = map.values.clone();
            values[r * map.width + c] += delta;
            let bumped = AttentionMap::new(map.height, map.width, values).unwrap();
            let gs2 = ok(grounding_score(&bumped, &b))?;
            prop_assert!(gs2 >= gs - 1e-15, "{} -> {}", gs, gs2);
            prop_assert!(gs2 < 1.0);
            Ok(())
        },
    )
}

/// Independent class-level partition: every annotation marks all
/// (class-s detection, class-o detection) candidate pairs positive.
fn class_level_oracle(frame: &Frame, rec: &ClipRecord) -> (BTreeMap<(u32, u32), BTreeSet<usize>>, BTreeSet<(u32, u32)>) {
    let candidates: BTreeSet<(u32, u32)> = candidate_pairs(frame, true).into_iter().collect();
    let mut pos: BTreeMap<(u32, u32), BTreeSet<usize>> = BTreeMap::new();
    for a in &rec.clip.annotations {
        for s in frame.detections.iter().filter(|d| d.class_id == a.subject_class) {
            for o in frame.detections.iter().filter(|d| d.class_id == a.object_class && d.id != s.id) {
                if candidates.contains(&(s.id, o.id)) {
                    pos.entry((s.id, o.id)).or_default().insert(a.predicate_id);
                }
            }
        }
    }
    let neg = candidates.into_iter().filter(|p| !pos.contains_key(p)).collect();
    (pos, neg)
}

fn partition_sets(p: &MatchPartition) -> (BTreeMap<(u32, u32), BTreeSet<usize>>, BTreeSet<(u32, u32)>) {
    (
        p.positives.iter().map(|x| ((x.s, x.o), x.predicates.iter().copied().collect())).collect(),
        p.negatives.iter().copied().collect(),
    )
}

pub fn disabled_ram_is_class_level() -> Result<(), String> {
    check("disabled_ram_is_class_level", record(), |rec| {
        let off = RamConfig {
            enabled: false,
            ..RamConfig::default()
        };
        let (_, p) = match_clip(&rec, &off);
        prop_assert_eq!(partition_sets(&p), class_level_oracle(rec.clip.middle_frame(), &rec));
        // a reliability gate nothing can pass degrades to the same partition
        let gated = RamConfig {
            tau_r: 1.0,
            ..RamConfig::default()
        };
        let single_cell = rec.attention.values().any(|m| reliability(m).r == 1.0);
        if !single_cell {
            prop_assert_eq!(match_clip(&rec, &gated).1, p);
        }
        Ok(())
    })
}

pub fn ram_never_adds_positives() -> Result<(), String> {
    check("ram_never_adds_positives", (record(), 0.0..1.0f64, 0.0..0.99f64), |(rec, tau_r, tau_gs)| {
        let on = RamConfig { tau_r, tau_gs, ..RamConfig::default() };
        let off = RamConfig { enabled: false, ..on.clone() };
        let (a, b) = (match_clip(&rec, &on).1, match_clip(&rec, &off).1);
        prop_assert!(a.positives.len() <= b.positives.len());
        prop_assert!(a.positive_set().is_subset(&b.positive_set()));
        Ok(())
    })
}

pub fn match_count_monotone_in_tau_gs() -> Result<(), String> {
    check("match_count_monotone_in_tau_gs", (record(), 0.0..0.99f64, 0.0..0.99f64), |(rec, x, y)| {
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        let count = |tau_gs| match_clip(&rec, &RamConfig { tau_gs, ..RamConfig::default() }).1.positives.len();
        prop_assert!(count(hi) <= count(lo));
        Ok(())
    })
}

pub fn partition_covers_candidates_once() -> Result<(), String> {
    check("partition_covers_candidates_once", (record(), any::<bool>()), |(rec, enabled)| {
        let cfg = RamConfig { enabled, ..RamConfig::default() };
        let (_, p) = match_clip(&rec, &cfg);
        let mut all: Vec<(u32, u32)> = p.positives.iter().map(|x| (x.s, x.o)).chain(p.negatives.iter().copied()).collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), n, "a pair appears twice");
        let mut expected = candidate_pairs(rec.clip.middle_frame(), true);
        expected.sort_unstable();
        prop_assert_eq!(all, expected);
        Ok(())
    })
}

// ---------- diff ----------

pub fn primitive_gradcheck() -> Result<(), String> {
    check("primitive_gradcheck", (0..PRIMITIVES.len(), any::<u64>()), |(i, seed)| {
        let c = ok(check_primitive(PRIMITIVES[i], seed, 1e-4))?;
        prop_assert!(c.max_rel_error < 1e-5, "{} seed {}: {}", c.primitive, seed, c.max_rel_error);
        Ok(())
    })
}

fn expression<'t>(tape: &'t Tape, a: &Tensor, b: &Tensor) -> pavsgg::Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let va = tape.variable(a.clone());
    let vb = tape.variable(b.clone());
    let h = va.matmul(vb.transpose())?.sigmoid().softmax(1)?;
    let loss = h.mul(h)?.sum(None)?.add(va.layer_norm(1, 1e-5)?.exp().mean())?;
    Ok((loss, va, vb))
}

pub fn backward_deterministic() -> Result<(), String> {
    let strategy = (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(n, m, d)| (tensor(n, d), tensor(m, d)));
    check("backward_deterministic", strategy, |(a, b)| {
        let grads = || -> pavsgg::Result<(Vec<u64>, Vec<u64>)> {
            let tape = Tape::new();
            let (loss, va, vb) = expression(&tape, &a, &b)?;
            let g = tape.backward(loss)?;
            let bits = |v: Var| g.get(v).map(|t| t.data().iter().map(|x| x.to_bits()).collect()).unwrap_or_default();
            Ok((bits(va), bits(vb)))
        };
        prop_assert_eq!(ok(grads())?, ok(grads())?);
        Ok(())
    })
}

pub fn softmax_rows_sum_to_one() -> Result<(), String> {
    let strategy = (1usize..9, 1usize..9, 0.1..50.0f64).prop_flat_map(|(r, c, s)| (tensor(r, c), Just(s)));
    check("softmax_rows_sum_to_one", strategy, |(x, s)| {
        let tape = Tape::new();
        let y = ok(tape.constant(x).scale(s).softmax(1))?.value();
        for r in 0..y.rows() {
            let sum: f64 = y.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "row {} sums to {}", r, sum);
        }
        Ok(())
    })
}

// ---------- relnet ----------

fn model_and_clip() -> impl Strategy<Value = (ModelConfig, ClipInputs)> {
    (any::<u64>(), any::<u64>()).prop_map(|(model_seed, clip_seed)| {
        let cfg = ModelConfig { seed: model_seed, ..small_model() };
        let clip = generate_clip(&small_gen(), clip_seed);
        let inputs = ClipInputs::build(&clip, &cfg).unwrap();
        (cfg, inputs)
    })
}

/// Replaces every parameter with `N(0, 0.3^2)`-ish noise so heads are not
/// at their zero initialization.
fn randomized(cfg: &ModelConfig, seed: u64) -> (RelNet, pavsgg::diff::ParamStore) {
    use rand::{Rng, SeedableRng};
    let (net, mut store) = RelNet::init(cfg).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    (net, store)
}

pub fn gram_symmetric_psd() -> Result<(), String> {
    check("gram_symmetric_psd", (model_and_clip(), any::<u64>()), |((cfg, inputs), seed)| {
        let (net, store) = randomized(&cfg, seed);
        let outs = ok(net.infer(&store, &inputs, true))?;
        for out in &outs {
            let g = &out.g_l;
            let n = g.rows();
            prop_assert_eq!(g.cols(), n);
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(g.get(i, j).to_bits(), g.get(j, i).to_bits());
                }
            }
            // x^T G x >= 0 for a few deterministic probe vectors
            let scale: f64 = (0..n).map(|i| g.get(i, i).abs()).sum::<f64>().max(1.0);
            for probe in 0..4u64 {
                let x: Vec<f64> = (0..n).map(|i| (((i as u64 + 1) * (probe + 3)) % 7) as f64 - 3.0).collect();
                let q: f64 = (0..n).map(|i| (0..n).map(|j| x[i] * g.get(i, j) * x[j]).sum::<f64>()).sum();
                prop_assert!(q >= -1e-9 * scale, "x^T G x = {}", q);
            }
        }
        Ok(())
    })
}

pub fn attention_rows_sum_to_one() -> Result<(), String> {
    let strategy = (1usize..7, 1usize..7, 1usize..6).prop_flat_map(|(n, m, d)| {
        (tensor(n, d), tensor(m, d), tensor(n, 3), tensor(m, 3), any::<bool>())
    });
    check("attention_rows_sum_to_one", strategy, |(q, k, pq, pk, gated)| {
        let tape = Tape::new();
        let g = ok(tape.constant(pq).matmul(tape.constant(pk).transpose()))?;
        let d = q.cols();
        let w = ok(attention_weights(tape.constant(q), tape.constant(k), gated.then_some(g), d))?.value();
        for r in 0..w.rows() {
            let sum: f64 = w.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "row {} sums to {}", r, sum);
        }
        Ok(())
    })
}

pub fn pam_off_relation_path_ignores_affinity_init() -> Result<(), String> {
    check(
        "pam_off_relation_path_ignores_affinity_init",
        (model_and_clip(), any::<u64>(), 0.05..1.0f64),
        |((cfg, inputs), seed, eps)| {
            let (net, store) = randomized(&cfg, seed);
            let mut perturbed = store.clone();
            let ids: Vec<_> = perturbed.ids().collect();
            for id in ids {
                if perturbed.param(id).name.starts_with("init.") {
                    for v in perturbed.value_mut(id).data_mut() {
                        *v += eps;
                    }
                }
            }
            let a = ok(net.infer(&store, &inputs, false))?;
            let b = ok(net.infer(&perturbed, &inputs, false))?;
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(&x.pc, &y.pc);
            }
            Ok(())
        },
    )
}

pub fn pair_permutation_equivariance() -> Result<(), String> {
    check(
        "pair_permutation_equivariance",
        (model_and_clip(), any::<u64>(), any::<bool>()),
        |((cfg, inputs), seed, pam)| {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let (net, store) = randomized(&cfg, seed);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut permuted = inputs.clone();
            let mut perms = Vec::new();
            for f in &mut permuted.frames {
                let n = f.pairs.len();
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                let width = f.features.cols();
                f.pairs = perm.iter().map(|&i| f.pairs[i]).collect();
                f.subject_classes = perm.iter().map(|&i| f.subject_classes[i]).collect();
                f.object_classes = perm.iter().map(|&i| f.object_classes[i]).collect();
                let old = f.features.clone();
                f.features = Tensor::from_fn(n, width, |r, c| old.get(perm[r], c));
                perms.push(perm);
            }
            let a = ok(net.infer(&store, &inputs, pam))?;
            let b = ok(net.infer(&store, &permuted, pam))?;
            for ((x, y), perm) in a.iter().zip(&b).zip(&perms) {
                for (r, &src) in perm.iter().enumerate() {
                    prop_assert!((x.pa[src] - y.pa[r]).abs() <= 1e-10);
                    for k in 0..x.pc.cols() {
                        prop_assert!((x.pc.get(src, k) - y.pc.get(r, k)).abs() <= 1e-10);
                    }
                }
            }
            Ok(())
        },
    )
}

pub fn heads_strictly_inside_unit_interval() -> Result<(), String> {
    check("heads_strictly_inside_unit_interval", (model_and_clip(), any::<u64>()), |((cfg, inputs), seed)| {
        let (net, store) = randomized(&cfg, seed);
        for out in ok(net.infer(&store, &inputs, true))? {
            prop_assert!(out.pa.iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!(out.pc.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        Ok(())
    })
}

// ---------- losses ----------

fn pa_column<'t>(tape: &'t Tape, values: &[f64]) -> Var<'t> {
    tape.constant(Tensor::column(values.to_vec()))
}

pub fn balanced_bce_replication() -> Result<(), String> {
    let probs = || prop::collection::vec(0.02..0.98f64, 1..5);
    check("balanced_bce_replication", (probs(), probs(), 2usize..5, any::<bool>()), |(pos, neg, k, rep_pos)| {
        let eval = |pos: &[f64], neg: &[f64]| -> pavsgg::Result<(f64, f64)> {
            let tape = Tape::new();
            let values: Vec<f64> = pos.iter().chain(neg).copied().collect();
            let col = pa_column(&tape, &values);
            let p: Vec<usize> = (0..pos.len()).collect();
            let n: Vec<usize> = (pos.len()..values.len()).collect();
            Ok((loss_pa_balanced(col, &p, &n)?.item(), loss_pa_standard(col, &p, &n)?.item()))
        };
        let rep = |v: &[f64]| -> Vec<f64> { (0..k).flat_map(|_| v.iter().copied()).collect() };
        let (b0, s0) = ok(eval(&pos, &neg))?;
        let (b1, s1) = if rep_pos { ok(eval(&rep(&pos), &neg))? } else { ok(eval(&pos, &rep(&neg)))? };
        prop_assert!((b0 - b1).abs() <= 1e-12, "balanced {} vs {}", b0, b1);
        let mean_term = |v: &[f64], positive: bool| {
            v.iter().map(|p| if positive { -p.ln() } else { -(1.0 - p).ln() }).sum::<f64>() / v.len() as f64
        };
        if (mean_term(&pos, true) - mean_term(&neg, false)).abs() > 1e-6 {
            prop_assert!((s0 - s1).abs() > 1e-12, "standard unchanged: {} vs {}", s0, s1);
        }
        Ok(())
    })
}

pub fn losses_nonnegative_and_zero_when_degenerate() -> Result<(), String> {
    let strategy = (1usize..6, 1usize..5).prop_flat_map(|(n, c)| {
        (
            prop::collection::vec(0.0..=1.0f64, n),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(0.0..=1.0f64, n * c),
            prop::collection::vec(any::<bool>(), n * c),
            Just(c),
            tensor(n, n),
        )
    });
    check("losses_nonnegative_and_zero_when_degenerate", strategy, |(pa, labels, pc, rel, c, g)| {
        let n = pa.len();
        let tape = Tape::new();
        let col = pa_column(&tape, &pa);
        let targets: Vec<PaTarget> = labels.iter().enumerate().map(|(i, &y)| PaTarget::hard(i, y)).collect();
        for mode in [PaBceMode::Balanced, PaBceMode::Standard] {
            prop_assert!(ok(pa_bce(col, &targets, mode))?.item() >= 0.0);
            // predictions equal to the labels
            let exact: Vec<f64> = labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
            let l = ok(pa_bce(pa_column(&tape, &exact), &targets, mode))?.item();
            prop_assert!(l.abs() < 1e-6, "{:?} at exact labels: {}", mode, l);
        }
        let rows: Vec<usize> = (0..n).collect();
        let pc_t = Tensor::new(n, c, pc).unwrap();
        let rel_t = Tensor::new(n, c, rel.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
        prop_assert!(ok(loss_rel(tape.constant(pc_t), &rows, &rel_t))?.item() >= 0.0);
        prop_assert!(ok(loss_rel(tape.constant(rel_t.clone()), &rows, &rel_t))?.item().abs() < 1e-6);
        let soft: Vec<Option<f64>> = pa.iter().map(|&p| Some(p)).collect();
        for mode in [MarginMode::Hard, MarginMode::Soft, MarginMode::Adaptive] {
            prop_assert!(ok(loss_pam(tape.constant(g.clone()), &soft, 1.0, mode, 512, 1))?.item() >= 0.0);
        }
        // no positive or no negative: nothing to rank
        let all_neg = vec![Some(0.0); n];
        prop_assert_eq!(ok(loss_pam(tape.constant(g), &all_neg, 1.0, MarginMode::Hard, 512, 1))?.item(), 0.0);
        Ok(())
    })
}

pub fn hard_pam_shift_invariant() -> Result<(), String> {
    let strategy = (2usize..7).prop_flat_map(|n| {
        (tensor(n, n), prop::collection::vec(prop::option::of(any::<bool>()), n), -5.0..5.0f64)
    });
    check("hard_pam_shift_invariant", strategy, |(g, labels, c)| {
        let labels: Vec<Option<f64>> = labels.iter().map(|l| l.map(|b| if b { 1.0 } else { 0.0 })).collect();
        let tape = Tape::new();
        let a = ok(loss_pam(tape.constant(g.clone()), &labels, 0.7, MarginMode::Hard, 512, 3))?.item();
        let b = ok(loss_pam(tape.constant(g).shift(c), &labels, 0.7, MarginMode::Hard, 512, 3))?.item();
        prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
        Ok(())
    })
}

pub fn soft_target_between_inputs() -> Result<(), String> {
    check(
        "soft_target_between_inputs",
        (0.0..=1.0f64, 0.0..=1.0f64, 0.0..20.0f64, 0.01..10.0f64),
        |(y, t, dt, alpha)| {
            let v = soft_pa_target(y, t, dt, alpha);
            prop_assert!(v >= y.min(t) - 1e-15 && v <= y.max(t) + 1e-15, "{} not within [{}, {}]", v, y, t);
            Ok(())
        },
    )
}

pub fn adaptive_margin_range() -> Result<(), String> {
    check("adaptive_margin_range", (0.01..5.0f64, 0.5..=1.0f64, 0.0..=0.5f64), |(m, yp, yn)| {
        let v = adaptive_margin(m, yp, yn);
        prop_assert!((0.0..=m + 1e-15).contains(&v), "margin {} outside [0, {}]", v, m);
        Ok(())
    })
}

// ---------- pipeline ----------

pub fn propagation_keeps_middle_partition() -> Result<(), String> {
    check("propagation_keeps_middle_partition", (record(), any::<bool>()), |(rec, enabled)| {
        let (_, middle) = match_clip(&rec, &RamConfig { enabled, ..RamConfig::default() });
        let prop = propagate_labels(&rec.clip, &middle, true);
        let m = &prop.frames[rec.clip.middle_index];
        prop_assert_eq!(m.delta_t, 0);
        prop_assert_eq!(&m.partition, &middle);
        Ok(())
    })
}

pub fn propagation_partitions_disjoint() -> Result<(), String> {
    check("propagation_partitions_disjoint", (record(), any::<bool>()), |(rec, enabled)| {
        let (_, middle) = match_clip(&rec, &RamConfig { enabled, ..RamConfig::default() });
        let prop = propagate_labels(&rec.clip, &middle, true);
        prop_assert_eq!(prop.frames.len(), rec.clip.frames.len());
        for (f, frame) in prop.frames.iter().zip(&rec.clip.frames) {
            let pos = f.partition.positive_set();
            let neg: BTreeSet<(u32, u32)> = f.partition.negatives.iter().copied().collect();
            prop_assert!(pos.is_disjoint(&neg));
            let all: BTreeSet<(u32, u32)> = pos.union(&neg).copied().collect();
            let expected: BTreeSet<(u32, u32)> = candidate_pairs(frame, true).into_iter().collect();
            prop_assert_eq!(all, expected);
        }
        Ok(())
    })
}

pub fn cosine_schedule_non_increasing() -> Result<(), String> {
    check("cosine_schedule_non_increasing", (1e-6..1.0f64, 1u64..5000, 0.0..1.0f64), |(base, total, frac)| {
        let step = ((total as f64) * frac) as u64;
        let (a, b) = (cosine_lr(base, step, total), cosine_lr(base, step + 1, total));
        prop_assert!(b <= a, "lr rose from {} to {}", a, b);
        prop_assert!(a >= 0.0 && a <= base);
        Ok(())
    })
}

// ---------- evalrank ----------

/// A random frame with `pairs` person-object candidates, ground truth and
/// a matching model output.
fn eval_case() -> impl Strategy<Value = (Frame, ForwardOutput, Vec<GroundTruthTriplet>)> {
    (1usize..4, 1usize..5, 2usize..5).prop_flat_map(|(persons, objects, c)| {
        let n = persons + objects;
        let pairs = persons * (n - 1);
        (
            prop::collection::vec(bbox(), n),
            prop::collection::vec(0.05..1.0f64, n),
            prop::collection::vec(0.001..1.0f64, pairs * c),
            prop::collection::vec(0.001..1.0f64, pairs),
            prop::collection::vec((0..persons, 0..objects, 0..c, any::<bool>()), 0..5),
            Just((persons, c)),
        )
            .prop_map(|(boxes, conf, pc, pa, gts, (persons, c))| {
                let detections: Vec<Detection> = boxes
                    .iter()
                    .enumerate()
                    .map(|(i, b)| Detection {
                        id: i as u32,
                        bbox: *b,
                        class_id: if i < persons { PERSON_CLASS } else { 1 + i % 3 },
                        confidence: conf[i],
                        feature: vec![],
                    })
                    .collect();
                let frame = Frame { t: 0, detections, oracle_gt: None };
                let pairs = candidate_pairs(&frame, true);
                let gt = gts
                    .iter()
                    .map(|&(s, o, p, exact)| {
                        let (sd, od) = (&frame.detections[s], &frame.detections[persons + o]);
                        // either a hit candidate or a slightly shifted box
                        let shift = if exact { 0.0 } else { 0.3 * od.bbox.width() };
                        GroundTruthTriplet {
                            subject: ClassedBox { bbox: sd.bbox, class_id: sd.class_id },
                            predicate_id: p,
                            object: ClassedBox {
                                bbox: BoundingBox { x1: od.bbox.x1 + shift, x2: od.bbox.x2 + shift, ..od.bbox },
                                class_id: od.class_id,
                            },
                        }
                    })
                    .collect();
                let out = ForwardOutput {
                    t: 0,
                    pc: Tensor::new(pairs.len(), c, pc).unwrap(),
                    pa,
                    g_l: Tensor::zeros(pairs.len(), pairs.len()),
                    seq: (0..pairs.len()).map(|i| (0, i)).collect(),
                    pairs,
                };
                (frame, out, gt)
            })
    })
}

fn keys(v: &[RankedTriplet]) -> Vec<(u32, u32, usize)> {
    v.iter().map(|r| (r.subject, r.object, r.predicate)).collect()
}

pub fn pa_scaling_preserves_ranking() -> Result<(), String> {
    check("pa_scaling_preserves_ranking", (eval_case(), 0.05..=1.0f64), |((frame, out, gt), c)| {
        let mut scaled = out.clone();
        scaled.pa.iter_mut().for_each(|v| *v *= c);
        for protocol in Protocol::ALL {
            let a = ok(rank_frame(&out, &frame, protocol, true))?;
            let b = ok(rank_frame(&scaled, &frame, protocol, true))?;
            prop_assert_eq!(keys(&a), keys(&b));
            for k in [1, 3, 10] {
                prop_assert_eq!(recall_at_k(&a, &frame, &gt, k, 0.5), recall_at_k(&b, &frame, &gt, k, 0.5));
            }
        }
        Ok(())
    })
}

pub fn with_constraint_within_no_constraint() -> Result<(), String> {
    check("with_constraint_within_no_constraint", (eval_case(), 1usize..12, any::<bool>()), |((frame, out, gt), k, pa)| {
        let wc = ok(rank_frame(&out, &frame, Protocol::WithConstraint, pa))?;
        let nc = ok(rank_frame(&out, &frame, Protocol::NoConstraint, pa))?;
        let pool: BTreeSet<_> = keys(&nc).into_iter().collect();
        prop_assert!(keys(&wc[..k.min(wc.len())]).iter().all(|x| pool.contains(x)));
        // once K covers the whole pool no constraint can only gain
        let full = nc.len();
        if let (Some(w), Some(n)) = (recall_at_k(&wc, &frame, &gt, k, 0.5), recall_at_k(&nc, &frame, &gt, full, 0.5)) {
            prop_assert!(n >= w, "NC@{} = {} < WC@{} = {}", full, n, k, w);
        }
        Ok(())
    })
}

pub fn recall_monotone_in_k() -> Result<(), String> {
    check("recall_monotone_in_k", (eval_case(), any::<bool>(), any::<bool>()), |((frame, out, gt), wc, pa)| {
        let protocol = if wc { Protocol::WithConstraint } else { Protocol::NoConstraint };
        let ranked = ok(rank_frame(&out, &frame, protocol, pa))?;
        let mut last = 0.0;
        for k in 1..=ranked.len() + 1 {
            let Some(r) = recall_at_k(&ranked, &frame, &gt, k, 0.5) else {
                prop_assert!(gt.is_empty());
                return Ok(());
            };
            prop_assert!(r >= last, "R@{} = {} < {}", k, r, last);
            last = r;
        }
        Ok(())
    })
}

pub fn ranking_is_total_order() -> Result<(), String> {
    let triplet = (0u32..3, 0u32..3, 0usize..3, prop_oneof![Just(0.5), Just(0.25), 0.0..1.0f64])
        .prop_map(|(subject, object, predicate, score)| RankedTriplet { subject, object, predicate, score });
    check("ranking_is_total_order", (triplet.clone(), triplet.clone(), triplet), |(a, b, c)| {
        prop_assert_eq!(compare_ranked(&a, &b), compare_ranked(&b, &a).reverse());
        prop_assert_eq!(compare_ranked(&a, &a), Ordering::Equal);
        if compare_ranked(&a, &b) == Ordering::Equal {
            prop_assert_eq!(a, b);
        }
        if compare_ranked(&a, &b) != Ordering::Greater && compare_ranked(&b, &c) != Ordering::Greater {
            prop_assert!(compare_ranked(&a, &c) != Ordering::Greater);
        }
        Ok(())
    })
}
