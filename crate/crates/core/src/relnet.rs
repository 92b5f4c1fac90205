//! Relation network over subject-object pairs.
//!
//! Every candidate pair carries a relation embedding `R` and an affinity
//! embedding `P`. Each layer runs a spatial block (pairs of one frame) and a
//! temporal block (each frame's pairs attending over a sliding window of
//! frames). With gating on, attention logits are scaled elementwise by
//! `sigmoid(P_q P_k^T)`. Heads decode per-predicate scores from `R` and a
//! predicate-agnostic pair affinity from `P`.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ram::candidate_pairs;
use crate::scene::{Detection, VideoClip};

const LN_EPS: f64 = 1e-5;
const MODEL_CONFIG_FILE: &str = "model_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_v: usize,
    /// Class-embedding width.
    pub d_c: usize,
    /// Relation width; must equal `3 * d_v + 2 * d_c`.
    pub d_r: usize,
    /// Affinity width.
    pub d_p: usize,
    pub layers: usize,
    pub num_predicates: usize,
    pub num_classes: usize,
    /// Frames attended jointly by the temporal block.
    pub temporal_window: usize,
    pub pam: bool,
    pub person_subjects: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_v: 32,
            d_c: 8,
            d_r: 112,
            d_p: 16,
            layers: 2,
            num_predicates: 6,
            num_classes: 8,
            temporal_window: 2,
            pam: true,
            person_subjects: true,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_v", self.d_v),
            ("d_c", self.d_c),
            ("d_r", self.d_r),
            ("d_p", self.d_p),
            ("layers", self.layers),
            ("num_predicates", self.num_predicates),
            ("num_classes", self.num_classes),
            ("temporal_window", self.temporal_window),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("model {name} must be >= 1")));
            }
        }
        if self.d_r != 3 * self.d_v + 2 * self.d_c {
            return Err(Error::InvalidConfig(format!(
                "d_r = {} but pair construction yields 3*{} + 2*{} = {}",
                self.d_r,
                self.d_v,
                self.d_c,
                3 * self.d_v + 2 * self.d_c
            )));
        }
        Ok(())
    }
}

/// Frames attended by frame `t` in a clip of `frames` frames.
pub fn temporal_window(t: usize, frames: usize, window: usize) -> Range<usize> {
    if frames <= window {
        return 0..frames;
    }
    let start = (t + 1).saturating_sub(window).min(frames - window);
    start..start + window
}

/// Subject, object and union features of a pair. The union of two regions
/// is approximated by the elementwise maximum of their features.
pub fn pair_features(subject: &Detection, object: &Detection) -> Vec<f64> {
    let mut row = Vec::with_capacity(3 * subject.feature.len());
    row.extend_from_slice(&subject.feature);
    row.extend_from_slice(&object.feature);
    row.extend(subject.feature.iter().zip(&object.feature).map(|(a, b)| a.max(*b)));
    row
}

/// Row-stochastic attention `softmax((Q K^T / sqrt(d)) * sigmoid(G))`;
/// without a gate the scaled logits go straight to the softmax.
pub fn attention_weights<'t>(q: Var<'t>, k: Var<'t>, gate: Option<Var<'t>>, d: usize) -> Result<Var<'t>> {
    let mut logits = q.matmul(k.transpose())?.scale(1.0 / (d as f64).sqrt());
    if let Some(g) = gate {
        logits = logits.mul(g.sigmoid())?;
    }
    logits.softmax(1)
}

/// Initial relation row `[f_s | f_o | union | emb(c_s) | emb(c_o)]`.
pub fn build_pair_representation(subject: &Detection, object: &Detection, class_embeddings: &Tensor) -> Result<Vec<f64>> {
    if subject.feature.len() != object.feature.len() {
        return Err(Error::shape(
            "pair features",
            [1, subject.feature.len()],
            [1, object.feature.len()],
        ));
    }
    for c in [subject.class_id, object.class_id] {
        if c >= class_embeddings.rows() {
            return Err(Error::shape("class embedding", [c, 0], class_embeddings.shape()));
        }
    }
    let mut row = pair_features(subject, object);
    row.extend_from_slice(class_embeddings.row(subject.class_id));
    row.extend_from_slice(class_embeddings.row(object.class_id));
    Ok(row)
}

/// Model-ready view of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInputs {
    pub t: usize,
    pub pairs: Vec<(u32, u32)>,
    /// `n x 3 d_v` feature block.
    pub features: Tensor,
    pub subject_classes: Vec<usize>,
    pub object_classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipInputs {
    pub clip_id: String,
    pub frames: Vec<FrameInputs>,
}

impl ClipInputs {
    pub fn build(clip: &VideoClip, cfg: &ModelConfig) -> Result<Self> {
        let mut frames = Vec::with_capacity(clip.frames.len());
        for frame in &clip.frames {
            let pairs = candidate_pairs(frame, cfg.person_subjects);
            let mut data = Vec::with_capacity(pairs.len() * 3 * cfg.d_v);
            let (mut sc, mut oc) = (Vec::new(), Vec::new());
            for &(s, o) in &pairs {
                let (s, o) = (frame.detection(s).expect("pair ids"), frame.detection(o).expect("pair ids"));
                for d in [s, o] {
                    if d.feature.len() != cfg.d_v {
                        return Err(Error::shape("detection feature", [1, d.feature.len()], [1, cfg.d_v]));
                    }
                    if d.class_id >= cfg.num_classes {
                        return Err(Error::Data(format!(
                            "{}: class {} outside vocabulary of {}",
                            clip.clip_id, d.class_id, cfg.num_classes
                        )));
                    }
                }
                data.extend(pair_features(s, o));
                sc.push(s.class_id);
                oc.push(o.class_id);
            }
            frames.push(FrameInputs {
                t: frame.t,
                features: Tensor::new(pairs.len(), 3 * cfg.d_v, data)?,
                pairs,
                subject_classes: sc,
                object_classes: oc,
            });
        }
        Ok(Self {
            clip_id: clip.clip_id.clone(),
            frames,
        })
    }
}

#[derive(Clone, Debug)]
struct Mlp2 {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct BlockIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    ffn: Mlp2,
    upd: Mlp2,
}

/// Parameter layout of the network; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct RelNet {
    pub cfg: ModelConfig,
    class_emb: ParamId,
    init: Mlp2,
    blocks: Vec<(BlockIds, BlockIds)>,
    pc_w: ParamId,
    pc_b: ParamId,
    pa: Mlp2,
}

/// Parameter shapes in registration order. Final head layers start at zero.
fn layout(cfg: &ModelConfig) -> Vec<(String, [usize; 2], bool)> {
    let (dr, dp) = (cfg.d_r, cfg.d_p);
    let mut v: Vec<(String, [usize; 2], bool)> = vec![("class_emb".into(), [cfg.num_classes, cfg.d_c], false)];
    let mlp = |v: &mut Vec<(String, [usize; 2], bool)>, name: &str, i: usize, h: usize, o: usize, zero_last: bool| {
        v.push((format!("{name}.w1"), [i, h], false));
        v.push((format!("{name}.b1"), [1, h], true));
        v.push((format!("{name}.w2"), [h, o], zero_last));
        v.push((format!("{name}.b2"), [1, o], true));
    };
    mlp(&mut v, "init", dr, dp, dp, false);
    for l in 0..cfg.layers {
        for kind in ["spatial", "temporal"] {
            let p = format!("layer{l}.{kind}");
            for w in ["wq", "wk", "wv"] {
                v.push((format!("{p}.{w}"), [dr, dr], false));
            }
            mlp(&mut v, &format!("{p}.ffn"), dr, 2 * dr, dr, false);
            mlp(&mut v, &format!("{p}.upd"), dr, dp, dp, false);
        }
    }
    v.push(("pc.w".into(), [dr, cfg.num_predicates], true));
    v.push(("pc.b".into(), [1, cfg.num_predicates], true));
    mlp(&mut v, "pa", dp, dp, 1, true);
    v
}

struct MlpVars<'t> {
    w1: Var<'t>,
    b1: Var<'t>,
    w2: Var<'t>,
    b2: Var<'t>,
}

struct BlockVars<'t> {
    wq: Var<'t>,
    wk: Var<'t>,
    wv: Var<'t>,
    ffn: MlpVars<'t>,
    upd: MlpVars<'t>,
}

fn bias_rows<'t>(tape: &'t Tape, n: usize, b: Var<'t>) -> Result<Var<'t>> {
    tape.constant(Tensor::full(n, 1, 1.0)).matmul(b)
}

fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    x.matmul(w)?.add(bias_rows(x.tape(), x.shape()[0], b)?)
}

impl<'t> MlpVars<'t> {
    /// `Linear -> ReLU -> Linear`, optionally with LayerNorm after the first
    /// linear map.
    fn apply(&self, x: Var<'t>, norm: bool) -> Result<Var<'t>> {
        let mut h = linear(x, self.w1, self.b1)?;
        if norm {
            h = h.layer_norm(1, LN_EPS)?;
        }
        linear(h.relu(), self.w2, self.b2)
    }
}

/// Per-frame state after a forward pass on a tape.
pub struct FrameVars<'t> {
    pub r: Var<'t>,
    pub p: Var<'t>,
    /// `n x C_pred` predicate scores.
    pub pc: Var<'t>,
    /// `n x 1` pair affinity.
    pub pa: Var<'t>,
    /// Pre-sigmoid `pc`.
    pub pc_logits: Var<'t>,
    /// Pre-sigmoid `pa`.
    pub pa_logits: Var<'t>,
}

pub struct ForwardVars<'t> {
    /// `None` for frames without candidate pairs.
    pub frames: Vec<Option<FrameVars<'t>>>,
    pub window: usize,
}

impl<'t> ForwardVars<'t> {
    /// Final affinity Gram matrix over the temporal window of frame `t`,
    /// with the `(frame, pair)` origin of each row.
    pub fn gram(&self, t: usize) -> Result<Option<(Var<'t>, Vec<(usize, usize)>)>> {
        let mut parts = Vec::new();
        let mut seq = Vec::new();
        for f in temporal_window(t, self.frames.len(), self.window) {
            if let Some(fv) = &self.frames[f] {
                parts.push(fv.p);
                seq.extend((0..fv.p.shape()[0]).map(|i| (f, i)));
            }
        }
        if parts.is_empty() {
            return Ok(None);
        }
        let p = Var::concat(&parts, 0)?;
        Ok(Some((p.matmul(p.transpose())?, seq)))
    }
}

/// Detached outputs for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub t: usize,
    pub pairs: Vec<(u32, u32)>,
    pub pc: Tensor,
    pub pa: Vec<f64>,
    /// Final Gram matrix over this frame's temporal window.
    pub g_l: Tensor,
    /// `(frame index, pair index)` of each `g_l` row.
    pub seq: Vec<(usize, usize)>,
}

fn xavier(rng: &mut ChaCha8Rng, shape: [usize; 2]) -> Tensor {
    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    Tensor::from_fn(shape[0], shape[1], |_, _| rng.gen_range(-a..a))
}

impl RelNet {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        for (name, shape, zero) in layout(cfg) {
            let value = if zero {
                Tensor::zeros(shape[0], shape[1])
            } else {
                xavier(&mut rng, shape)
            };
            store.add(name, value)?;
        }
        Ok((Self::bind(cfg, &store)?, store))
    }

    /// Resolves the layout against an existing store, checking shapes.
    pub fn bind(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let expected = layout(cfg);
        if store.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, config expects {}",
                store.len(),
                expected.len()
            )));
        }
        for (name, shape, _) in &expected {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if store.value(id).shape() != *shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    store.value(id).shape()
                )));
            }
        }
        let id = |n: &str| store.id(n).expect("checked above");
        let mlp = |p: &str| Mlp2 {
            w1: id(&format!("{p}.w1")),
            b1: id(&format!("{p}.b1")),
            w2: id(&format!("{p}.w2")),
            b2: id(&format!("{p}.b2")),
        };
        let block = |p: &str| BlockIds {
            wq: id(&format!("{p}.wq")),
            wk: id(&format!("{p}.wk")),
            wv: id(&format!("{p}.wv")),
            ffn: mlp(&format!("{p}.ffn")),
            upd: mlp(&format!("{p}.upd")),
        };
        Ok(Self {
            cfg: cfg.clone(),
            class_emb: id("class_emb"),
            init: mlp("init"),
            blocks: (0..cfg.layers)
                .map(|l| (block(&format!("layer{l}.spatial")), block(&format!("layer{l}.temporal"))))
                .collect(),
            pc_w: id("pc.w"),
            pc_b: id("pc.b"),
            pa: mlp("pa"),
        })
    }

    pub fn class_embeddings<'s>(&self, store: &'s ParamStore) -> &'s Tensor {
        store.value(self.class_emb)
    }

    fn mlp_vars<'t>(tape: &'t Tape, store: &ParamStore, m: &Mlp2) -> MlpVars<'t> {
        MlpVars {
            w1: tape.param(store, m.w1),
            b1: tape.param(store, m.b1),
            w2: tape.param(store, m.w2),
            b2: tape.param(store, m.b2),
        }
    }

    fn block_vars<'t>(tape: &'t Tape, store: &ParamStore, b: &BlockIds) -> BlockVars<'t> {
        BlockVars {
            wq: tape.param(store, b.wq),
            wk: tape.param(store, b.wk),
            wv: tape.param(store, b.wv),
            ffn: Self::mlp_vars(tape, store, &b.ffn),
            upd: Self::mlp_vars(tape, store, &b.upd),
        }
    }

    /// `R_0` rows and `P_0 = MLP_init(R_0)` for one frame.
    pub fn initial_state<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        frame: &FrameInputs,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let emb = tape.param(store, self.class_emb);
        let x = tape.constant(frame.features.clone());
        let es = emb.gather_rows(&frame.subject_classes)?;
        let eo = emb.gather_rows(&frame.object_classes)?;
        let r0 = Var::concat(&[x, es, eo], 1)?;
        let p0 = Self::mlp_vars(tape, store, &self.init).apply(r0, true)?;
        Ok((r0, p0))
    }

    /// One gated attention block; queries come from `(rq, pq)`, keys and
    /// values from `(rk, pk)`. Returns the updated query state and the gate
    /// Gram `P_q P_k^T`.
    fn block<'t>(
        &self,
        w: &BlockVars<'t>,
        rq: Var<'t>,
        pq: Var<'t>,
        rk: Var<'t>,
        pk: Var<'t>,
        pam: bool,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let q = rq.matmul(w.wq)?;
        let k = rk.matmul(w.wk)?;
        let v = rk.matmul(w.wv)?;
        let g = pq.matmul(pk.transpose())?;
        let attn = attention_weights(q, k, pam.then_some(g), self.cfg.d_r)?.matmul(v)?;
        let r = rq.add(w.ffn.apply(rq.add(attn)?, false)?)?.layer_norm(1, LN_EPS)?;
        let p = pq.add(w.upd.apply(attn, false)?)?;
        Ok((r, p, g))
    }

    /// Full forward pass recorded on `tape`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, clip: &ClipInputs) -> Result<ForwardVars<'t>> {
        self.forward_with(tape, store, clip, self.cfg.pam)
    }

    /// Forward pass with the gate forced on or off.
    pub fn forward_with<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        clip: &ClipInputs,
        pam: bool,
    ) -> Result<ForwardVars<'t>> {
        let n_frames = clip.frames.len();
        let mut state: Vec<Option<(Var<'t>, Var<'t>)>> = Vec::with_capacity(n_frames);
        for f in &clip.frames {
            state.push(if f.pairs.is_empty() {
                None
            } else {
                Some(self.initial_state(tape, store, f)?)
            });
        }
        for (spatial, temporal) in &self.blocks {
            let ws = Self::block_vars(tape, store, spatial);
            for s in state.iter_mut() {
                if let Some((r, p)) = *s {
                    let (r2, p2, _) = self.block(&ws, r, p, r, p, pam)?;
                    *s = Some((r2, p2));
                }
            }
            let wt = Self::block_vars(tape, store, temporal);
            let mut next = Vec::with_capacity(n_frames);
            for t in 0..n_frames {
                let Some((rq, pq)) = state[t] else {
                    next.push(None);
                    continue;
                };
                let window: Vec<(Var<'t>, Var<'t>)> = temporal_window(t, n_frames, self.cfg.temporal_window)
                    .filter_map(|f| state[f])
                    .collect();
                let rk = Var::concat(&window.iter().map(|x| x.0).collect::<Vec<_>>(), 0)?;
                let pk = Var::concat(&window.iter().map(|x| x.1).collect::<Vec<_>>(), 0)?;
                let (r2, p2, _) = self.block(&wt, rq, pq, rk, pk, pam)?;
                next.push(Some((r2, p2)));
            }
            state = next;
        }

        let pc_w = tape.param(store, self.pc_w);
        let pc_b = tape.param(store, self.pc_b);
        let pa = Self::mlp_vars(tape, store, &self.pa);
        let mut frames = Vec::with_capacity(n_frames);
        for s in state {
            frames.push(match s {
                None => None,
                Some((r, p)) => {
                    let pc_logits = linear(r, pc_w, pc_b)?;
                    let pa_logits = pa.apply(p, false)?;
                    Some(FrameVars {
                        r,
                        p,
                        pc: pc_logits.sigmoid(),
                        pa: pa_logits.sigmoid(),
                        pc_logits,
                        pa_logits,
                    })
                }
            });
        }
        Ok(ForwardVars {
            frames,
            window: self.cfg.temporal_window,
        })
    }

    /// Detached per-frame outputs.
    pub fn infer(&self, store: &ParamStore, clip: &ClipInputs, pam: bool) -> Result<Vec<ForwardOutput>> {
        let tape = Tape::new();
        let fw = self.forward_with(&tape, store, clip, pam)?;
        let mut out = Vec::with_capacity(clip.frames.len());
        for (i, frame) in clip.frames.iter().enumerate() {
            let (pc, pa) = match &fw.frames[i] {
                Some(fv) => (fv.pc.value(), fv.pa.value().into_data()),
                None => (Tensor::zeros(0, self.cfg.num_predicates), Vec::new()),
            };
            let (g_l, seq) = match fw.gram(i)? {
                Some((g, seq)) => (g.value(), seq),
                None => (Tensor::zeros(0, 0), Vec::new()),
            };
            out.push(ForwardOutput {
                t: frame.t,
                pairs: frame.pairs.clone(),
                pc,
                pa,
                g_l,
                seq,
            });
        }
        Ok(out)
    }

    /// Writes parameters plus `model_config.json`.
    pub fn save(&self, store: &ParamStore, dir: &Path) -> Result<()> {
        store.save(dir)?;
        let path = dir.join(MODEL_CONFIG_FILE);
        let text = serde_json::to_string_pretty(&self.cfg).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(Self, ParamStore)> {
        let path = dir.join(MODEL_CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let store = ParamStore::load(dir)?;
        Ok((Self::bind(&cfg, &store)?, store))
    }
}
