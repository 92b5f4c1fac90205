//! Training objectives: pair-affinity BCE (balanced or plain), the affinity
//! triplet ranking loss with hard, soft or adaptive margins, multi-label
//! relation BCE, and distillation target blending.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Probability clamp applied before every log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginMode {
    Hard,
    Soft,
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaBceMode {
    Balanced,
    Standard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_pa: f64,
    pub lambda_pam: f64,
    pub margin: f64,
    /// Margin used by the second training step; the first always uses
    /// `Hard`.
    pub margin_mode: MarginMode,
    pub alpha: f64,
    pub pa_bce_mode: PaBceMode,
    pub triplet_sample_cap: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_pa: 1.0,
            lambda_pam: 0.1,
            margin: 1.0,
            margin_mode: MarginMode::Adaptive,
            alpha: 3.0,
            pa_bce_mode: PaBceMode::Balanced,
            triplet_sample_cap: 512,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_pa >= 0.0 && self.lambda_pam >= 0.0) {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::InvalidConfig(format!("margin {} must be > 0", self.margin)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!("alpha {} must be > 0", self.alpha)));
        }
        if self.triplet_sample_cap == 0 {
            return Err(Error::InvalidConfig("triplet_sample_cap must be >= 1".into()));
        }
        Ok(())
    }
}

/// Affinity target for one row of a PA column.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PaTarget {
    pub row: usize,
    /// Target probability; 1 or 0 for hard labels.
    pub y: f64,
    /// Which half of the balanced objective the row belongs to.
    pub positive: bool,
}

impl PaTarget {
    pub fn hard(row: usize, positive: bool) -> Self {
        Self {
            row,
            y: if positive { 1.0 } else { 0.0 },
            positive,
        }
    }
}

fn zero(tape: &Tape) -> Var<'_> {
    tape.constant(Tensor::scalar(0.0))
}

/// `-sum_i w_i [y_i log p_i + (1 - y_i) log(1 - p_i)]` over the listed
/// cells. Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`; logits go
/// through `softplus`, which stays exact where the sigmoid saturates.
fn weighted_bce<'t>(scores: Var<'t>, space: Space, cells: &[(usize, usize)], y: &[f64], w: &[f64]) -> Result<Var<'t>> {
    let tape = scores.tape();
    if cells.is_empty() {
        return Ok(zero(tape));
    }
    let wy = tape.constant(Tensor::column(w.iter().zip(y).map(|(w, y)| w * y).collect()));
    let wn = tape.constant(Tensor::column(w.iter().zip(y).map(|(w, y)| w * (1.0 - y)).collect()));
    let picked = scores.gather(cells)?;
    match space {
        Space::Probability => {
            let q = picked.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let pos = q.log().mul(wy)?;
            let neg = q.one_minus().log().mul(wn)?;
            Ok(pos.add(neg)?.sum(None)?.scale(-1.0))
        }
        // -log sigmoid(z) = softplus(-z), -log(1 - sigmoid(z)) = softplus(z)
        Space::Logit => {
            let pos = picked.scale(-1.0).softplus().mul(wy)?;
            let neg = picked.softplus().mul(wn)?;
            pos.add(neg)?.sum(None)
        }
    }
}

#[derive(Clone, Copy)]
enum Space {
    Probability,
    Logit,
}

fn pa_weights(targets: &[PaTarget], mode: PaBceMode) -> Vec<f64> {
    let n_pos = targets.iter().filter(|t| t.positive).count();
    let n_neg = targets.len() - n_pos;
    match mode {
        PaBceMode::Standard => vec![1.0 / targets.len().max(1) as f64; targets.len()],
        PaBceMode::Balanced => {
            let halves = (n_pos > 0) as usize + (n_neg > 0) as usize;
            targets
                .iter()
                .map(|t| {
                    let n = if t.positive { n_pos } else { n_neg };
                    1.0 / (halves * n) as f64
                })
                .collect()
        }
    }
}

fn pa_bce_in<'t>(scores: Var<'t>, space: Space, targets: &[PaTarget], mode: PaBceMode) -> Result<Var<'t>> {
    let weights = pa_weights(targets, mode);
    let cells: Vec<(usize, usize)> = targets.iter().map(|t| (t.row, 0)).collect();
    let y: Vec<f64> = targets.iter().map(|t| t.y).collect();
    weighted_bce(scores, space, &cells, &y, &weights)
}

/// Affinity BCE on a column of probabilities. Balanced mode averages each
/// half separately and weights the halves equally, or gives a lone
/// non-empty half full weight.
pub fn pa_bce<'t>(pa: Var<'t>, targets: &[PaTarget], mode: PaBceMode) -> Result<Var<'t>> {
    pa_bce_in(pa, Space::Probability, targets, mode)
}

/// [`pa_bce`] on pre-sigmoid affinity logits.
pub fn pa_bce_logits<'t>(logits: Var<'t>, targets: &[PaTarget], mode: PaBceMode) -> Result<Var<'t>> {
    pa_bce_in(logits, Space::Logit, targets, mode)
}

/// Balanced affinity BCE with hard labels on row sets `pos` and `neg`.
pub fn loss_pa_balanced<'t>(pa: Var<'t>, pos: &[usize], neg: &[usize]) -> Result<Var<'t>> {
    pa_bce(pa, &hard_targets(pos, neg), PaBceMode::Balanced)
}

/// Plain mean BCE over `pos` and `neg` rows.
pub fn loss_pa_standard<'t>(pa: Var<'t>, pos: &[usize], neg: &[usize]) -> Result<Var<'t>> {
    pa_bce(pa, &hard_targets(pos, neg), PaBceMode::Standard)
}

fn hard_targets(pos: &[usize], neg: &[usize]) -> Vec<PaTarget> {
    pos.iter()
        .map(|&r| PaTarget::hard(r, true))
        .chain(neg.iter().map(|&r| PaTarget::hard(r, false)))
        .collect()
}

fn loss_rel_in<'t>(scores: Var<'t>, space: Space, rows: &[usize], targets: &Tensor) -> Result<Var<'t>> {
    if rows.is_empty() {
        return Ok(zero(scores.tape()));
    }
    let c = scores.shape()[1];
    if targets.shape() != [rows.len(), c] {
        return Err(Error::shape("loss_rel targets", targets.shape(), [rows.len(), c]));
    }
    let cells: Vec<(usize, usize)> = rows.iter().flat_map(|&r| (0..c).map(move |k| (r, k))).collect();
    let w = vec![1.0 / cells.len() as f64; cells.len()];
    weighted_bce(scores, space, &cells, targets.data(), &w)
}

/// Multi-label BCE averaged over every `(row, predicate)` cell of the
/// supervised rows. `targets` has one row per entry of `rows`.
pub fn loss_rel<'t>(pc: Var<'t>, rows: &[usize], targets: &Tensor) -> Result<Var<'t>> {
    loss_rel_in(pc, Space::Probability, rows, targets)
}

/// [`loss_rel`] on pre-sigmoid predicate logits.
pub fn loss_rel_logits<'t>(logits: Var<'t>, rows: &[usize], targets: &Tensor) -> Result<Var<'t>> {
    loss_rel_in(logits, Space::Logit, rows, targets)
}

/// Multi-hot target rows from predicate lists.
pub fn predicate_targets(predicates: &[&[usize]], num_predicates: usize) -> Tensor {
    Tensor::from_fn(predicates.len(), num_predicates, |r, k| {
        if predicates[r].contains(&k) {
            1.0
        } else {
            0.0
        }
    })
}

/// Margin scaled by target confidence: `m (y+ - 0.5) 2 (0.5 - y-) 2`.
pub fn adaptive_margin(m_base: f64, y_pos: f64, y_neg: f64) -> f64 {
    m_base * (y_pos - 0.5) * 2.0 * (0.5 - y_neg) * 2.0
}

/// Temporal decay weight `1 / (1 + dt)^alpha`.
pub fn distance_weight(delta_t: f64, alpha: f64) -> f64 {
    1.0 / (1.0 + delta_t).powf(alpha)
}

/// `w y_prop + (1 - w) pa_teacher` with `w` from [`distance_weight`].
pub fn soft_pa_target(y_prop: f64, pa_teacher: f64, delta_t: f64, alpha: f64) -> f64 {
    let w = distance_weight(delta_t, alpha);
    w * y_prop + (1.0 - w) * pa_teacher
}

/// Triplets `(anchor, positive, negative)` drawn from labeled rows of a
/// sequence: rows with `y > 0.5` are positive, the remaining labeled rows
/// negative. At most `cap` triplets, uniformly sampled without replacement
/// from the full enumeration when it is larger.
pub fn enumerate_triplets(labels: &[Option<f64>], cap: usize, seed: u64) -> Vec<(usize, usize, usize)> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some_and(|y| y > 0.5)).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some_and(|y| y <= 0.5)).collect();
    if pos.len() < 2 || neg.is_empty() {
        return Vec::new();
    }
    let (np, nn) = (pos.len(), neg.len());
    let total = np * (np - 1) * nn;
    let decode = |k: usize| {
        let (ab, n) = (k / nn, k % nn);
        let (a, b) = (ab / (np - 1), ab % (np - 1));
        let b = if b >= a { b + 1 } else { b };
        (pos[a], pos[b], neg[n])
    };
    if total <= cap {
        return (0..total).map(decode).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, total, cap).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(decode).collect()
}

/// Affinity ranking loss over a Gram matrix `g`, averaged over triplets.
///
/// Hard: `max(0, g[a,b-] - g[a,b+] + m)`. Soft: `log(1 + exp(g[a,b-] -
/// g[a,b+]))`. Adaptive: the hard hinge with [`adaptive_margin`].
pub fn loss_pam<'t>(
    g: Var<'t>,
    labels: &[Option<f64>],
    margin: f64,
    mode: MarginMode,
    cap: usize,
    seed: u64,
) -> Result<Var<'t>> {
    let [n, m] = g.shape();
    if n != m || n != labels.len() {
        return Err(Error::shape("loss_pam", [n, m], [labels.len(), labels.len()]));
    }
    let triplets = enumerate_triplets(labels, cap, seed);
    loss_pam_triplets(g, &triplets, labels, margin, mode)
}

/// [`loss_pam`] on an explicit triplet list.
pub fn loss_pam_triplets<'t>(
    g: Var<'t>,
    triplets: &[(usize, usize, usize)],
    labels: &[Option<f64>],
    margin: f64,
    mode: MarginMode,
) -> Result<Var<'t>> {
    let tape = g.tape();
    if triplets.is_empty() {
        return Ok(zero(tape));
    }
    let neg: Vec<(usize, usize)> = triplets.iter().map(|&(a, _, n)| (a, n)).collect();
    let pos: Vec<(usize, usize)> = triplets.iter().map(|&(a, p, _)| (a, p)).collect();
    let gap = g.gather(&neg)?.sub(g.gather(&pos)?)?;
    let terms = match mode {
        MarginMode::Soft => gap.softplus(),
        MarginMode::Hard => gap.shift(margin).relu(),
        MarginMode::Adaptive => {
            let y = |i: usize| labels[i].unwrap_or(0.0);
            let margins = triplets.iter().map(|&(_, p, n)| adaptive_margin(margin, y(p), y(n))).collect();
            gap.add(tape.constant(Tensor::column(margins)))?.relu()
        }
    };
    Ok(terms.mean())
}

/// Individually reported loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub rel: f64,
    pub pa: f64,
    pub pam: f64,
}

impl LossComponents {
    pub fn total(&self, cfg: &LossConfig) -> f64 {
        self.rel + cfg.lambda_pa * self.pa + cfg.lambda_pam * self.pam
    }
}

/// `L_rel + lambda_pa L_pa + lambda_pam L_pam` on the tape.
pub fn total_loss<'t>(rel: Var<'t>, pa: Var<'t>, pam: Var<'t>, cfg: &LossConfig) -> Result<Var<'t>> {
    rel.add(pa.scale(cfg.lambda_pa))?.add(pam.scale(cfg.lambda_pam))
}
