//! Randomized finite-difference sweep over every primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::finite_diff_check;
use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct PrimitiveCheck {
    pub primitive: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub nonsmooth: usize,
}

pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "transpose",
    "concat0",
    "concat1",
    "slice0",
    "slice1",
    "gather_rows",
    "gather",
    "add",
    "sub",
    "mul",
    "scale",
    "shift",
    "sum_all",
    "sum0",
    "sum1",
    "mean",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "softplus",
    "clamp",
    "softmax0",
    "softmax1",
    "layer_norm0",
    "layer_norm1",
];

/// Values in `[-2, 2]` bounded away from zero, so kinks stay out of reach of
/// the finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let mag = rng.gen_range(0.2..2.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=8)
}

/// Weighted sum `sum(out * weights)` so every output element carries a
/// distinct gradient.
fn reduce<'t>(tape: &'t Tape, out: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    out.mul(tape.constant(weights.clone()))?.sum(None)
}

struct Indices {
    rows: Vec<usize>,
    elems: Vec<(usize, usize)>,
    slice_r: (usize, usize),
    slice_c: (usize, usize),
}

fn apply<'t>(primitive: &str, av: Var<'t>, bv: Option<Var<'t>>, ix: &Indices) -> Result<Var<'t>> {
    let b = || bv.expect("second operand");
    Ok(match primitive {
        "matmul" => av.matmul(b())?,
        "transpose" => av.transpose(),
        "concat0" => Var::concat(&[av, b()], 0)?,
        "concat1" => Var::concat(&[av, b()], 1)?,
        "slice0" => av.slice(0, ix.slice_r.0, ix.slice_r.1)?,
        "slice1" => av.slice(1, ix.slice_c.0, ix.slice_c.1)?,
        "gather_rows" => av.gather_rows(&ix.rows)?,
        "gather" => av.gather(&ix.elems)?,
        "add" => av.add(b())?,
        "sub" => av.sub(b())?,
        "mul" => av.mul(b())?,
        "scale" => av.scale(-1.7),
        "shift" => av.shift(0.3).mul(av)?,
        "sum_all" => av.sum(None)?,
        "sum0" => av.sum(Some(0))?,
        "sum1" => av.sum(Some(1))?,
        "mean" => av.mean(),
        "relu" => av.relu(),
        "sigmoid" => av.sigmoid(),
        "exp" => av.exp(),
        "log" => av.log(),
        "softplus" => av.softplus(),
        "clamp" => av.clamp(-1.0, 1.0),
        "softmax0" => av.softmax(0)?,
        "softmax1" => av.softmax(1)?,
        "layer_norm0" => av.layer_norm(0, 1e-5)?,
        "layer_norm1" => av.layer_norm(1, 1e-5)?,
        other => unreachable!("unknown primitive {other}"),
    })
}

/// Checks one primitive on one seed.
pub fn check_primitive(primitive: &'static str, seed: u64, h: f64) -> Result<PrimitiveCheck> {
    let name_hash = primitive
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(name_hash ^ seed);
    let (r, c) = (dim(&mut rng), dim(&mut rng));
    let mut store = ParamStore::new();

    let a = match primitive {
        "log" => store.add(
            "a",
            Tensor::from_fn(r, c, |_, _| rng.gen_range(0.3..3.0)),
        )?,
        "clamp" => store.add(
            "a",
            Tensor::from_fn(r, c, |_, _| {
                // keep clear of the clamp boundaries at +-1
                let v: f64 = rng.gen_range(0.0..0.8);
                if rng.gen_bool(0.3) {
                    v + 1.2
                } else if rng.gen_bool(0.5) {
                    -v
                } else {
                    v
                }
            }),
        )?,
        _ => store.add("a", away_from_zero(&mut rng, r, c))?,
    };
    let k = dim(&mut rng);
    let b = match primitive {
        "matmul" => Some(store.add("b", away_from_zero(&mut rng, c, k))?),
        "add" | "sub" | "mul" => Some(store.add("b", away_from_zero(&mut rng, r, c))?),
        "concat0" => Some(store.add("b", away_from_zero(&mut rng, k, c))?),
        "concat1" => Some(store.add("b", away_from_zero(&mut rng, r, k))?),
        _ => None,
    };

    let out_shape = match primitive {
        "matmul" => [r, k],
        "transpose" => [c, r],
        "concat0" => [r + k, c],
        "concat1" => [r, c + k],
        "slice0" => [r.div_ceil(2), c],
        "slice1" => [r, c.div_ceil(2)],
        "gather_rows" => [r + 2, c],
        "gather" => [5, 1],
        "sum_all" | "mean" => [1, 1],
        "sum0" => [1, c],
        "sum1" => [r, 1],
        _ => [r, c],
    };
    let weights = away_from_zero(&mut rng, out_shape[0], out_shape[1]);
    let row_idx: Vec<usize> = (0..r + 2).map(|_| rng.gen_range(0..r)).collect();
    let elem_idx: Vec<(usize, usize)> = (0..5).map(|_| (rng.gen_range(0..r), rng.gen_range(0..c))).collect();
    let slice_r = (r - r.div_ceil(2), r.div_ceil(2));
    let slice_c = (c - c.div_ceil(2), c.div_ceil(2));

    let shape = Indices {
        rows: row_idx,
        elems: elem_idx,
        slice_r,
        slice_c,
    };
    let report = finite_diff_check(
        |tape, s| {
            let out = apply(primitive, tape.param(s, a), b.map(|b| tape.param(s, b)), &shape)?;
            reduce(tape, out, &weights)
        },
        &mut store,
        h,
    )?;
    Ok(PrimitiveCheck {
        primitive,
        seed,
        max_rel_error: report.max_rel_error,
        coordinates: report.coordinates,
        nonsmooth: report.nonsmooth,
    })
}

/// Every primitive over seeds `0..seeds`.
pub fn primitive_suite(seeds: u64, h: f64) -> Result<Vec<PrimitiveCheck>> {
    let mut out = Vec::with_capacity(PRIMITIVES.len() * seeds as usize);
    for &p in PRIMITIVES {
        for seed in 0..seeds {
            out.push(check_primitive(p, seed, h)?);
        }
    }
    Ok(out)
}
