//! Central finite-difference validation of tape gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Worst coordinate found by [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Coordinates compared.
    pub coordinates: usize,
    /// Coordinates skipped because a `relu` or `clamp` changes branch
    /// inside the `[x - h, x + h]` stencil.
    pub nonsmooth: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h`, over every scalar of every parameter in `store`. Coordinates
/// whose stencil crosses a `relu` or `clamp` kink are counted in
/// `nonsmooth` instead of compared.
///
/// `f` must be pure: it is re-evaluated on fresh tapes for each perturbation.
pub fn finite_diff_check<F>(f: F, store: &mut ParamStore, h: f64) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    store.zero_grad();
    let pattern = {
        let tape = Tape::new();
        let loss = f(&tape, store)?;
        tape.backward_into(loss, store)?;
        tape.branch_pattern()
    };
    // value at `x` and whether it lies on the same smooth piece
    let eval_at = |s: &mut ParamStore, id, i: usize, x: f64| -> Result<(f64, bool)> {
        s.value_mut(id).data_mut()[i] = x;
        let tape = Tape::new();
        let value = f(&tape, s)?.item();
        Ok((value, tape.branch_pattern() == pattern))
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        nonsmooth: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for i in 0..store.value(id).len() {
            let original = store.value(id).data()[i];
            let (plus, same_plus) = eval_at(store, id, i, original + h)?;
            let (minus, same_minus) = eval_at(store, id, i, original - h)?;
            store.value_mut(id).data_mut()[i] = original;
            if !(same_plus && same_minus) {
                report.nonsmooth += 1;
                continue;
            }

            let numeric = (plus - minus) / (2.0 * h);
            let analytic = store.grad(id)[i];
            let err = relative_error(analytic, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = store.param(id).name.clone();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    store.zero_grad();
    Ok(report)
}
