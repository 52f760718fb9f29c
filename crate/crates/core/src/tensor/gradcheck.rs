use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing autodiff gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|autodiff - numeric| / max(|autodiff|, |numeric|, 1e-2)` over
    /// all input elements.
    pub max_rel_error: f64,
    /// Flat index of the element with the largest error.
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks the gradient of the scalar function `f` at `x` with central finite
/// differences of half-width `step`. `f` must be deterministic.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |input: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(input);
        let out = f(&mut tape, v)?;
        let value = tape.value(out);
        if value.numel() != 1 {
            return Err(Error::contract("grad_check needs a scalar-valued function"));
        }
        Ok(value.item())
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    if !tape.value(out).all_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst = (0.0, 0);
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        if !fp.is_finite() || !fm.is_finite() || !analytic[i].is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value while probing element {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-2);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        tolerance: tol,
        passed: worst.0 < tol,
    })
}
