//! Finite-difference gradient verification.
//!
//! [`finite_diff_check`] is the oracle for every backward rule in the crate:
//! it compares the tape's analytic gradients against central differences of
//! the same scalar function, coordinate by coordinate, and reports the worst
//! relative error. Loss kernels and primitives are accepted only when this
//! check passes at random points.

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::Tensor;

/// Compare analytic gradients of `f` against central finite differences.
///
/// `f` receives a fresh tape and one variable per entry of `params`, and
/// must return a scalar. The result is the maximum over all coordinates of
/// `|analytic − (f(θ+h·eᵢ) − f(θ−h·eᵢ)) / 2h| / max(1, |analytic|)`.
///
/// Probe evaluations that produce a non-finite value surface as numeric
/// errors. `f` must be deterministic in its parameters.
pub fn finite_diff_check<F>(params: &[Tensor], f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::contract(
            "finite_diff_check",
            format!("step size must be positive and finite, got {h}"),
        ));
    }

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe
            .iter()
            .map(|p| tape.leaf(p.clone().with_requires_grad(true)))
            .collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss).item().map_err(|_| {
            Error::contract(
                "finite_diff_check",
                format!("f must return a scalar, got shape {:?}", tape.value(loss).shape()),
            )
        })?;
        if !v.is_finite() {
            return Err(Error::numeric(
                "finite_diff_check",
                format!("non-finite loss {v} at probe point"),
            ));
        }
        Ok(v)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::contract(
            "finite_diff_check",
            format!("f must return a scalar, got shape {:?}", tape.value(loss).shape()),
        ));
    }
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads
            .get(vars[pi])
            .ok_or_else(|| Error::contract("finite_diff_check", "missing gradient".to_string()))?
            .data()
            .to_vec();
        for i in 0..param.numel() {
            let orig = param.data()[i];
            probe[pi].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[pi].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[pi].data_mut()[i] = orig;

            let fd = (plus - minus) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
