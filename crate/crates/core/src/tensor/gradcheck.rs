//! Finite-difference gradient verification.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Compare the analytic gradient of `f` at `x` against central differences.
///
/// Returns the maximum over elements of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` must be deterministic: any randomized operation inside it has to run
/// with frozen masks or a fixed stream, otherwise the two perturbed
/// evaluations disagree for reasons unrelated to the gradient.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::contract(format!("grad_check eps must be > 0, got {eps}")));
    }

    let tape = Tape::new();
    let leaf = tape.leaf(x.to_vec(), x.shape());
    let loss = f(&leaf)?;
    if loss.len() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar-valued f, got shape {:?}",
            loss.shape()
        )));
    }
    loss.backward()?;
    // A loss that ignores x has a zero gradient everywhere.
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.len()]);
    if let Some(i) = analytic.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "grad_check analytic gradient".into(),
            index: i,
        });
    }

    let base = x.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let eval = |v: f64| -> Result<f64> {
            let mut probe = base.clone();
            probe[i] = v;
            // No tape: the probes only need forward values.
            let out = f(&Tensor::constant(probe, x.shape()))?;
            Ok(out.item())
        };
        let plus = eval(base[i] + eps)?;
        let minus = eval(base[i] - eps)?;
        let numeric = (plus - minus) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check numeric gradient".into(),
                index: i,
            });
        }
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_rel)
}
