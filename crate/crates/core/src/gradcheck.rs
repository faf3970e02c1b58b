//! Central finite-difference verification of [`Graph::backward`].

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error. With `h = 1e-4` the central
/// difference carries roundoff of order 1e-11, so gradients much smaller
/// than this floor can't be compared relatively.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient of a scalar function against central
/// differences with step `h`, over every coordinate of every input.
///
/// Returns the maximum of `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t)).collect();
    let out = f(&mut g, &vars)?;
    if g.numel(out) != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).expect("inputs are trainable").to_vec())
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.constant(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out)[0])
    };

    let mut probe = inputs.to_vec();
    let mut worst = 0.0f64;
    for (ti, grads) in analytic.iter().enumerate() {
        for (ci, &a) in grads.iter().enumerate() {
            let orig = probe[ti].values()[ci];
            probe[ti].values_mut()[ci] = orig + h;
            let plus = eval(&probe)?;
            probe[ti].values_mut()[ci] = orig - h;
            let minus = eval(&probe)?;
            probe[ti].values_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
