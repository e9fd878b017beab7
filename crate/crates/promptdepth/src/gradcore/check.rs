//! Finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::util;

/// Compares the reverse-mode gradient of a scalar-valued function against
/// central differences, coordinate by coordinate, and returns the maximum
/// relative error with denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// The closure receives a fresh graph and the leaf node for the evaluation
/// point; it must return the scalar output node. Numeric probes run in
/// parallel over coordinates (each probe builds its own graph).
pub fn gradient_check<F>(f: F, point: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId> + Sync,
{
    if eps <= 0.0 {
        return Err(Error::validation("gradient_check needs eps > 0".to_string()));
    }
    // Analytic gradient.
    let mut g = Graph::new();
    let leaf = g.leaf(&point.clone().with_requires_grad(true));
    let out = f(&mut g, leaf)?;
    if g.value(out).len() != 1 {
        return Err(Error::shape("gradient_check function must be scalar-valued".to_string()));
    }
    g.backward(out)?;
    let analytic = g
        .grad(leaf)
        .ok_or_else(|| Error::validation("no gradient reached the evaluation point".to_string()))?
        .to_vec();

    let eval = |data: &[f32]| -> Result<f64> {
        let mut g = Graph::new();
        let t = Tensor {
            shape: point.shape.clone(),
            data: data.to_vec(),
            requires_grad: false,
            grad: None,
        };
        let leaf = g.leaf(&t);
        let out = f(&mut g, leaf)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::non_finite("probe output".to_string()));
        }
        Ok(v as f64)
    };

    let n = point.data.len();
    let errs = util::par_map(n, |i| -> Result<f64> {
        let mut probe = point.data.clone();
        probe[i] = point.data[i] + eps;
        let f_plus = eval(&probe)?;
        probe[i] = point.data[i] - eps;
        let f_minus = eval(&probe)?;
        let numeric = (f_plus - f_minus) / (2.0 * eps as f64);
        let a = analytic[i] as f64;
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        Ok((a - numeric).abs() / denom)
    });

    let mut max_err = 0.0f64;
    for e in errs {
        max_err = max_err.max(e?);
    }
    Ok(max_err as f32)
}
