//! Per-anchor classification and regression losses with closed-form gradients.

use crate::error::{Error, Result};

/// Loss value and its gradient with respect to the two logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CeTerm {
    pub loss: f64,
    pub grad: [f64; 2],
}

/// Two-class softmax cross-entropy for a single anchor.
pub fn softmax_ce_single(logits: [f64; 2], label: u8) -> Result<CeTerm> {
    if label > 1 {
        return Err(Error::invalid(format!("class label {label} outside {{0, 1}}")));
    }
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    let lse = m + z.ln();
    let p = [e0 / z, e1 / z];
    let l = label as usize;
    let mut grad = p;
    grad[l] -= 1.0;
    Ok(CeTerm {
        loss: lse - logits[l],
        grad,
    })
}

/// `-log softmax(logits)[label]` for every anchor.
pub fn softmax_cross_entropy(logits: &[[f64; 2]], labels: &[u8]) -> Result<Vec<f64>> {
    Ok(softmax_cross_entropy_with_grad(logits, labels)?
        .into_iter()
        .map(|t| t.loss)
        .collect())
}

pub fn softmax_cross_entropy_with_grad(logits: &[[f64; 2]], labels: &[u8]) -> Result<Vec<CeTerm>> {
    if logits.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} logit pairs for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &l)| softmax_ce_single(z, l))
        .collect()
}

/// Face probability of a logit pair.
pub fn face_probability(logits: [f64; 2]) -> f64 {
    let d = logits[0] - logits[1];
    1.0 / (1.0 + d.exp())
}

/// Smooth-L1 summed over four coordinates.
pub fn smooth_l1(pred: [f64; 4], target: [f64; 4]) -> f64 {
    pred.iter()
        .zip(&target)
        .map(|(p, t)| {
            let x = p - t;
            if x.abs() < 1.0 {
                0.5 * x * x
            } else {
                x.abs() - 0.5
            }
        })
        .sum()
}

/// Gradient of [`smooth_l1`] with respect to `pred`; each entry lies in `[-1, 1]`.
pub fn smooth_l1_grad(pred: [f64; 4], target: [f64; 4]) -> [f64; 4] {
    let mut g = [0.0; 4];
    for i in 0..4 {
        let x = pred[i] - target[i];
        g[i] = if x.abs() < 1.0 { x } else { x.signum() };
    }
    g
}
