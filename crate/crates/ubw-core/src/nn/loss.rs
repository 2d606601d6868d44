//! Loss builders. The `0 * log 0` guard (`max(p, 1e-12)`) lives here, not in
//! the generic log primitive, so the latter still reports domain errors.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

const LOG_GUARD: f64 = 1e-12;

fn one_hot(labels: &[u32], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y == 0 || y as usize > k {
            return Err(Error::LabelOutOfRange { label: y, k });
        }
        data[i * k + (y - 1) as usize] = 1.0;
    }
    Tensor::new(vec![labels.len(), k], data)
}

/// Mean cross-entropy of probability rows against 1-based labels, as a
/// differentiable scalar node.
pub fn cross_entropy_graph(tape: &mut Tape, probs: NodeId, labels: &[u32]) -> Result<NodeId> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len(), 0],
        });
    }
    let k = shape[1];
    let n = labels.len() as f64;
    let hot = tape.constant(one_hot(labels, k)?);
    let guarded = tape.clamp(probs, LOG_GUARD, f64::INFINITY)?;
    let lg = tape.log(guarded)?;
    let picked = tape.mul(lg, hot)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / n)
}

/// Mean entropy of probability rows (`-1/n sum p log p`), as a
/// differentiable scalar node.
pub fn mean_entropy_graph(tape: &mut Tape, probs: NodeId) -> Result<NodeId> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "mean_entropy",
            lhs: shape,
            rhs: vec![],
        });
    }
    let n = shape[0] as f64;
    let guarded = tape.clamp(probs, LOG_GUARD, f64::INFINITY)?;
    let lg = tape.log(guarded)?;
    let pl = tape.mul(probs, lg)?;
    let total = tape.sum(pl)?;
    tape.scale(total, -1.0 / n)
}

/// Plain-value mean cross-entropy for callers outside a graph.
pub fn cross_entropy(probs: &Tensor, labels: &[u32]) -> Result<f64> {
    let mut tape = Tape::first_order();
    let p = tape.constant(probs.clone());
    let l = cross_entropy_graph(&mut tape, p, labels)?;
    tape.value(l).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn one_hot_rows_cost_zero() {
        let probs = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let loss = cross_entropy(&probs, &[2, 1]).unwrap();
        assert!(loss.abs() <= 1e-11);
    }

    #[test]
    fn uniform_probs_cost_ln_k() {
        let probs = Tensor::new(vec![4, 10], vec![0.1; 40]).unwrap();
        let loss = cross_entropy(&probs, &[1, 5, 10, 3]).unwrap();
        assert_abs_diff_eq!(loss, 2.302585092994046, epsilon = 1e-12);
    }

    #[test]
    fn half_half_cost_ln_2() {
        let probs = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let loss = cross_entropy(&probs, &[1]).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let probs = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!(matches!(
            cross_entropy(&probs, &[3]),
            Err(Error::LabelOutOfRange { label: 3, k: 2 })
        ));
        assert!(matches!(
            cross_entropy(&probs, &[0]),
            Err(Error::LabelOutOfRange { label: 0, k: 2 })
        ));
    }

    /// Analytic check: d(CE(softmax(z)))/dz = softmax(z) - onehot, per row
    /// scaled by 1/n.
    #[test]
    fn softmax_cross_entropy_gradient_is_probs_minus_onehot() {
        let mut tape = Tape::first_order();
        let z = tape.leaf(
            Tensor::from_rows(&[vec![0.2, -0.4, 1.3], vec![0.0, 0.5, -0.5]]).unwrap(),
            true,
        );
        let probs = tape.softmax_rows(z).unwrap();
        let labels = [3u32, 1u32];
        let loss = cross_entropy_graph(&mut tape, probs, &labels).unwrap();
        tape.backward(loss).unwrap();
        let grad = tape.grad(z).unwrap();
        let p = tape.value(probs);
        let n = 2.0;
        for i in 0..2 {
            for j in 0..3 {
                let hot = if labels[i] as usize == j + 1 { 1.0 } else { 0.0 };
                let expect = (p.data()[i * 3 + j] - hot) / n;
                assert_abs_diff_eq!(grad.data()[i * 3 + j], expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn entropy_graph_matches_definition() {
        let mut tape = Tape::first_order();
        let p = tape.constant(Tensor::from_rows(&[vec![0.75, 0.25], vec![1.0, 0.0]]).unwrap());
        let h = mean_entropy_graph(&mut tape, p).unwrap();
        // (H[0.75,0.25] + 0) / 2
        assert_abs_diff_eq!(
            tape.value(h).item().unwrap(),
            0.5623351446188083 / 2.0,
            epsilon = 1e-12
        );
    }
}
