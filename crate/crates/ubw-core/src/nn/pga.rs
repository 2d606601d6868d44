//! Projected gradient ascent over an l-infinity ball intersected with a
//! per-component box. Steps are plain gradient ascent by default; a flag
//! switches to sign-based steps for experimentation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mode, NodeId, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgaConfig {
    pub step_size: f64,
    pub steps: usize,
    /// l-infinity budget around the start point, in normalized pixel units.
    pub epsilon: f64,
    #[serde(default)]
    pub pixel_min: f64,
    #[serde(default = "default_pixel_max")]
    pub pixel_max: f64,
    /// Use sign(gradient) steps instead of raw gradient steps.
    #[serde(default)]
    pub sign_based: bool,
}

fn default_pixel_max() -> f64 {
    1.0
}

impl PgaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter {
                name: "epsilon",
                why: format!("{} must be positive", self.epsilon),
            });
        }
        if self.pixel_min > self.pixel_max {
            return Err(Error::InvalidParameter {
                name: "pixel range",
                why: format!("min {} > max {}", self.pixel_min, self.pixel_max),
            });
        }
        Ok(())
    }
}

/// Maximize `objective` over `vars` within `||vars - start||_inf <= epsilon`
/// and the configured pixel range, projecting after every step.
///
/// The objective closure receives a fresh higher-order tape and the current
/// variable node, and returns a scalar node.
pub fn pga_ascend(
    mut objective: impl FnMut(&mut Tape, NodeId) -> Result<NodeId>,
    start: &Tensor,
    cfg: &PgaConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let lo = Tensor::filled(start.shape(), cfg.pixel_min);
    let hi = Tensor::filled(start.shape(), cfg.pixel_max);
    pga_ascend_bounded(
        &mut objective,
        start,
        cfg.epsilon,
        &lo,
        &hi,
        cfg.step_size,
        cfg.steps,
        cfg.sign_based,
    )
}

/// [`pga_ascend`] with explicit per-component bounds (used by the bi-level
/// optimizer, where the valid-pixel box depends on the carrier image).
#[allow(clippy::too_many_arguments)]
pub fn pga_ascend_bounded(
    objective: &mut dyn FnMut(&mut Tape, NodeId) -> Result<NodeId>,
    start: &Tensor,
    epsilon: f64,
    lo: &Tensor,
    hi: &Tensor,
    step_size: f64,
    steps: usize,
    sign_based: bool,
) -> Result<Tensor> {
    if lo.shape() != start.shape() || hi.shape() != start.shape() {
        return Err(Error::ShapeMismatch {
            op: "pga bounds",
            lhs: start.shape().to_vec(),
            rhs: lo.shape().to_vec(),
        });
    }
    let project = |v: &mut Tensor| {
        for i in 0..v.numel() {
            let s = start.data()[i];
            let ball = v.data()[i].min(s + epsilon).max(s - epsilon);
            v.data_mut()[i] = ball.min(hi.data()[i]).max(lo.data()[i]);
        }
    };

    let mut current = start.clone();
    project(&mut current);
    for _ in 0..steps {
        let mut tape = Tape::new(Mode::HigherOrder);
        let var = tape.leaf(current.clone(), true);
        let obj = objective(&mut tape, var)?;
        tape.backward(obj)?;
        let grad = tape.grad(var).expect("vars require grad");
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient { op: "pga_ascend" });
        }
        for (v, g) in current.data_mut().iter_mut().zip(grad.data()) {
            let step = if sign_based { g.signum() } else { *g };
            *v += step_size * step;
        }
        project(&mut current);
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn cfg(step_size: f64, steps: usize, epsilon: f64) -> PgaConfig {
        PgaConfig {
            step_size,
            steps,
            epsilon,
            pixel_min: 0.0,
            pixel_max: 1.0,
            sign_based: false,
        }
    }

    /// Maximizing -theta^2 from 0.5 with budget 0.1 lands on the ball
    /// boundary at 0.4.
    #[test]
    fn converges_to_ball_boundary()  {
        let start = Tensor::scalar(0.5);
        let out = pga_ascend(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.scale(sq, -1.0)
            },
            &start,
            &cfg(0.3, 25, 0.1),
        )
        .unwrap();
        assert!((out.data()[0] - 0.4).abs() < 1e-12);
    }

    /// A single ascent step moves by step_size * gradient, then projects.
    #[test]
    fn single_step_is_gradient_ascent_with_projection() {
        let start = Tensor::new(vec![2], vec![0.2, 0.8]).unwrap();
        let coef = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let c2 = coef.clone();
        let out = pga_ascend(
            move |t, v| {
                let c = t.constant(c2.clone());
                t.dot(v, c)
            },
            &start,
            &cfg(0.05, 1, 0.5),
        )
        .unwrap();
        // gradient is coef; step of 0.05 * [1, -2] stays inside ball and box
        assert!((out.data()[0] - 0.25).abs() < 1e-12);
        assert!((out.data()[1] - 0.7).abs() < 1e-12);
    }

    /// A component pushed past the budget projects back to the boundary.
    #[test]
    fn oversized_step_projects_to_budget() {
        let start = Tensor::scalar(0.3);
        let out = pga_ascend(
            |t, v| t.sum(v),
            &start,
            &cfg(0.3, 1, 0.1), // gradient 1, step 0.3 > epsilon 0.1
        )
        .unwrap();
        assert!((out.data()[0] - 0.4).abs() < 1e-12);
    }

    /// Iterates never leave the feasible set over many random steps.
    #[test]
    fn iterates_stay_feasible() {
        let mut r = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        for _ in 0..20 {
            let dim = r.gen_range(1..6);
            let start_data: Vec<f64> = (0..dim).map(|_| r.gen_range(0.0..1.0)).collect();
            let start = Tensor::new(vec![dim], start_data).unwrap();
            let eps = r.gen_range(0.01..0.3);
            let step = r.gen_range(0.01..0.5);
            let coef: Vec<f64> = (0..dim).map(|_| r.gen_range(-3.0..3.0)).collect();
            let c = Tensor::new(vec![dim], coef).unwrap();
            let start2 = start.clone();
            let out = pga_ascend(
                move |t, v| {
                    let cid = t.constant(c.clone());
                    t.dot(v, cid)
                },
                &start,
                &cfg(step, 50, eps),
            )
            .unwrap();
            for i in 0..dim {
                let d = (out.data()[i] - start2.data()[i]).abs();
                assert!(d <= eps + 1e-12, "left the epsilon ball: {d} > {eps}");
                assert!((0.0..=1.0).contains(&out.data()[i]), "left pixel range");
            }
        }
    }

    #[test]
    fn sign_based_steps_move_by_step_size() {
        let start = Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
        let coef = Tensor::new(vec![2], vec![0.001, -5.0]).unwrap();
        let mut pga = cfg(0.02, 1, 0.5);
        pga.sign_based = true;
        let out = pga_ascend(
            move |t, v| {
                let c = t.constant(coef.clone());
                t.dot(v, c)
            },
            &start,
            &pga,
        )
        .unwrap();
        assert!((out.data()[0] - 0.52).abs() < 1e-12);
        assert!((out.data()[1] - 0.48).abs() < 1e-12);
    }
}
