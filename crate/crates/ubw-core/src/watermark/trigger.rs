//! Poisoned-image generators: patch replacement, alpha blending, and
//! bounded additive perturbations. Every generator keeps pixels in `[0,1]`.

use serde::{Deserialize, Serialize};

use crate::data::sha256_hex;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Blend weight: one scalar for the whole image or a per-pixel map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSpec {
    Scalar(f64),
    Map(Tensor),
}

/// A poisoned-image generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Trigger {
    /// Pixels under a binary mask are replaced by the pattern.
    Patch { mask: Tensor, pattern: Tensor },
    /// Convex combination `(1-alpha) x + alpha t`.
    Blended { alpha: AlphaSpec, pattern: Tensor },
    /// `x + theta`, clamped to `[0,1]`, with `||theta||_inf <= epsilon`.
    Additive { epsilon: f64, theta: Tensor },
}

/// Corner used by the square-patch constructors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Trigger {
    /// White-black checkerboard square of the given size in a corner,
    /// replacing the pixels under it. `invert` swaps black and white, which
    /// together with a different corner makes a convenient independent
    /// trigger for verification controls.
    pub fn checker_patch(
        image_shape: [usize; 3],
        size: usize,
        corner: Corner,
        invert: bool,
    ) -> Result<Trigger> {
        let [c, h, w] = image_shape;
        if size == 0 || size > h || size > w {
            return Err(Error::InvalidParameter {
                name: "size",
                why: format!("patch {size} does not fit {h}x{w}"),
            });
        }
        let (row0, col0) = match corner {
            Corner::TopLeft => (0, 0),
            Corner::TopRight => (0, w - size),
            Corner::BottomLeft => (h - size, 0),
            Corner::BottomRight => (h - size, w - size),
        };
        let mut mask = Tensor::zeros(&[c, h, w]);
        let mut pattern = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            for i in 0..size {
                for j in 0..size {
                    let idx = (ci * h + row0 + i) * w + col0 + j;
                    mask.data_mut()[idx] = 1.0;
                    let white = (i + j) % 2 == 0;
                    pattern.data_mut()[idx] = if white != invert { 1.0 } else { 0.0 };
                }
            }
        }
        Ok(Trigger::Patch { mask, pattern })
    }

    /// Full-image checkerboard blended at a fixed ratio.
    pub fn blended_checker(image_shape: [usize; 3], alpha: f64) -> Result<Trigger> {
        let [c, h, w] = image_shape;
        let mut pattern = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    pattern.data_mut()[(ci * h + i) * w + j] = ((i + j) % 2) as f64;
                }
            }
        }
        let t = Trigger::Blended {
            alpha: AlphaSpec::Scalar(alpha),
            pattern,
        };
        t.validate(image_shape)?;
        Ok(t)
    }

    pub fn validate(&self, image_shape: [usize; 3]) -> Result<()> {
        let [c, h, w] = image_shape;
        let expect = [c, h, w];
        let check_shape = |t: &Tensor, what: &'static str| -> Result<()> {
            if t.shape() != expect {
                return Err(Error::ShapeMismatch {
                    op: what,
                    lhs: t.shape().to_vec(),
                    rhs: expect.to_vec(),
                });
            }
            Ok(())
        };
        match self {
            Trigger::Patch { mask, pattern } => {
                check_shape(mask, "trigger mask")?;
                check_shape(pattern, "trigger pattern")?;
                if mask.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
                    return Err(Error::InvalidParameter {
                        name: "mask",
                        why: "patch mask must be {0,1}-valued".into(),
                    });
                }
                if pattern.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::InvalidParameter {
                        name: "pattern",
                        why: "pattern pixels outside [0,1]".into(),
                    });
                }
            }
            Trigger::Blended { alpha, pattern } => {
                check_shape(pattern, "trigger pattern")?;
                match alpha {
                    AlphaSpec::Scalar(a) => {
                        if !(0.0..=1.0).contains(a) {
                            return Err(Error::InvalidParameter {
                                name: "alpha",
                                why: format!("{a} outside [0,1]"),
                            });
                        }
                    }
                    AlphaSpec::Map(m) => {
                        check_shape(m, "alpha map")?;
                        if m.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                            return Err(Error::InvalidParameter {
                                name: "alpha",
                                why: "alpha map outside [0,1]".into(),
                            });
                        }
                    }
                }
                if pattern.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::InvalidParameter {
                        name: "pattern",
                        why: "pattern pixels outside [0,1]".into(),
                    });
                }
            }
            Trigger::Additive { epsilon, theta } => {
                check_shape(theta, "trigger theta")?;
                if theta.linf_norm() > *epsilon {
                    return Err(Error::InvalidParameter {
                        name: "theta",
                        why: format!(
                            "perturbation inf-norm {} exceeds budget {epsilon}",
                            theta.linf_norm()
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// Content hash used in provenance blocks and verification reports.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("trigger serializes"))
    }
}

/// Apply a generator to one `[C,H,W]` image.
pub fn apply_trigger(x: &Tensor, trigger: &Trigger) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "apply_trigger",
            lhs: s.to_vec(),
            rhs: vec![],
        });
    }
    trigger.validate([s[0], s[1], s[2]])?;
    let mut out = x.clone();
    match trigger {
        Trigger::Patch { mask, pattern } => {
            for i in 0..out.numel() {
                if mask.data()[i] == 1.0 {
                    out.data_mut()[i] = pattern.data()[i];
                }
            }
        }
        Trigger::Blended { alpha, pattern } => {
            for i in 0..out.numel() {
                let a = match alpha {
                    AlphaSpec::Scalar(a) => *a,
                    AlphaSpec::Map(m) => m.data()[i],
                };
                out.data_mut()[i] = (1.0 - a) * out.data()[i] + a * pattern.data()[i];
            }
        }
        Trigger::Additive { theta, .. } => {
            for i in 0..out.numel() {
                out.data_mut()[i] = (out.data()[i] + theta.data()[i]).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Apply a generator to every image of a `[N,C,H,W]` batch.
pub fn apply_trigger_batch(batch: &Tensor, trigger: &Trigger) -> Result<Tensor> {
    let s = batch.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "apply_trigger_batch",
            lhs: s,
            rhs: vec![],
        });
    }
    let d = s[1] * s[2] * s[3];
    let mut data = Vec::with_capacity(batch.numel());
    for i in 0..s[0] {
        let img = Tensor::new(
            vec![s[1], s[2], s[3]],
            batch.data()[i * d..(i + 1) * d].to_vec(),
        )?;
        data.extend_from_slice(apply_trigger(&img, trigger)?.data());
    }
    Tensor::new(s, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn image(v: f64) -> Tensor {
        Tensor::filled(&[1, 4, 4], v)
    }

    #[test]
    fn all_ones_mask_replaces_entire_image() {
        let mask = Tensor::ones(&[1, 4, 4]);
        let pattern = Tensor::filled(&[1, 4, 4], 0.25);
        let t = Trigger::Patch {
            mask,
            pattern: pattern.clone(),
        };
        let out = apply_trigger(&image(0.9), &t).unwrap();
        assert_eq!(out, pattern);
    }

    #[test]
    fn blended_alpha_zero_is_identity() {
        let t = Trigger::Blended {
            alpha: AlphaSpec::Scalar(0.0),
            pattern: Tensor::ones(&[1, 4, 4]),
        };
        let x = image(0.37);
        assert_eq!(apply_trigger(&x, &t).unwrap(), x);
    }

    #[test]
    fn blended_point_one_mixes_ten_percent() {
        let t = Trigger::Blended {
            alpha: AlphaSpec::Scalar(0.1),
            pattern: Tensor::ones(&[1, 4, 4]),
        };
        let out = apply_trigger(&image(0.5), &t).unwrap();
        assert_abs_diff_eq!(out.data()[0], 0.55, epsilon = 1e-15);
    }

    #[test]
    fn patch_is_idempotent() {
        let t = Trigger::checker_patch([1, 8, 8], 3, Corner::BottomRight, false).unwrap();
        let once = apply_trigger(&image_with_grad(), &t).unwrap();
        let twice = apply_trigger(&once, &t).unwrap();
        assert_eq!(once, twice);
    }

    fn image_with_grad() -> Tensor {
        Tensor::new(vec![1, 8, 8], (0..64).map(|i| i as f64 / 64.0).collect()).unwrap()
    }

    #[test]
    fn additive_clamps_to_pixel_range() {
        let theta = Tensor::filled(&[1, 4, 4], 0.3);
        let t = Trigger::Additive {
            epsilon: 0.3,
            theta,
        };
        let out = apply_trigger(&image(0.9), &t).unwrap();
        assert!(out.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn additive_over_budget_rejected() {
        let theta = Tensor::filled(&[1, 4, 4], 0.3);
        let t = Trigger::Additive {
            epsilon: 0.1,
            theta,
        };
        assert!(apply_trigger(&image(0.5), &t).is_err());
    }

    #[test]
    fn mask_must_be_binary() {
        let t = Trigger::Patch {
            mask: Tensor::filled(&[1, 4, 4], 0.5),
            pattern: Tensor::ones(&[1, 4, 4]),
        };
        assert!(apply_trigger(&image(0.5), &t).is_err());
    }

    #[test]
    fn shape_mismatch_is_structured() {
        let t = Trigger::checker_patch([1, 8, 8], 3, Corner::TopLeft, false).unwrap();
        assert!(matches!(
            apply_trigger(&image(0.5), &t),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn independent_trigger_differs() {
        let main = Trigger::checker_patch([1, 8, 8], 3, Corner::BottomRight, false).unwrap();
        let indep = Trigger::checker_patch([1, 8, 8], 3, Corner::TopLeft, true).unwrap();
        assert_ne!(main.digest(), indep.digest());
    }

    #[test]
    fn digest_is_stable_and_serializable() {
        let t = Trigger::checker_patch([1, 8, 8], 4, Corner::BottomRight, false).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: Trigger = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.digest(), t.digest());
    }
}
