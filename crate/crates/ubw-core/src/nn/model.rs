//! Architectures and parameter state.
//!
//! Parameters live in one flat `f64` vector with a per-layer slicing map, so
//! optimizers and gradient-matching code can treat the model as a single
//! vector while the forward pass sees per-layer tensors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::RngStream;
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Network architecture descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Arch {
    /// Fully connected ReLU net; `widths[0]` is the input dimension and the
    /// last entry is the class count.
    Mlp { widths: Vec<usize> },
    /// conv3x3 -> relu -> pool2 -> conv3x3 -> relu -> pool2 -> fc -> relu -> fc.
    SmallCnn {
        in_channels: usize,
        height: usize,
        width: usize,
        conv1: usize,
        conv2: usize,
        fc: usize,
        classes: usize,
    },
}

/// One named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// True for convolutional parameters (frozen by the fine-tuning defense).
    pub conv: bool,
}

impl Arch {
    pub fn classes(&self) -> usize {
        match self {
            Arch::Mlp { widths } => *widths.last().expect("non-empty widths"),
            Arch::SmallCnn { classes, .. } => *classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Arch::Mlp { widths } => {
                if widths.len() < 2 || widths.len() > 9 || widths.iter().any(|w| *w == 0) {
                    return Err(Error::InvalidParameter {
                        name: "arch",
                        why: format!("MLP widths {widths:?} need 2..=9 nonzero entries"),
                    });
                }
            }
            Arch::SmallCnn {
                in_channels,
                height,
                width,
                conv1,
                conv2,
                fc,
                classes,
            } => {
                if *in_channels == 0 || *conv1 == 0 || *conv2 == 0 || *fc == 0 || *classes == 0 {
                    return Err(Error::InvalidParameter {
                        name: "arch",
                        why: "zero-sized layer".into(),
                    });
                }
                let dims = Self::cnn_dims(*height, *width)?;
                let _ = dims;
            }
        }
        Ok(())
    }

    /// Spatial sizes after each conv/pool stage: ((oh1,ow1),(p1h,p1w),(oh2,ow2),(p2h,p2w)).
    #[allow(clippy::type_complexity)]
    fn cnn_dims(h: usize, w: usize) -> Result<((usize, usize), (usize, usize), (usize, usize), (usize, usize))> {
        let fail = || Error::InvalidParameter {
            name: "arch",
            why: format!("input {h}x{w} too small for two conv3x3+pool2 stages"),
        };
        if h < 3 || w < 3 {
            return Err(fail());
        }
        let (oh1, ow1) = (h - 2, w - 2);
        let (p1h, p1w) = (oh1 / 2, ow1 / 2);
        if p1h < 3 || p1w < 3 {
            return Err(fail());
        }
        let (oh2, ow2) = (p1h - 2, p1w - 2);
        let (p2h, p2w) = (oh2 / 2, ow2 / 2);
        if p2h == 0 || p2w == 0 {
            return Err(fail());
        }
        Ok(((oh1, ow1), (p1h, p1w), (oh2, ow2), (p2h, p2w)))
    }

    /// Flat feature size entering the first fully connected layer.
    pub fn cnn_flat_dim(&self) -> Result<usize> {
        match self {
            Arch::SmallCnn {
                height,
                width,
                conv2,
                ..
            } => {
                let (_, _, _, (p2h, p2w)) = Self::cnn_dims(*height, *width)?;
                Ok(conv2 * p2h * p2w)
            }
            Arch::Mlp { .. } => Err(Error::UnsupportedArch {
                arch: "mlp".into(),
                what: "conv feature dim",
            }),
        }
    }

    /// Per-layer slices of the flat parameter vector, in forward order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        fn push(
            specs: &mut Vec<ParamSpec>,
            offset: &mut usize,
            name: &'static str,
            shape: Vec<usize>,
            conv: bool,
        ) {
            let numel: usize = shape.iter().product();
            specs.push(ParamSpec {
                name,
                shape,
                offset: *offset,
                conv,
            });
            *offset += numel;
        }
        const W_NAMES: [&str; 8] = ["w1", "w2", "w3", "w4", "w5", "w6", "w7", "w8"];
        const B_NAMES: [&str; 8] = ["b1", "b2", "b3", "b4", "b5", "b6", "b7", "b8"];

        let mut specs = Vec::new();
        let mut offset = 0;
        match self {
            Arch::Mlp { widths } => {
                for (i, pair) in widths.windows(2).enumerate() {
                    push(&mut specs, &mut offset, W_NAMES[i], vec![pair[0], pair[1]], false);
                    push(&mut specs, &mut offset, B_NAMES[i], vec![pair[1]], false);
                }
            }
            Arch::SmallCnn {
                in_channels,
                conv1,
                conv2,
                fc,
                classes,
                ..
            } => {
                let flat = self.cnn_flat_dim().expect("validated arch");
                push(&mut specs, &mut offset, "conv1_w", vec![*conv1, *in_channels, 3, 3], true);
                push(&mut specs, &mut offset, "conv1_b", vec![*conv1], true);
                push(&mut specs, &mut offset, "conv2_w", vec![*conv2, *conv1, 3, 3], true);
                push(&mut specs, &mut offset, "conv2_b", vec![*conv2], true);
                push(&mut specs, &mut offset, "fc1_w", vec![flat, *fc], false);
                push(&mut specs, &mut offset, "fc1_b", vec![*fc], false);
                push(&mut specs, &mut offset, "fc2_w", vec![*fc, *classes], false);
                push(&mut specs, &mut offset, "fc2_b", vec![*classes], false);
            }
        }
        specs
    }

    pub fn param_len(&self) -> usize {
        self.param_specs()
            .last()
            .map_or(0, |s| s.offset + s.shape.iter().product::<usize>())
    }
}

/// Tape nodes produced by a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardGraph {
    /// Probabilities, `[n, K]`.
    pub probs: NodeId,
    /// Output of the last convolutional layer `[n, C2, H, W]` (CNN only).
    pub conv2_out: Option<NodeId>,
}

/// Architecture plus flat parameter vector (and an optional channel mask
/// installed by the pruning defense).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    arch: Arch,
    params: Vec<f64>,
    prune_mask: Option<Vec<f64>>,
}

impl ModelState {
    pub fn new(arch: Arch, params: Vec<f64>, prune_mask: Option<Vec<f64>>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_len() {
            return Err(Error::InvalidParameter {
                name: "params",
                why: format!(
                    "arch wants {} parameters, got {}",
                    arch.param_len(),
                    params.len()
                ),
            });
        }
        if let (Some(mask), Arch::SmallCnn { conv2, .. }) = (&prune_mask, &arch) {
            if mask.len() != *conv2 {
                return Err(Error::InvalidParameter {
                    name: "prune_mask",
                    why: format!("mask length {} != conv2 channels {conv2}", mask.len()),
                });
            }
        }
        Ok(ModelState {
            arch,
            params,
            prune_mask,
        })
    }

    /// Zero-initialized parameters (uniform predictions from any input).
    pub fn zeros(arch: Arch) -> Result<Self> {
        let n = arch.param_len();
        ModelState::new(arch, vec![0.0; n], None)
    }

    /// He-style uniform init for weights, zero biases, from the `init`
    /// substream.
    pub fn init(arch: Arch, rng: &RngStream) -> Result<Self> {
        arch.validate()?;
        let mut r = rng.substream("init");
        let mut params = vec![0.0; arch.param_len()];
        for spec in arch.param_specs() {
            if spec.shape.len() == 1 {
                continue; // biases stay zero
            }
            let fan_in: usize = match spec.shape.len() {
                2 => spec.shape[0],
                4 => spec.shape[1] * spec.shape[2] * spec.shape[3],
                _ => spec.shape.iter().product(),
            };
            let limit = (6.0 / fan_in as f64).sqrt();
            let numel: usize = spec.shape.iter().product();
            for p in params[spec.offset..spec.offset + numel].iter_mut() {
                *p = r.gen_range(-limit..limit);
            }
        }
        ModelState::new(arch, params, None)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn prune_mask(&self) -> Option<&[f64]> {
        self.prune_mask.as_deref()
    }

    pub fn with_prune_mask(mut self, mask: Option<Vec<f64>>) -> Result<Self> {
        ModelState::new(self.arch.clone(), std::mem::take(&mut self.params), mask)
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    /// Slice the flat vector into one tensor per parameter spec.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.arch
            .param_specs()
            .iter()
            .map(|s| {
                let numel: usize = s.shape.iter().product();
                Tensor::new(
                    s.shape.clone(),
                    self.params[s.offset..s.offset + numel].to_vec(),
                )
                .expect("spec shape")
            })
            .collect()
    }

    /// Write per-layer tensors back into the flat vector.
    pub fn set_param_tensors(&mut self, tensors: &[Tensor]) {
        for (spec, t) in self.arch.param_specs().iter().zip(tensors) {
            let numel: usize = spec.shape.iter().product();
            self.params[spec.offset..spec.offset + numel].copy_from_slice(t.data());
        }
    }

    /// Register all parameters on a tape; entries of `trainable` decide
    /// leaf vs constant per parameter spec.
    pub fn params_on_tape(&self, tape: &mut Tape, trainable: &[bool]) -> Vec<NodeId> {
        self.param_tensors()
            .into_iter()
            .zip(trainable)
            .map(|(t, &tr)| if tr { tape.leaf(t, true) } else { tape.constant(t) })
            .collect()
    }

    /// Build the forward graph for a batch already on the tape.
    pub fn build_forward(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        input: NodeId,
    ) -> Result<ForwardGraph> {
        build_forward(&self.arch, self.prune_mask.as_deref(), tape, params, input)
    }

    /// Forward pass on a fresh tape; returns probabilities `[n, K]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::first_order();
        let trainable = vec![false; self.arch.param_specs().len()];
        let params = self.params_on_tape(&mut tape, &trainable);
        let input = tape.constant(batch.clone());
        let graph = self.build_forward(&mut tape, &params, input)?;
        Ok(tape.value(graph.probs).clone())
    }

    /// Hard predictions (1-based, lowest-index tie-break).
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<u32>> {
        let probs = self.forward(batch)?;
        Ok(argmax_rows(&probs))
    }
}

/// Row-wise argmax of a `[n, K]` tensor, 1-based with lowest-index ties.
pub fn argmax_rows(probs: &Tensor) -> Vec<u32> {
    let k = probs.shape()[1];
    probs
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0usize;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best as u32 + 1
        })
        .collect()
}

/// Shared forward-graph builder used by training, evaluation, the bi-level
/// optimizer, and the defenses.
pub fn build_forward(
    arch: &Arch,
    prune_mask: Option<&[f64]>,
    tape: &mut Tape,
    params: &[NodeId],
    input: NodeId,
) -> Result<ForwardGraph> {
    match arch {
        Arch::Mlp { widths } => {
            let in_dim = widths[0];
            let shape = tape.shape(input).to_vec();
            let n = shape[0];
            let flat: usize = shape[1..].iter().product();
            if flat != in_dim {
                return Err(Error::ShapeMismatch {
                    op: "mlp forward",
                    lhs: shape,
                    rhs: vec![n, in_dim],
                });
            }
            let mut x = if shape.len() == 2 {
                input
            } else {
                tape.reshape(input, &[n, in_dim])?
            };
            let layers = widths.len() - 1;
            for l in 0..layers {
                let w = params[2 * l];
                let b = params[2 * l + 1];
                let z = tape.matmul(x, w)?;
                let out_dim = tape.shape(z)[1];
                let ones = tape.constant(Tensor::ones(&[n, 1]));
                let brow = tape.reshape(b, &[1, out_dim])?;
                let bmat = tape.matmul(ones, brow)?;
                let zb = tape.add(z, bmat)?;
                x = if l + 1 < layers { tape.relu(zb)? } else { zb };
            }
            let probs = tape.softmax_rows(x)?;
            Ok(ForwardGraph {
                probs,
                conv2_out: None,
            })
        }
        Arch::SmallCnn {
            in_channels,
            height,
            width,
            conv2,
            fc,
            classes,
            ..
        } => {
            let shape = tape.shape(input).to_vec();
            if shape.len() != 4 || shape[1] != *in_channels || shape[2] != *height || shape[3] != *width
            {
                return Err(Error::ShapeMismatch {
                    op: "cnn forward",
                    lhs: shape,
                    rhs: vec![0, *in_channels, *height, *width],
                });
            }
            let n = shape[0];
            let c1 = tape.conv2d(input, params[0], params[1])?;
            let r1 = tape.relu(c1)?;
            let p1 = tape.max_pool2(r1)?;
            let c2 = tape.conv2d(p1, params[2], params[3])?;
            let c2 = match prune_mask {
                Some(mask) => {
                    let s = tape.shape(c2).to_vec(); // [n, conv2, oh, ow]
                    let hw = s[2] * s[3];
                    let mut m = Vec::with_capacity(n * conv2 * hw);
                    for _ in 0..n {
                        for &ch in mask {
                            m.extend(std::iter::repeat(ch).take(hw));
                        }
                    }
                    let mid = tape.constant(Tensor::new(s, m)?);
                    tape.mul(c2, mid)?
                }
                None => c2,
            };
            let conv2_out = c2;
            let r2 = tape.relu(c2)?;
            let p2 = tape.max_pool2(r2)?;
            let ps = tape.shape(p2).to_vec();
            let flat = ps[1] * ps[2] * ps[3];
            let x = tape.reshape(p2, &[n, flat])?;

            let z1 = tape.matmul(x, params[4])?;
            let ones = tape.constant(Tensor::ones(&[n, 1]));
            let b1 = tape.reshape(params[5], &[1, *fc])?;
            let b1m = tape.matmul(ones, b1)?;
            let h = tape.add(z1, b1m)?;
            let h = tape.relu(h)?;

            let z2 = tape.matmul(h, params[6])?;
            let b2 = tape.reshape(params[7], &[1, *classes])?;
            let b2m = tape.matmul(ones, b2)?;
            let logits = tape.add(z2, b2m)?;
            let probs = tape.softmax_rows(logits)?;
            Ok(ForwardGraph {
                probs,
                conv2_out: Some(conv2_out),
            })
        }
    }
}
