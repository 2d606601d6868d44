//! Mini-batch SGD with momentum, milestone learning-rate decay, and weight
//! decay. Shuffle order comes from the run RNG stream and reductions are
//! order-fixed, so identical seeds give bitwise-identical parameters.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::cross_entropy_graph;
use super::model::{argmax_rows, ModelState};
use crate::data::{LabeledDataset, RngStream};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    /// 0-based epoch indices at which the learning rate is multiplied by
    /// `decay` (epoch `e` uses `lr * decay^|{m : m <= e}|`).
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_decay")]
    pub decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Horizontal flip augmentation, applied after any trigger insertion
    /// (the poisoners run before training). Off by default for determinism.
    #[serde(default)]
    pub augment_flip: bool,
}

fn default_decay() -> f64 {
    0.1
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidParameter {
                name: "lr",
                why: format!("{} must be positive", self.lr),
            });
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter {
                name: "momentum",
                why: format!("{} outside [0,1)", self.momentum),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter {
                name: "batch_size",
                why: "zero batch size".into(),
            });
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let hits = self.milestones.iter().filter(|m| **m <= epoch).count();
        self.lr * self.decay.powi(hits as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Accuracy on the eval set, when one was supplied.
    pub accuracy: Option<f64>,
}

/// Train all parameters.
pub fn sgd_train(
    model: &ModelState,
    data: &LabeledDataset,
    cfg: &SgdConfig,
    rng: &RngStream,
    eval: Option<&LabeledDataset>,
) -> Result<(ModelState, Vec<TrainLogRow>)> {
    let frozen = vec![false; model.arch().param_specs().len()];
    sgd_train_frozen(model, data, cfg, rng, eval, &frozen)
}

/// Train with some parameter slices frozen (`frozen[i]` per param spec).
/// Frozen slices are registered as constants, receive no gradient, and are
/// returned bit-identical.
pub fn sgd_train_frozen(
    model: &ModelState,
    data: &LabeledDataset,
    cfg: &SgdConfig,
    rng: &RngStream,
    eval: Option<&LabeledDataset>,
    frozen: &[bool],
) -> Result<(ModelState, Vec<TrainLogRow>)> {
    sgd_train_observed(model, data, cfg, rng, eval, frozen, &mut |_, _| Ok(()))
}

/// [`sgd_train_frozen`] plus an after-each-epoch observer (used by the
/// defense bench to trace metrics without interrupting momentum).
pub fn sgd_train_observed(
    model: &ModelState,
    data: &LabeledDataset,
    cfg: &SgdConfig,
    rng: &RngStream,
    eval: Option<&LabeledDataset>,
    frozen: &[bool],
    on_epoch: &mut dyn FnMut(usize, &ModelState) -> Result<()>,
) -> Result<(ModelState, Vec<TrainLogRow>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidParameter {
            name: "data",
            why: "empty training set".into(),
        });
    }
    let specs = model.arch().param_specs();
    if frozen.len() != specs.len() {
        return Err(Error::InvalidParameter {
            name: "frozen",
            why: format!("{} flags for {} param slices", frozen.len(), specs.len()),
        });
    }

    let mut trained = model.clone();
    let trainable: Vec<bool> = frozen.iter().map(|f| !f).collect();
    let mut velocity: Vec<Vec<f64>> = specs
        .iter()
        .map(|s| vec![0.0; s.shape.iter().product()])
        .collect();

    let mut shuffle_rng = rng.substream("shuffle");
    let mut augment_rng = rng.substream("augment");
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;

        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch = data.batch(chunk);
            if cfg.augment_flip {
                flip_some(&mut batch, &mut augment_rng);
            }
            let labels: Vec<u32> = chunk.iter().map(|&i| data.label(i)).collect();

            let mut tape = Tape::first_order();
            let params = trained.params_on_tape(&mut tape, &trainable);
            let input = tape.constant(batch);
            let graph = trained.build_forward(&mut tape, &params, input)?;
            let loss = cross_entropy_graph(&mut tape, graph.probs, &labels)?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_idx,
                });
            }
            tape.backward(loss)?;

            let mut tensors = trained.param_tensors();
            for (i, spec) in specs.iter().enumerate() {
                if frozen[i] {
                    continue;
                }
                let grad = tape.grad(params[i]).expect("trainable param grad");
                let w = tensors[i].data_mut();
                let v = &mut velocity[i];
                for j in 0..w.len() {
                    let g = grad.data()[j] + cfg.weight_decay * w[j];
                    v[j] = cfg.momentum * v[j] + g;
                    w[j] -= lr * v[j];
                }
                let _ = spec;
            }
            trained.set_param_tensors(&tensors);

            epoch_loss += loss_value;
            batches += 1.0;
        }

        let accuracy = match eval {
            Some(ds) => Some(accuracy_on(&trained, ds)?),
            None => None,
        };
        log.push(TrainLogRow {
            epoch,
            lr,
            loss: epoch_loss / batches,
            accuracy,
        });
        on_epoch(epoch, &trained)?;
    }

    Ok((trained, log))
}

/// Fraction of samples whose argmax prediction matches the label.
pub(crate) fn accuracy_on(model: &ModelState, data: &LabeledDataset) -> Result<f64> {
    let mut correct = 0usize;
    let n = data.len();
    let chunk = 64;
    let mut i = 0;
    while i < n {
        let hi = (i + chunk).min(n);
        let indices: Vec<usize> = (i..hi).collect();
        let probs = model.forward(&data.batch(&indices))?;
        for (p, &idx) in argmax_rows(&probs).iter().zip(&indices) {
            if *p == data.label(idx) {
                correct += 1;
            }
        }
        i = hi;
    }
    Ok(correct as f64 / n as f64)
}

/// Flip images left-right with probability 1/2 each, in place.
fn flip_some(batch: &mut Tensor, rng: &mut impl Rng) {
    let shape = batch.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let data = batch.data_mut();
    for ni in 0..n {
        if !rng.gen::<bool>() {
            continue;
        }
        for ci in 0..c {
            for hi in 0..h {
                let row = (ni * c + ci) * h * w + hi * w;
                data[row..row + w].reverse();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Arch;
    use crate::tensor::Tensor;

    /// Two linearly separable 2-D blobs around (0.25,0.25) and (0.75,0.75).
    fn blobs(n_per: usize, sigma: f64, seed: u64) -> LabeledDataset {
        let rng = RngStream::new(seed);
        let mut r = rng.substream("blobs");
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for class in 0..2u32 {
            let center = if class == 0 { 0.25 } else { 0.75 };
            for _ in 0..n_per {
                for _ in 0..2 {
                    let jitter: f64 = r.gen_range(-1.0..1.0) * sigma;
                    pixels.push((center + jitter).clamp(0.0, 1.0));
                }
                labels.push(class + 1);
            }
        }
        let images = Tensor::new(vec![2 * n_per, 1, 1, 2], pixels).unwrap();
        LabeledDataset::new(images, labels, 2).unwrap()
    }

    fn mlp() -> Arch {
        Arch::Mlp {
            widths: vec![2, 8, 2],
        }
    }

    fn quick_cfg(epochs: usize) -> SgdConfig {
        SgdConfig {
            lr: 0.5,
            milestones: vec![],
            decay: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 16,
            epochs,
            augment_flip: false,
        }
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let data = blobs(60, 0.05, 1);
        let rng = RngStream::new(2);
        let model = ModelState::init(mlp(), &rng).unwrap();
        let (trained, log) = sgd_train(&model, &data, &quick_cfg(20), &rng, None).unwrap();
        let acc = accuracy_on(&trained, &data).unwrap();
        assert!(acc >= 0.99, "train accuracy {acc}");
        assert!(
            log.last().unwrap().loss < log.first().unwrap().loss,
            "loss did not decrease"
        );
        assert_eq!(log.len(), 20);
    }

    #[test]
    fn lr_schedule_sequence() {
        let cfg = SgdConfig {
            lr: 0.1,
            milestones: vec![2],
            decay: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 4,
            epochs: 3,
            augment_flip: false,
        };
        let lrs: Vec<f64> = (0..3).map(|e| cfg.lr_at_epoch(e)).collect();
        assert_eq!(lrs, vec![0.1, 0.1, 0.010000000000000002]);

        let data = blobs(8, 0.05, 3);
        let rng = RngStream::new(3);
        let model = ModelState::init(mlp(), &rng).unwrap();
        let (_, log) = sgd_train(&model, &data, &cfg, &rng, None).unwrap();
        let logged: Vec<f64> = log.iter().map(|r| r.lr).collect();
        assert_eq!(logged, lrs);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let data = blobs(20, 0.05, 4);
        let rng = RngStream::new(9);
        let model = ModelState::init(mlp(), &rng).unwrap();
        let (a, _) = sgd_train(&model, &data, &quick_cfg(5), &rng, None).unwrap();
        let (b, _) = sgd_train(&model, &data, &quick_cfg(5), &rng, None).unwrap();
        assert_eq!(a.params(), b.params());
    }

    /// With momentum 0, weight decay 0, and full-batch training, one epoch
    /// must equal a single hand-computed gradient step.
    #[test]
    fn full_batch_step_matches_hand_computed_gradient() {
        let data = blobs(10, 0.05, 5);
        let rng = RngStream::new(6);
        let model = ModelState::init(mlp(), &rng).unwrap();
        let cfg = SgdConfig {
            lr: 0.2,
            milestones: vec![],
            decay: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: data.len(),
            epochs: 1,
            augment_flip: false,
        };
        let (stepped, _) = sgd_train(&model, &data, &cfg, &rng, None).unwrap();

        // hand-computed full-batch gradient step
        let mut tape = Tape::first_order();
        let trainable = vec![true; model.arch().param_specs().len()];
        let params = model.params_on_tape(&mut tape, &trainable);
        let all: Vec<usize> = (0..data.len()).collect();
        let input = tape.constant(data.batch(&all));
        let graph = model.build_forward(&mut tape, &params, input).unwrap();
        let labels: Vec<u32> = all.iter().map(|&i| data.label(i)).collect();
        let loss = cross_entropy_graph(&mut tape, graph.probs, &labels).unwrap();
        tape.backward(loss).unwrap();

        let mut expect = model.clone();
        let mut tensors = expect.param_tensors();
        for (i, t) in tensors.iter_mut().enumerate() {
            let g = tape.grad(params[i]).unwrap();
            for (w, gv) in t.data_mut().iter_mut().zip(g.data()) {
                *w -= 0.2 * gv;
            }
        }
        expect.set_param_tensors(&tensors);

        for (a, b) in stepped.params().iter().zip(expect.params()) {
            assert!((a - b).abs() <= 1e-10, "step mismatch {a} vs {b}");
        }
    }

    /// Weight decay must add exactly wd*w to each gradient.
    #[test]
    fn weight_decay_adds_scaled_params_to_gradient() {
        let data = blobs(10, 0.05, 7);
        let rng = RngStream::new(8);
        let model = ModelState::init(mlp(), &rng).unwrap();
        let mk_cfg = |wd: f64| SgdConfig {
            lr: 0.1,
            milestones: vec![],
            decay: 0.1,
            momentum: 0.0,
            weight_decay: wd,
            batch_size: data.len(),
            epochs: 1,
            augment_flip: false,
        };
        let (plain, _) = sgd_train(&model, &data, &mk_cfg(0.0), &rng, None).unwrap();
        let (decayed, _) = sgd_train(&model, &data, &mk_cfg(0.01), &rng, None).unwrap();
        for ((p, d), w0) in plain.params().iter().zip(decayed.params()).zip(model.params()) {
            let expect = p - 0.1 * 0.01 * w0;
            assert!((d - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn frozen_slices_stay_bit_identical() {
        let data = blobs(12, 0.05, 10);
        let rng = RngStream::new(11);
        let model = ModelState::init(mlp(), &rng).unwrap();
        // freeze first layer (w1, b1)
        let frozen = vec![true, true, false, false];
        let (tuned, _) =
            sgd_train_frozen(&model, &data, &quick_cfg(3), &rng, None, &frozen).unwrap();
        let specs = model.arch().param_specs();
        let w1_len: usize = specs[0].shape.iter().product::<usize>()
            + specs[1].shape.iter().product::<usize>();
        assert_eq!(&tuned.params()[..w1_len], &model.params()[..w1_len]);
        assert_ne!(&tuned.params()[w1_len..], &model.params()[w1_len..]);
    }
}
