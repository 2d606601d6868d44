//! Dataset representation, ingestion, synthesis, splits, and seeded RNG.
//!
//! Images are normalized to `[0,1]` 64-bit floats internally; labels are
//! 1-based (`1..=K`). File formats with 0-based labels are shifted at the
//! boundary. Perturbation budgets are expressed in the same normalized unit
//! (a classic 8-bit budget of 16 becomes `16/255`).

mod container;
mod formats;
mod synth;

pub use container::{read_container, write_container};
pub use formats::{load_cifar_binary, load_idx, write_idx};
pub use synth::synth_patterns;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Where a dataset came from, carried through containers and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    Benign,
    Poisoned {
        method: String,
        gamma: f64,
        trigger_digest: String,
        /// Verification trigger, serialized so the generator can be rebuilt.
        trigger: serde_json::Value,
        /// Selected indices and per-index label actions.
        plan: serde_json::Value,
    },
}

/// Ordered collection of (image, label) pairs plus the class count.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// All images, `[n, C, H, W]`.
    images: Tensor,
    /// 1-based labels, length n.
    labels: Vec<u32>,
    k: usize,
    provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<u32>, k: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[0] == 0 {
            return Err(Error::InvalidParameter {
                name: "images",
                why: format!("expected non-empty [n,C,H,W], got {shape:?}"),
            });
        }
        if shape[0] != labels.len() {
            return Err(Error::InvalidParameter {
                name: "labels",
                why: format!("{} images but {} labels", shape[0], labels.len()),
            });
        }
        for &y in &labels {
            if y == 0 || y as usize > k {
                return Err(Error::LabelOutOfRange { label: y, k });
            }
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParameter {
                name: "images",
                why: "pixel outside [0,1]".into(),
            });
        }
        Ok(LabeledDataset {
            images,
            labels,
            k,
            provenance: Provenance::Benign,
        })
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Image shape `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image_numel(&self) -> usize {
        let [c, h, w] = self.image_shape();
        c * h * w
    }

    /// Copy of sample `i`'s image as a `[C,H,W]` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let d = self.image_numel();
        let [c, h, w] = self.image_shape();
        Tensor::new(
            vec![c, h, w],
            self.images.data()[i * d..(i + 1) * d].to_vec(),
        )
        .expect("image slice")
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    /// Batch of images `[len, C, H, W]` for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let d = self.image_numel();
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * d..(i + 1) * d]);
        }
        Tensor::new(vec![indices.len(), c, h, w], data).expect("batch")
    }

    /// Per-class sample counts, index 0 holding class 1.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.k];
        for &y in &self.labels {
            counts[(y - 1) as usize] += 1;
        }
        counts
    }

    /// Indices of all samples with the given 1-based label.
    pub fn indices_of_class(&self, class: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, y)| **y == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Replace image `i` (used by poisoners; label untouched).
    pub(crate) fn set_image(&mut self, i: usize, img: &Tensor) {
        let d = self.image_numel();
        self.images.data_mut()[i * d..(i + 1) * d].copy_from_slice(img.data());
    }

    pub(crate) fn set_label(&mut self, i: usize, label: u32) {
        self.labels[i] = label;
    }
}

/// Split a dataset into train/test by taking the last `test_per_class`
/// samples of every class for the test side (deterministic, order-stable).
pub fn split_per_class(
    data: &LabeledDataset,
    test_per_class: usize,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let counts = data.class_counts();
    if counts.iter().any(|&c| c <= test_per_class) {
        return Err(Error::InvalidParameter {
            name: "test_per_class",
            why: format!(
                "need more than {test_per_class} samples in every class, have {counts:?}"
            ),
        });
    }
    let mut remaining: Vec<usize> = counts.iter().map(|c| c - test_per_class).collect();
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (i, &y) in data.labels().iter().enumerate() {
        let slot = (y - 1) as usize;
        if remaining[slot] > 0 {
            remaining[slot] -= 1;
            train_idx.push(i);
        } else {
            test_idx.push(i);
        }
    }
    let take = |idx: &[usize]| -> Result<LabeledDataset> {
        LabeledDataset::new(
            data.batch(idx),
            idx.iter().map(|&i| data.label(i)).collect(),
            data.k(),
        )
    };
    Ok((take(&train_idx)?, take(&test_idx)?))
}

/// Selected-subset plan: which sample indices a poisoner will modify.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub indices: Vec<usize>,
}

/// Select `floor(gamma * n)` unique indices, or validate an explicit list.
pub enum Selection<'a> {
    Fraction(f64),
    Indices(&'a [usize]),
}

pub fn select_subset(data: &LabeledDataset, sel: Selection, rng: &RngStream) -> Result<SplitPlan> {
    let n = data.len();
    let indices = match sel {
        Selection::Fraction(gamma) => {
            if !(gamma > 0.0 && gamma < 1.0) {
                return Err(Error::InvalidParameter {
                    name: "gamma",
                    why: format!("{gamma} outside (0,1)"),
                });
            }
            let m = (gamma * n as f64).floor() as usize;
            let mut all: Vec<usize> = (0..n).collect();
            let mut r = rng.substream("selection");
            all.shuffle(&mut r);
            let mut chosen: Vec<usize> = all.into_iter().take(m).collect();
            chosen.sort_unstable();
            chosen
        }
        Selection::Indices(list) => {
            let mut seen = vec![false; n];
            for &i in list {
                if i >= n {
                    return Err(Error::InvalidParameter {
                        name: "indices",
                        why: format!("index {i} out of range for n={n}"),
                    });
                }
                if seen[i] {
                    return Err(Error::InvalidParameter {
                        name: "indices",
                        why: format!("duplicate index {i}"),
                    });
                }
                seen[i] = true;
            }
            let mut v = list.to_vec();
            v.sort_unstable();
            v
        }
    };
    Ok(SplitPlan {
        seed: rng.seed(),
        indices,
    })
}

/// Seeded RNG service with named substreams, so e.g. subset selection and
/// label shuffling can be varied independently.
#[derive(Debug, Clone, Copy)]
pub struct RngStream {
    seed: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Deterministic generator for a named substream: identical seed and
    /// name always yield the identical sequence.
    pub fn substream(&self, name: &str) -> ChaCha12Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha12Rng::from_seed(key)
    }

    /// Derive a child stream, e.g. one per bi-level round.
    pub fn derive(&self, name: &str) -> RngStream {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(b"derive");
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        RngStream::new(u64::from_le_bytes(bytes))
    }
}

/// SHA-256 hex digest of arbitrary bytes (file digests, trigger digests).
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn toy_dataset(n: usize, k: usize) -> LabeledDataset {
        let images = Tensor::filled(&[n, 1, 2, 2], 0.5);
        let labels = (0..n).map(|i| (i % k) as u32 + 1).collect();
        LabeledDataset::new(images, labels, k).unwrap()
    }

    #[test]
    fn substreams_are_deterministic_and_distinct() {
        let s = RngStream::new(42);
        let a: Vec<u64> = (0..4).map(|_| 0).collect::<Vec<_>>();
        let _ = a;
        let mut r1 = s.substream("selection");
        let mut r2 = s.substream("selection");
        let mut r3 = s.substream("labels");
        let x1: Vec<u64> = (0..4).map(|_| r1.next_u64()).collect();
        let x2: Vec<u64> = (0..4).map(|_| r2.next_u64()).collect();
        let x3: Vec<u64> = (0..4).map(|_| r3.next_u64()).collect();
        assert_eq!(x1, x2);
        assert_ne!(x1, x3);
    }

    #[test]
    fn select_subset_sizes() {
        let data = toy_dataset(1000, 10);
        let rng = RngStream::new(7);
        let plan = select_subset(&data, Selection::Fraction(0.1), &rng).unwrap();
        assert_eq!(plan.indices.len(), 100);
        let mut sorted = plan.indices.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 100);

        // floor rule on small n
        let small = toy_dataset(3, 3);
        let plan = select_subset(&small, Selection::Fraction(0.5), &rng).unwrap();
        assert_eq!(plan.indices.len(), 1);
    }

    #[test]
    fn select_subset_is_deterministic() {
        let data = toy_dataset(50, 5);
        let rng = RngStream::new(9);
        let a = select_subset(&data, Selection::Fraction(0.2), &rng).unwrap();
        let b = select_subset(&data, Selection::Fraction(0.2), &rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn select_subset_rejects_bad_gamma() {
        let data = toy_dataset(10, 2);
        let rng = RngStream::new(1);
        assert!(select_subset(&data, Selection::Fraction(0.0), &rng).is_err());
        assert!(select_subset(&data, Selection::Fraction(1.0), &rng).is_err());
        assert!(select_subset(&data, Selection::Fraction(1.5), &rng).is_err());
    }

    #[test]
    fn class_counts_and_indices() {
        let data = toy_dataset(10, 2);
        assert_eq!(data.class_counts(), vec![5, 5]);
        assert_eq!(data.indices_of_class(1), vec![0, 2, 4, 6, 8]);
    }

    #[test]
    fn split_per_class_keeps_counts() {
        let rng = RngStream::new(17);
        let data = synth_patterns(3, 10, 0.1, [1, 2, 2], &rng).unwrap();
        let (train, test) = split_per_class(&data, 3).unwrap();
        assert_eq!(train.class_counts(), vec![7, 7, 7]);
        assert_eq!(test.class_counts(), vec![3, 3, 3]);
        assert_eq!(train.len() + test.len(), data.len());
        assert!(split_per_class(&data, 10).is_err());
    }
}
