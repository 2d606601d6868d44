//! Run configuration: a single JSON document per run. Unknown keys are
//! rejected; every command writes its resolved config next to its outputs
//! and embeds the config digest in every artifact.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ubw_core::data::{
    load_cifar_binary, load_idx, split_per_class, synth_patterns, LabeledDataset, RngStream,
};
use ubw_core::nn::{Arch, PgaConfig, SgdConfig};
use ubw_core::watermark::{BilevelConfig, Corner, SelectionRule, Trigger};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Deterministic synthetic patterns (class templates plus noise).
    Synth {
        k: usize,
        per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_sigma")]
        sigma: f64,
        /// [C, H, W]
        image: [usize; 3],
    },
    /// Paired IDX image/label files (MNIST layout).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        k: usize,
    },
    /// CIFAR-10 binary batches.
    CifarBin { train: PathBuf, test: PathBuf },
}

fn default_sigma() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    UbwP,
    UbwC,
    Badnets,
    Blended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TriggerConfig {
    /// White-black checker square replacing pixels in a corner.
    Patch {
        size: usize,
        #[serde(default = "default_corner")]
        corner: Corner,
        #[serde(default)]
        invert: bool,
    },
    /// Full-image checkerboard blended at a fixed ratio.
    Blended { alpha: f64 },
}

fn default_corner() -> Corner {
    Corner::BottomRight
}

impl TriggerConfig {
    pub fn build(&self, image_shape: [usize; 3]) -> Result<Trigger> {
        let t = match self {
            TriggerConfig::Patch {
                size,
                corner,
                invert,
            } => Trigger::checker_patch(image_shape, *size, *corner, *invert)?,
            TriggerConfig::Blended { alpha } => Trigger::blended_checker(image_shape, *alpha)?,
        };
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatermarkConfig {
    pub method: Method,
    pub gamma: f64,
    pub trigger: TriggerConfig,
    /// Target label for the targeted baselines.
    #[serde(default = "default_target")]
    pub y_t: u32,
    /// UBW-P: resample labels excluding the original.
    #[serde(default)]
    pub exclude_original: bool,
    // UBW-C parameters
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_lower_epochs")]
    pub lower_epochs: usize,
    #[serde(default = "default_lower_lr")]
    pub lower_lr: f64,
    #[serde(default = "default_pga_steps")]
    pub pga_steps: usize,
    #[serde(default = "default_pga_step_size")]
    pub pga_step_size: f64,
    #[serde(default = "default_true")]
    pub pga_sign_based: bool,
    #[serde(default = "default_source_class")]
    pub source_class: u32,
    #[serde(default = "default_selection")]
    pub selection: SelectionRule,
}

fn default_target() -> u32 {
    1
}
fn default_lambda() -> f64 {
    2.0
}
fn default_epsilon() -> f64 {
    16.0 / 255.0
}
fn default_rounds() -> usize {
    3
}
fn default_lower_epochs() -> usize {
    4
}
fn default_lower_lr() -> f64 {
    0.05
}
fn default_pga_steps() -> usize {
    20
}
fn default_pga_step_size() -> f64 {
    0.03
}
fn default_true() -> bool {
    true
}
fn default_source_class() -> u32 {
    1
}
fn default_selection() -> SelectionRule {
    SelectionRule::GradientNorm
}

impl WatermarkConfig {
    pub fn bilevel(&self, base_train: &SgdConfig) -> BilevelConfig {
        BilevelConfig {
            lambda: self.lambda,
            rounds: self.rounds,
            gamma: self.gamma,
            source_class: self.source_class,
            selection: self.selection,
            lower: SgdConfig {
                lr: self.lower_lr,
                milestones: vec![],
                epochs: self.lower_epochs,
                ..base_train.clone()
            },
            pga: PgaConfig {
                step_size: self.pga_step_size,
                steps: self.pga_steps,
                epsilon: self.epsilon,
                pixel_min: 0.0,
                pixel_max: 1.0,
                sign_based: self.pga_sign_based,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyParams {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Restrict verification samples to the watermark's source class.
    /// Defaults to on exactly when the watermark is UBW-C.
    #[serde(default)]
    pub source_class_only: Option<bool>,
}

fn default_tau() -> f64 {
    0.25
}
fn default_m() -> usize {
    100
}
fn default_alpha() -> f64 {
    0.01
}

impl Default for VerifyParams {
    fn default() -> Self {
        VerifyParams {
            tau: default_tau(),
            m: default_m(),
            alpha: default_alpha(),
            source_class_only: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub arch: Arch,
    pub train: SgdConfig,
    #[serde(default)]
    pub watermark: Option<WatermarkConfig>,
    #[serde(default)]
    pub verify: Option<VerifyParams>,
    pub seed: u64,
    /// Where artifacts go; not part of the canonical config (two runs of
    /// the same experiment in different directories share a digest).
    #[serde(default, skip_serializing)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(w) = &self.watermark {
            if !(w.gamma > 0.0 && w.gamma < 1.0) {
                bail!("watermark.gamma {} outside (0,1)", w.gamma);
            }
        }
        Ok(())
    }

    /// Canonical JSON bytes of the resolved config.
    pub fn canonical_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    /// SHA-256 hex digest of the canonical bytes; embedded in artifacts.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_bytes()?)))
    }

    /// Output directory: --out-dir flag beats config beats $UBW_OUT beats cwd.
    pub fn resolve_out_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = &self.out_dir {
            return p.clone();
        }
        if let Ok(p) = std::env::var("UBW_OUT") {
            return PathBuf::from(p);
        }
        PathBuf::from(".")
    }

    /// Write `resolved-config.json` into the output directory.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("creating {}", out_dir.display()))?;
        let path = out_dir.join("resolved-config.json");
        std::fs::write(&path, self.canonical_bytes()?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    /// Materialize the benign train/test datasets.
    pub fn load_datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match &self.dataset {
            DatasetConfig::Synth {
                k,
                per_class,
                test_per_class,
                sigma,
                image,
            } => {
                let rng = RngStream::new(self.seed);
                let full = synth_patterns(*k, per_class + test_per_class, *sigma, *image, &rng)?;
                Ok(split_per_class(&full, *test_per_class)?)
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                k,
            } => {
                let train = load_idx(train_images, train_labels, *k)?;
                let test = load_idx(test_images, test_labels, *k)?;
                Ok((train, test))
            }
            DatasetConfig::CifarBin { train, test } => {
                Ok((load_cifar_binary(train)?, load_cifar_binary(test)?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> serde_json::Value {
        serde_json::json!({
            "dataset": {"source": "synth", "k": 3, "per_class": 4, "test_per_class": 2,
                        "image": [1, 8, 8]},
            "arch": {"type": "mlp", "widths": [64, 8, 3]},
            "train": {"lr": 0.1, "momentum": 0.9, "weight_decay": 0.0,
                      "batch_size": 4, "epochs": 1},
            "seed": 5
        })
    }

    #[test]
    fn parses_and_digests_deterministically() {
        let cfg: RunConfig = serde_json::from_value(minimal_json()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.digest().unwrap(), cfg.digest().unwrap());
        let (train, test) = cfg.load_datasets().unwrap();
        assert_eq!(train.len(), 12);
        assert_eq!(test.len(), 6);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = minimal_json();
        v["surprise"] = serde_json::json!(1);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn bad_gamma_rejected() {
        let mut v = minimal_json();
        v["watermark"] = serde_json::json!({
            "method": "ubw-p", "gamma": 1.5,
            "trigger": {"kind": "patch", "size": 2}
        });
        let cfg: RunConfig = serde_json::from_value(v).unwrap();
        assert!(cfg.validate().is_err());
    }
}
