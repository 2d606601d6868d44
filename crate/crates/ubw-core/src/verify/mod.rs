//! Black-box dataset-ownership verification.
//!
//! The verifier can only query a suspicious model for probability vectors.
//! It samples benign test images the model classifies correctly, queries
//! each twice (benign and trigger-bearing), and runs a one-sided paired
//! t-test of `H0: P_b = P_p + tau` against `H1: P_b > P_p + tau`, where both
//! probabilities are read at the ground-truth label. Rejecting H0 claims the
//! model was trained on the protected dataset with tau-certainty.

mod oracle;
mod special;

pub use oracle::{
    serve_oracle, InProcessOracle, ModelOracle, OracleRequest, OracleResponse, SubprocessOracle,
};
pub use special::{betainc_reg, lgamma, student_t_cdf};

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, RngStream};
use crate::error::{Error, Result};
use crate::watermark::{apply_trigger, Trigger};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationConfig {
    /// Certainty margin in [0,1].
    pub tau: f64,
    /// Number of paired queries.
    pub m: usize,
    /// Significance level for the decision.
    pub alpha: f64,
    pub seed: u64,
    /// Restrict candidate samples to one ground-truth class (the UBW-C
    /// source class); `None` draws from all classes.
    #[serde(default)]
    pub source_class: Option<u32>,
}

impl VerificationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidParameter {
                name: "m",
                why: format!("{} must be at least 2", self.m),
            });
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidParameter {
                name: "tau",
                why: format!("{} outside [0,1]", self.tau),
            });
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter {
                name: "alpha",
                why: format!("{} outside (0,1)", self.alpha),
            });
        }
        Ok(())
    }
}

/// Which relationship between model and trigger a run is probing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    IndependentTrigger,
    IndependentModel,
    Malicious,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub label: u32,
    pub p_benign: f64,
    pub p_poisoned: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub scenario: Scenario,
    pub tau: f64,
    pub m: usize,
    pub alpha: f64,
    /// Mean confidence drop `P_b - P_p`.
    pub delta_p: f64,
    pub t_statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// `p_value < alpha`.
    pub reject_h0: bool,
    /// Decisions at the two conventional levels, for the report table.
    pub reject_at_001: bool,
    pub reject_at_005: bool,
    pub trigger_digest: String,
    pub seed: u64,
    pub samples: Vec<SampleRecord>,
}

impl VerificationReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Per-sample records as CSV (`index,label,p_benign,p_poisoned,diff`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["index", "label", "p_benign", "p_poisoned", "diff"])
            .map_err(Error::from)?;
        for s in &self.samples {
            w.write_record([
                s.index.to_string(),
                s.label.to_string(),
                format!("{}", s.p_benign),
                format!("{}", s.p_poisoned),
                format!("{}", s.p_benign - s.p_poisoned),
            ])
            .map_err(Error::from)?;
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }
}

/// Validate a probability vector returned by an oracle.
fn check_probs(probs: &[f64], k: usize) -> Result<()> {
    if probs.len() != k {
        return Err(Error::Protocol(format!(
            "oracle returned {} probabilities, expected {k}",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
        return Err(Error::Protocol("oracle probability outside [0,1]".into()));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Protocol(format!(
            "oracle probabilities sum to {sum}"
        )));
    }
    Ok(())
}

fn argmax(probs: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, v) in probs.iter().enumerate() {
        if *v > probs[best] {
            best = i;
        }
    }
    best as u32 + 1
}

/// Draw `m` unique benign test samples the oracle classifies correctly,
/// in a seed-determined random order. Fails with the number found if fewer
/// than `m` qualify.
pub fn select_verification_samples(
    oracle: &dyn ModelOracle,
    data: &LabeledDataset,
    m: usize,
    source_class: Option<u32>,
    rng: &RngStream,
) -> Result<Vec<usize>> {
    let mut candidates: Vec<usize> = match source_class {
        Some(class) => data.indices_of_class(class),
        None => (0..data.len()).collect(),
    };
    let mut r = rng.substream("verification");
    candidates.shuffle(&mut r);

    let mut selected = Vec::with_capacity(m);
    for &i in &candidates {
        let probs = oracle.query(&data.image(i))?;
        check_probs(&probs, data.k())?;
        if argmax(&probs) == data.label(i) {
            selected.push(i);
            if selected.len() == m {
                return Ok(selected);
            }
        }
    }
    Err(Error::InsufficientSamples {
        requested: m,
        found: selected.len(),
    })
}

/// One-sided paired t-test of `H0: P_b = P_p + tau` vs `H1: P_b > P_p + tau`.
/// Returns `(t, dof, p)`. With zero sample variance the p-value degenerates
/// to 0 when the mean margin is positive and 1 otherwise.
pub fn paired_t_test(p_b: &[f64], p_p: &[f64], tau: f64) -> Result<(f64, usize, f64)> {
    if p_b.len() != p_p.len() {
        return Err(Error::InvalidParameter {
            name: "samples",
            why: format!("{} benign vs {} poisoned values", p_b.len(), p_p.len()),
        });
    }
    let m = p_b.len();
    if m < 2 {
        return Err(Error::InvalidParameter {
            name: "m",
            why: format!("{m} pairs; need at least 2"),
        });
    }
    for v in p_b.iter().chain(p_p) {
        if !(0.0..=1.0).contains(v) {
            return Err(Error::InvalidParameter {
                name: "probability",
                why: format!("{v} outside [0,1]"),
            });
        }
    }
    let d: Vec<f64> = p_b.iter().zip(p_p).map(|(b, p)| b - p - tau).collect();
    let mean = d.iter().sum::<f64>() / m as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1) as f64;
    let dof = m - 1;
    if var == 0.0 {
        let (t, p) = if mean > 0.0 {
            (f64::INFINITY, 0.0)
        } else if mean < 0.0 {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 1.0)
        };
        return Ok((t, dof, p));
    }
    let t = mean * (m as f64).sqrt() / var.sqrt();
    let p = 1.0 - student_t_cdf(t, dof)?;
    Ok((t, dof, p))
}

/// Full verification protocol: sample, query each image benign and
/// triggered, read both probabilities at the ground-truth label, test.
pub fn verify_ownership(
    oracle: &dyn ModelOracle,
    data: &LabeledDataset,
    trigger: &Trigger,
    cfg: &VerificationConfig,
    scenario: Scenario,
) -> Result<VerificationReport> {
    cfg.validate()?;
    trigger.validate(data.image_shape())?;
    let rng = RngStream::new(cfg.seed);
    let mut selected =
        select_verification_samples(oracle, data, cfg.m, cfg.source_class, &rng)?;
    selected.sort_unstable(); // records ordered by sample index

    let mut samples = Vec::with_capacity(cfg.m);
    for &i in &selected {
        let image = data.image(i);
        let label = data.label(i);
        let benign = oracle.query(&image)?;
        check_probs(&benign, data.k())?;
        let poisoned_img = apply_trigger(&image, trigger)?;
        let poisoned = oracle.query(&poisoned_img)?;
        check_probs(&poisoned, data.k())?;
        let at = (label - 1) as usize;
        samples.push(SampleRecord {
            index: i,
            label,
            p_benign: benign[at],
            p_poisoned: poisoned[at],
        });
    }

    let p_b: Vec<f64> = samples.iter().map(|s| s.p_benign).collect();
    let p_p: Vec<f64> = samples.iter().map(|s| s.p_poisoned).collect();
    let (t, dof, p) = paired_t_test(&p_b, &p_p, cfg.tau)?;
    let delta_p = p_b
        .iter()
        .zip(&p_p)
        .map(|(b, q)| b - q)
        .sum::<f64>()
        / cfg.m as f64;

    Ok(VerificationReport {
        scenario,
        tau: cfg.tau,
        m: cfg.m,
        alpha: cfg.alpha,
        delta_p,
        t_statistic: t,
        dof,
        p_value: p,
        reject_h0: p < cfg.alpha,
        reject_at_001: p < 0.01,
        reject_at_005: p < 0.05,
        trigger_digest: trigger.digest(),
        seed: cfg.seed,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn worked_example_matches_reference_oracle() {
        let p_b = [0.9, 0.95, 0.85, 0.9];
        let p_p = [0.1, 0.2, 0.15, 0.05];
        let (t, dof, p) = paired_t_test(&p_b, &p_p, 0.25).unwrap();
        assert_abs_diff_eq!(t, 16.26653005407115, epsilon = 1e-9);
        assert_eq!(dof, 3);
        assert_abs_diff_eq!(p, 2.5274267306951703e-4, epsilon = 1e-10);
    }

    #[test]
    fn null_case_fails_to_reject() {
        let p = [0.8, 0.7, 0.9, 0.6];
        let (t, _, pv) = paired_t_test(&p, &p, 0.0).unwrap();
        assert_eq!(t, 0.0);
        assert!(pv >= 0.5);
    }

    #[test]
    fn tau_one_dominates_any_data() {
        let p_b = [1.0, 1.0, 0.99, 1.0];
        let p_p = [0.0, 0.0, 0.01, 0.0];
        let (_, _, p) = paired_t_test(&p_b, &p_p, 1.0).unwrap();
        assert!(p >= 0.5, "p = {p}");
    }

    #[test]
    fn zero_variance_convention() {
        // constant positive margin: certain rejection
        let p_b = [0.9, 0.9, 0.9];
        let p_p = [0.1, 0.1, 0.1];
        let (t, _, p) = paired_t_test(&p_b, &p_p, 0.25).unwrap();
        assert!(t.is_infinite() && t > 0.0);
        assert_eq!(p, 0.0);
        // constant non-positive margin: certain non-rejection
        let (_, _, p) = paired_t_test(&p_p, &p_b, 0.0).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(paired_t_test(&[0.5, 0.5], &[0.5], 0.0).is_err());
        assert!(paired_t_test(&[0.5], &[0.5], 0.0).is_err());
        assert!(paired_t_test(&[1.5, 0.0], &[0.0, 0.0], 0.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        /// Shifting every difference upward (same deviations) cannot raise p.
        #[test]
        fn p_value_monotone_in_mean(seed in 0u64..5000, shift in 0.0f64..0.2) {
            use rand::{Rng, SeedableRng};
            let mut r = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let m = r.gen_range(3..30);
            let p_p: Vec<f64> = (0..m).map(|_| r.gen_range(0.2..0.5)).collect();
            let p_b: Vec<f64> = p_p.iter().map(|p| p + r.gen_range(0.0..0.3)).collect();
            let shifted: Vec<f64> = p_b.iter().map(|b| (b + shift).min(1.0)).collect();
            // only compare when the shift keeps the deviation pattern intact
            prop_assume!(shifted.iter().zip(&p_b).all(|(s, b)| (s - b - shift).abs() < 1e-12));
            let (_, _, p1) = paired_t_test(&p_b, &p_p, 0.25).unwrap();
            let (_, _, p2) = paired_t_test(&shifted, &p_p, 0.25).unwrap();
            prop_assert!(p2 <= p1 + 1e-12);
        }
    }
}
