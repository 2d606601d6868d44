//! Watermark performance metrics: benign accuracy, attack success rates
//! over triggered test samples, and the prediction dispersibility of the
//! triggered predictions grouped by ground-truth label.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::dispersibility::{d_p, PredictionTable};
use crate::error::Result;
use crate::nn::ModelState;
use crate::watermark::{apply_trigger_batch, Trigger};

/// What counts as a successful attack on a triggered sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "goal", rename_all = "kebab-case")]
pub enum AttackGoal {
    /// Any misclassification (prediction differs from the true label).
    Untargeted,
    /// Prediction equals the fixed target label.
    Targeted { target: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    /// Benign accuracy on clean test samples.
    pub ba: f64,
    /// Attack success rate over all test samples.
    pub asr_a: f64,
    /// Attack success rate over correctly classified test samples;
    /// undefined (None) when nothing is classified correctly.
    pub asr_c: Option<f64>,
    /// Prediction dispersibility of triggered predictions.
    pub d_p: f64,
}

/// Hard predictions in fixed-size batches (keeps tape memory bounded).
pub fn predict_all(model: &ModelState, data: &LabeledDataset) -> Result<Vec<u32>> {
    let mut preds = Vec::with_capacity(data.len());
    let n = data.len();
    let mut i = 0;
    while i < n {
        let hi = (i + 64).min(n);
        let indices: Vec<usize> = (i..hi).collect();
        preds.extend(model.predict(&data.batch(&indices))?);
        i = hi;
    }
    Ok(preds)
}

/// Same, with the trigger applied to every image first.
pub fn predict_all_triggered(
    model: &ModelState,
    data: &LabeledDataset,
    trigger: &Trigger,
) -> Result<Vec<u32>> {
    let mut preds = Vec::with_capacity(data.len());
    let n = data.len();
    let mut i = 0;
    while i < n {
        let hi = (i + 64).min(n);
        let indices: Vec<usize> = (i..hi).collect();
        let triggered = apply_trigger_batch(&data.batch(&indices), trigger)?;
        preds.extend(model.predict(&triggered)?);
        i = hi;
    }
    Ok(preds)
}

/// Fraction of samples predicted correctly.
pub fn accuracy(model: &ModelState, data: &LabeledDataset) -> Result<f64> {
    let preds = predict_all(model, data)?;
    let correct = preds
        .iter()
        .zip(data.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Full metric set on a benign test set and a trigger.
pub fn evaluate(
    model: &ModelState,
    test: &LabeledDataset,
    trigger: &Trigger,
    goal: AttackGoal,
) -> Result<MetricSet> {
    let benign_preds = predict_all(model, test)?;
    let triggered_preds = predict_all_triggered(model, test, trigger)?;
    let n = test.len() as f64;

    let correct: Vec<bool> = benign_preds
        .iter()
        .zip(test.labels())
        .map(|(p, y)| p == y)
        .collect();
    let ba = correct.iter().filter(|c| **c).count() as f64 / n;

    let success = |pred: u32, label: u32| -> bool {
        match goal {
            AttackGoal::Untargeted => pred != label,
            AttackGoal::Targeted { target } => pred == target,
        }
    };
    let asr_a = triggered_preds
        .iter()
        .zip(test.labels())
        .filter(|(p, y)| success(**p, **y))
        .count() as f64
        / n;

    let denom = correct.iter().filter(|c| **c).count();
    let asr_c = if denom == 0 {
        None
    } else {
        let hits = triggered_preds
            .iter()
            .zip(test.labels())
            .zip(&correct)
            .filter(|((p, y), c)| **c && success(**p, **y))
            .count();
        Some(hits as f64 / denom as f64)
    };

    let table = PredictionTable::hard(test.labels().to_vec(), triggered_preds, test.k())?;
    let d_p = d_p(&table)?;

    Ok(MetricSet {
        ba,
        asr_a,
        asr_c,
        d_p,
    })
}
