//! Dataset watermarking: the untargeted poisoned-label scheme (UBW-P), the
//! targeted baselines (BadNets, Blended), and the clean-label bi-level
//! optimizer (UBW-C).

mod bilevel;
mod trigger;

pub use bilevel::{
    grad_matching_objective, grad_matching_theta_grad, optimize_ubw_c, select_by_gradient_norm,
    AdditiveSet, BilevelConfig, RoundLog, SelectionRule, UbwCOutcome,
};
pub use trigger::{apply_trigger, apply_trigger_batch, AlphaSpec, Corner, Trigger};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{select_subset, LabeledDataset, Provenance, RngStream, Selection};
use crate::error::Result;

/// What happened to a poisoned sample's label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum LabelAction {
    /// Clean-label watermark: the label is untouched.
    Keep,
    /// Targeted baseline: forced to the target label.
    SetTo { target: u32 },
    /// UBW-P: resampled uniformly (the draw is recorded).
    Resampled { new: u32 },
}

/// Which samples were modified and how, recorded into provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonPlan {
    pub indices: Vec<usize>,
    pub actions: Vec<LabelAction>,
    pub gamma: f64,
    pub trigger_digest: String,
}

fn poisoned_provenance(
    method: &str,
    gamma: f64,
    trigger: &Trigger,
    plan: &PoisonPlan,
) -> Result<Provenance> {
    Ok(Provenance::Poisoned {
        method: method.to_string(),
        gamma,
        trigger_digest: trigger.digest(),
        trigger: serde_json::to_value(trigger)?,
        plan: serde_json::to_value(plan)?,
    })
}

/// Untargeted backdoor watermark with poisoned labels: a `gamma` fraction of
/// samples gets the trigger and a uniformly resampled label. The draw may
/// repeat the original label unless `exclude_original` is set.
pub fn poison_ubw_p(
    data: &LabeledDataset,
    gamma: f64,
    trigger: &Trigger,
    rng: &RngStream,
    exclude_original: bool,
) -> Result<(LabeledDataset, PoisonPlan)> {
    trigger.validate(data.image_shape())?;
    let split = select_subset(data, Selection::Fraction(gamma), rng)?;
    let k = data.k() as u32;
    let mut label_rng = rng.substream("labels");

    let mut poisoned = data.clone();
    let mut actions = Vec::with_capacity(split.indices.len());
    for &i in &split.indices {
        let new_image = apply_trigger(&data.image(i), trigger)?;
        poisoned.set_image(i, &new_image);
        let y = data.label(i);
        let new = if exclude_original {
            // uniform over the K-1 other labels
            let r = label_rng.gen_range(1..k);
            if r >= y {
                r + 1
            } else {
                r
            }
        } else {
            label_rng.gen_range(1..=k)
        };
        poisoned.set_label(i, new);
        actions.push(LabelAction::Resampled { new });
    }
    let plan = PoisonPlan {
        indices: split.indices,
        actions,
        gamma,
        trigger_digest: trigger.digest(),
    };
    let poisoned = poisoned.with_provenance(poisoned_provenance("ubw-p", gamma, trigger, &plan)?);
    Ok((poisoned, plan))
}

/// Targeted baseline (BadNets with a patch trigger, Blended with a blend
/// trigger): poisoned samples get the trigger and the fixed target label.
pub fn poison_targeted(
    data: &LabeledDataset,
    gamma: f64,
    trigger: &Trigger,
    target: u32,
    rng: &RngStream,
) -> Result<(LabeledDataset, PoisonPlan)> {
    trigger.validate(data.image_shape())?;
    if target == 0 || target as usize > data.k() {
        return Err(crate::error::Error::LabelOutOfRange {
            label: target,
            k: data.k(),
        });
    }
    let split = select_subset(data, Selection::Fraction(gamma), rng)?;
    let mut poisoned = data.clone();
    let mut actions = Vec::with_capacity(split.indices.len());
    for &i in &split.indices {
        let new_image = apply_trigger(&data.image(i), trigger)?;
        poisoned.set_image(i, &new_image);
        poisoned.set_label(i, target);
        actions.push(LabelAction::SetTo { target });
    }
    let plan = PoisonPlan {
        indices: split.indices,
        actions,
        gamma,
        trigger_digest: trigger.digest(),
    };
    let method = match trigger {
        Trigger::Patch { .. } => "badnets",
        Trigger::Blended { .. } => "blended",
        Trigger::Additive { .. } => "targeted-additive",
    };
    let poisoned = poisoned.with_provenance(poisoned_provenance(method, gamma, trigger, &plan)?);
    Ok((poisoned, plan))
}
