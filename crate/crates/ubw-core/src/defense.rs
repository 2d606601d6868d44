//! Resistance bench: fine-tuning on benign data with frozen feature layers,
//! and channel pruning of the last convolutional layer, both traced with
//! watermark metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, RngStream};
use crate::error::{Error, Result};
use crate::eval::{evaluate, AttackGoal, MetricSet};
use crate::nn::{sgd_train_observed, Arch, ModelState, SgdConfig};
use crate::tensor::Tape;
use crate::watermark::Trigger;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseKind {
    FineTune,
    Prune,
}

/// Metrics at one grid point (an epoch for fine-tuning, a pruning rate for
/// pruning).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseTraceRow {
    pub parameter: f64,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseRun {
    pub kind: DefenseKind,
    pub rows: Vec<DefenseTraceRow>,
}

impl DefenseRun {
    /// CSV trace: `defense,parameter,ba,asr_a,asr_c,d_p`. An undefined
    /// ASR-C is written as the explicit marker `undefined`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["defense", "parameter", "ba", "asr_a", "asr_c", "d_p"])
            .map_err(Error::from)?;
        let kind = match self.kind {
            DefenseKind::FineTune => "fine-tune",
            DefenseKind::Prune => "prune",
        };
        for row in &self.rows {
            let asr_c = row
                .metrics
                .asr_c
                .map_or_else(|| "undefined".to_string(), |v| format!("{v}"));
            w.write_record([
                kind.to_string(),
                format!("{}", row.parameter),
                format!("{}", row.metrics.ba),
                format!("{}", row.metrics.asr_a),
                asr_c,
                format!("{}", row.metrics.d_p),
            ])
            .map_err(Error::from)?;
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }
}

/// Evaluation context shared by the defenses.
pub struct EvalContext<'a> {
    pub test: &'a LabeledDataset,
    pub trigger: &'a Trigger,
    pub goal: AttackGoal,
}

/// Fine-tune the classifier head on a benign fraction, freezing the
/// convolutional layers (SmallCnn) or the first `mlp_frozen_layers` linear
/// layers (Mlp). `lr = 0` or `epochs = 0` is an exact no-op. The returned
/// trace holds the metric set after every epoch.
pub fn fine_tune(
    model: &ModelState,
    benign: &LabeledDataset,
    fraction: f64,
    epochs: usize,
    lr: f64,
    mlp_frozen_layers: usize,
    rng: &RngStream,
    ctx: &EvalContext,
) -> Result<(ModelState, DefenseRun)> {
    if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::InvalidParameter {
            name: "fraction",
            why: format!("{fraction} outside (0,1]"),
        });
    }
    if lr < 0.0 {
        return Err(Error::InvalidParameter {
            name: "lr",
            why: format!("negative learning rate {lr}"),
        });
    }
    if lr == 0.0 || epochs == 0 {
        let metrics = evaluate(model, ctx.test, ctx.trigger, ctx.goal)?;
        return Ok((
            model.clone(),
            DefenseRun {
                kind: DefenseKind::FineTune,
                rows: vec![DefenseTraceRow {
                    parameter: 0.0,
                    metrics,
                }],
            },
        ));
    }

    let frozen: Vec<bool> = match model.arch() {
        Arch::SmallCnn { .. } => model.arch().param_specs().iter().map(|s| s.conv).collect(),
        Arch::Mlp { .. } => {
            let specs = model.arch().param_specs();
            (0..specs.len()).map(|i| i / 2 < mlp_frozen_layers).collect()
        }
    };

    // benign subset for tuning
    let m = ((fraction * benign.len() as f64).floor() as usize).max(1);
    let mut order: Vec<usize> = (0..benign.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng.substream("finetune"));
    order.truncate(m);
    order.sort_unstable();
    let subset = LabeledDataset::new(
        benign.batch(&order),
        order.iter().map(|&i| benign.label(i)).collect(),
        benign.k(),
    )?;

    let cfg = SgdConfig {
        lr,
        milestones: vec![],
        decay: 0.1,
        momentum: 0.9,
        weight_decay: 0.0,
        batch_size: 32.min(subset.len()),
        epochs,
        augment_flip: false,
    };
    let mut rows = Vec::with_capacity(epochs);
    let (tuned, _) = sgd_train_observed(
        model,
        &subset,
        &cfg,
        rng,
        None,
        &frozen,
        &mut |epoch, current| {
            let metrics = evaluate(current, ctx.test, ctx.trigger, ctx.goal)?;
            rows.push(DefenseTraceRow {
                parameter: (epoch + 1) as f64,
                metrics,
            });
            Ok(())
        },
    )?;
    Ok((
        tuned,
        DefenseRun {
            kind: DefenseKind::FineTune,
            rows,
        },
    ))
}

/// Mean absolute activation of each last-conv channel over a calibration
/// set (any existing prune mask stays in effect).
fn channel_importance(model: &ModelState, calib: &LabeledDataset) -> Result<Vec<f64>> {
    let Arch::SmallCnn { conv2, .. } = model.arch() else {
        return Err(Error::UnsupportedArch {
            arch: "mlp".into(),
            what: "channel pruning",
        });
    };
    let channels = *conv2;
    let mut sums = vec![0.0f64; channels];
    let mut count = 0usize;
    let specs = model.arch().param_specs();
    let trainable = vec![false; specs.len()];
    let n = calib.len();
    let mut i = 0;
    while i < n {
        let hi = (i + 64).min(n);
        let indices: Vec<usize> = (i..hi).collect();
        let mut tape = Tape::first_order();
        let params = model.params_on_tape(&mut tape, &trainable);
        let input = tape.constant(calib.batch(&indices));
        let graph = model.build_forward(&mut tape, &params, input)?;
        let conv = graph.conv2_out.expect("small cnn taps conv2");
        let v = tape.value(conv);
        let s = v.shape(); // [b, channels, oh, ow]
        let hw = s[2] * s[3];
        for b in 0..s[0] {
            for c in 0..channels {
                let base = (b * channels + c) * hw;
                sums[c] += v.data()[base..base + hw]
                    .iter()
                    .map(|x| x.abs())
                    .sum::<f64>();
            }
        }
        count += indices.len() * hw;
        i = hi;
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

/// Zero (mask) the `ceil(beta * channels)` last-conv channels with the
/// lowest mean absolute activation over the calibration data. Output
/// dimensionality is unchanged; `beta = 0` is an exact identity.
pub fn prune_channels(
    model: &ModelState,
    beta: f64,
    calib: &LabeledDataset,
) -> Result<ModelState> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidParameter {
            name: "beta",
            why: format!("{beta} outside [0,1)"),
        });
    }
    let importance = channel_importance(model, calib)?;
    let channels = importance.len();
    let prune = (beta * channels as f64).ceil() as usize;

    let mut order: Vec<usize> = (0..channels).collect();
    order.sort_by(|&a, &b| {
        importance[a]
            .partial_cmp(&importance[b])
            .expect("finite importance")
            .then(a.cmp(&b))
    });
    let mut mask = vec![1.0f64; channels];
    for &c in order.iter().take(prune) {
        mask[c] = 0.0;
    }
    if let Some(existing) = model.prune_mask() {
        for (m, e) in mask.iter_mut().zip(existing) {
            *m *= e;
        }
    }
    model.clone().with_prune_mask(Some(mask))
}

/// Prune at every rate in the grid (from the same base model) and record
/// metrics per point; the grid is sorted ascending.
pub fn prune_grid(
    model: &ModelState,
    grid: &[f64],
    calib: &LabeledDataset,
    ctx: &EvalContext,
) -> Result<DefenseRun> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter {
            name: "grid",
            why: "empty pruning grid".into(),
        });
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    let mut rows = Vec::with_capacity(sorted.len());
    for &beta in &sorted {
        let pruned = prune_channels(model, beta, calib)?;
        let metrics = evaluate(&pruned, ctx.test, ctx.trigger, ctx.goal)?;
        rows.push(DefenseTraceRow {
            parameter: beta,
            metrics,
        });
    }
    Ok(DefenseRun {
        kind: DefenseKind::Prune,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_patterns;
    use crate::watermark::Corner;

    fn cnn_setup() -> (ModelState, LabeledDataset, Trigger) {
        let rng = RngStream::new(81);
        let data = synth_patterns(3, 12, 0.1, [1, 16, 16], &rng).unwrap();
        let arch = Arch::SmallCnn {
            in_channels: 1,
            height: 16,
            width: 16,
            conv1: 4,
            conv2: 6,
            fc: 10,
            classes: 3,
        };
        let model = ModelState::init(arch, &RngStream::new(82)).unwrap();
        let trigger = Trigger::checker_patch([1, 16, 16], 4, Corner::BottomRight, false).unwrap();
        (model, data, trigger)
    }

    #[test]
    fn prune_zero_is_exact_identity() {
        let (model, data, _) = cnn_setup();
        let pruned = prune_channels(&model, 0.0, &data).unwrap();
        let all: Vec<usize> = (0..data.len()).collect();
        let batch = data.batch(&all);
        let a = model.forward(&batch).unwrap();
        let b = pruned.forward(&batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pruned_channels_are_zero_downstream() {
        let (model, data, _) = cnn_setup();
        let pruned = prune_channels(&model, 0.5, &data).unwrap();
        let mask = pruned.prune_mask().unwrap().to_vec();
        assert_eq!(mask.iter().filter(|m| **m == 0.0).count(), 3); // ceil(0.5*6)

        let mut tape = Tape::first_order();
        let trainable = vec![false; pruned.arch().param_specs().len()];
        let params = pruned.params_on_tape(&mut tape, &trainable);
        let input = tape.constant(data.batch(&[0, 1, 2]));
        let graph = pruned.build_forward(&mut tape, &params, input).unwrap();
        let conv = tape.value(graph.conv2_out.unwrap());
        let s = conv.shape().to_vec();
        let hw = s[2] * s[3];
        for b in 0..s[0] {
            for (c, m) in mask.iter().enumerate() {
                let base = (b * mask.len() + c) * hw;
                let all_zero = conv.data()[base..base + hw].iter().all(|v| *v == 0.0);
                assert_eq!(all_zero, *m == 0.0, "channel {c}");
            }
        }
    }

    #[test]
    fn prune_rejects_mlp_and_bad_beta() {
        let mlp = ModelState::zeros(Arch::Mlp {
            widths: vec![4, 2],
        })
        .unwrap();
        let data = synth_patterns(2, 3, 0.1, [1, 2, 2], &RngStream::new(83)).unwrap();
        assert!(matches!(
            prune_channels(&mlp, 0.1, &data),
            Err(Error::UnsupportedArch { .. })
        ));
        let (model, data, _) = cnn_setup();
        assert!(prune_channels(&model, 1.0, &data).is_err());
    }

    #[test]
    fn fine_tune_zero_lr_is_noop_and_conv_params_frozen() {
        let (model, data, trigger) = cnn_setup();
        let ctx = EvalContext {
            test: &data,
            trigger: &trigger,
            goal: AttackGoal::Untargeted,
        };
        let rng = RngStream::new(84);
        let (same, _) = fine_tune(&model, &data, 0.1, 5, 0.0, 0, &rng, &ctx).unwrap();
        assert_eq!(same, model);

        let (tuned, run) = fine_tune(&model, &data, 0.5, 2, 0.1, 0, &rng, &ctx).unwrap();
        assert_eq!(run.rows.len(), 2);
        // conv slices bit-identical, fc slices changed
        for (spec, (a, b)) in model.arch().param_specs().iter().zip(
            model
                .param_tensors()
                .into_iter()
                .zip(tuned.param_tensors()),
        ) {
            if spec.conv {
                assert_eq!(a, b, "frozen {}", spec.name);
            }
        }
        assert_ne!(model.params(), tuned.params());
    }

    #[test]
    fn mlp_frozen_prefix_freezes_layers() {
        let arch = Arch::Mlp {
            widths: vec![4, 6, 5, 2],
        };
        let model = ModelState::init(arch, &RngStream::new(85)).unwrap();
        let data = synth_patterns(2, 10, 0.1, [1, 2, 2], &RngStream::new(86)).unwrap();
        let trigger = Trigger::checker_patch([1, 2, 2], 1, Corner::TopLeft, false).unwrap();
        let ctx = EvalContext {
            test: &data,
            trigger: &trigger,
            goal: AttackGoal::Untargeted,
        };
        let (tuned, _) =
            fine_tune(&model, &data, 1.0, 2, 0.1, 2, &RngStream::new(87), &ctx).unwrap();
        let specs = model.arch().param_specs();
        let frozen_len: usize = specs[..4]
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum();
        assert_eq!(&tuned.params()[..frozen_len], &model.params()[..frozen_len]);
        assert_ne!(&tuned.params()[frozen_len..], &model.params()[frozen_len..]);
    }

    #[test]
    fn csv_trace_has_undefined_marker_support() {
        let dir = tempfile::tempdir().unwrap();
        let run = DefenseRun {
            kind: DefenseKind::Prune,
            rows: vec![DefenseTraceRow {
                parameter: 0.5,
                metrics: MetricSet {
                    ba: 0.0,
                    asr_a: 1.0,
                    asr_c: None,
                    d_p: 0.0,
                },
            }],
        };
        let path = dir.path().join("trace.csv");
        run.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("undefined"));
        assert!(text.starts_with("defense,parameter,ba,asr_a,asr_c,d_p"));
    }
}
