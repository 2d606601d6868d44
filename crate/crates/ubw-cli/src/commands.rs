//! Subcommand implementations.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ubw_core::data::{read_container, write_container, LabeledDataset, Provenance, RngStream};
use ubw_core::defense::{fine_tune, prune_grid, DefenseRun, EvalContext};
use ubw_core::eval::{evaluate, AttackGoal, MetricSet};
use ubw_core::nn::{load_checkpoint, save_checkpoint, sgd_train, ModelState};
use ubw_core::verify::{
    serve_oracle, verify_ownership, InProcessOracle, ModelOracle, Scenario, SubprocessOracle,
    VerificationConfig,
};
use ubw_core::watermark::{optimize_ubw_c, poison_targeted, poison_ubw_p, Trigger};

use crate::config::{Method, RunConfig};

/// Marker for problems that should exit with the usage code (2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).map_err(|e| usage(format!("{e:#}")))
}

/// JSON artifact wrapper carrying the resolved config digest.
#[derive(Debug, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub config_digest: String,
    #[serde(flatten)]
    pub body: T,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_poison(config_path: &Path, out_dir: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config_path)?;
    let wm = cfg
        .watermark
        .clone()
        .ok_or_else(|| usage("poison requires a `watermark` section in the config"))?;
    let digest = cfg.digest()?;
    let out_dir = cfg.resolve_out_dir(out_dir);
    cfg.write_resolved(&out_dir)?;

    let (train, _test) = cfg.load_datasets()?;
    let trigger = wm.trigger.build(train.image_shape())?;
    let rng = RngStream::new(cfg.seed);

    let poisoned = match wm.method {
        Method::UbwP => poison_ubw_p(&train, wm.gamma, &trigger, &rng, wm.exclude_original)?.0,
        Method::Badnets | Method::Blended => {
            poison_targeted(&train, wm.gamma, &trigger, wm.y_t, &rng)?.0
        }
        Method::UbwC => {
            let init = ModelState::init(cfg.arch.clone(), &rng.derive("init"))?;
            let (pretrained, _) =
                sgd_train(&init, &train, &cfg.train, &rng.derive("pretrain"), None)?;
            let bcfg = wm.bilevel(&cfg.train);
            let outcome =
                optimize_ubw_c(&pretrained, &train, &bcfg, &trigger, &rng.derive("bilevel"))?;
            for r in &outcome.rounds {
                eprintln!(
                    "round {}: alignment {:.4} -> {:.4}",
                    r.round, r.cosine_before, r.cosine_after
                );
            }
            outcome.poisoned
        }
    };

    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out_dir.join("poisoned.ubw"));
    write_container(&poisoned, &digest, &path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_train(
    config_path: &Path,
    dataset: Option<&Path>,
    out_dir: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config_path)?;
    let digest = cfg.digest()?;
    let out_dir = cfg.resolve_out_dir(out_dir);
    cfg.write_resolved(&out_dir)?;

    let (benign_train, test) = cfg.load_datasets()?;
    let train_data = match dataset {
        Some(path) => {
            let (data, _) = read_container(path)?;
            data
        }
        None => benign_train,
    };

    let rng = RngStream::new(cfg.seed);
    let init = ModelState::init(cfg.arch.clone(), &rng.derive("init"))?;
    let (model, log) = sgd_train(&init, &train_data, &cfg.train, &rng.derive("train"), Some(&test))?;

    let ckpt_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out_dir.join("checkpoint.json"));
    save_checkpoint(&model, cfg.seed, &digest, &ckpt_path)?;

    let log_path = out_dir.join("train-log.csv");
    let mut w = csv::Writer::from_path(&log_path)
        .with_context(|| format!("writing {}", log_path.display()))?;
    w.write_record(["epoch", "lr", "loss", "ba"])?;
    for row in &log {
        w.write_record([
            row.epoch.to_string(),
            format!("{}", row.lr),
            format!("{}", row.loss),
            row.accuracy.map_or_else(String::new, |a| format!("{a}")),
        ])?;
    }
    w.flush()?;
    eprintln!("wrote {} and {}", ckpt_path.display(), log_path.display());
    Ok(())
}

/// Resolve the trigger: an explicit JSON file, a poisoned container's
/// provenance block, or the config's trigger section, in that order.
fn resolve_trigger(
    cfg: &RunConfig,
    trigger_json: Option<&Path>,
    trigger_from: Option<&Path>,
    image_shape: [usize; 3],
) -> Result<Trigger> {
    if let Some(path) = trigger_json {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let t: Trigger = serde_json::from_slice(&bytes)?;
        t.validate(image_shape)?;
        return Ok(t);
    }
    if let Some(path) = trigger_from {
        let (data, _) = read_container(path)?;
        return match data.provenance() {
            Provenance::Poisoned { trigger, .. } => {
                let t: Trigger = serde_json::from_value(trigger.clone())?;
                t.validate(image_shape)?;
                Ok(t)
            }
            Provenance::Benign => Err(usage(format!(
                "container {} is benign: no trigger in provenance",
                path.display()
            ))),
        };
    }
    match &cfg.watermark {
        Some(wm) => Ok(wm.trigger.build(image_shape)?),
        None => Err(usage(
            "no trigger available: pass --trigger-json/--trigger-from or configure `watermark`",
        )),
    }
}

fn attack_goal(cfg: &RunConfig) -> AttackGoal {
    match &cfg.watermark {
        Some(wm) if matches!(wm.method, Method::Badnets | Method::Blended) => AttackGoal::Targeted {
            target: wm.y_t,
        },
        _ => AttackGoal::Untargeted,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricsOut {
    ba: f64,
    asr_a: f64,
    asr_c: Option<f64>,
    /// Explicit marker for the empty ASR-C denominator.
    asr_c_undefined: bool,
    d_p: f64,
}

impl From<MetricSet> for MetricsOut {
    fn from(m: MetricSet) -> Self {
        MetricsOut {
            ba: m.ba,
            asr_a: m.asr_a,
            asr_c: m.asr_c,
            asr_c_undefined: m.asr_c.is_none(),
            d_p: m.d_p,
        }
    }
}

pub fn cmd_evaluate(
    config_path: &Path,
    checkpoint: &Path,
    trigger_json: Option<&Path>,
    trigger_from: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config_path)?;
    let digest = cfg.digest()?;
    let out_dir = cfg.resolve_out_dir(out_dir);
    cfg.write_resolved(&out_dir)?;

    let (_, test) = cfg.load_datasets()?;
    let (model, _) = load_checkpoint(checkpoint)?;
    let trigger = resolve_trigger(&cfg, trigger_json, trigger_from, test.image_shape())?;
    let metrics = evaluate(&model, &test, &trigger, attack_goal(&cfg))?;

    let path = out_dir.join("metrics.json");
    write_json(
        &path,
        &Artifact {
            config_digest: digest,
            body: MetricsOut::from(metrics.clone()),
        },
    )?;
    println!("{}", serde_json::to_string_pretty(&MetricsOut::from(metrics))?);
    eprintln!("wrote {}", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_verify(
    config_path: &Path,
    checkpoint: Option<&Path>,
    oracle_cmd: Option<&str>,
    trigger_json: Option<&Path>,
    trigger_from: Option<&Path>,
    scenario: Scenario,
    out_dir: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config_path)?;
    let digest = cfg.digest()?;
    let out_dir = cfg.resolve_out_dir(out_dir);
    cfg.write_resolved(&out_dir)?;

    let (_, test) = cfg.load_datasets()?;
    let trigger = resolve_trigger(&cfg, trigger_json, trigger_from, test.image_shape())?;

    let oracle: Box<dyn ModelOracle> = match (checkpoint, oracle_cmd) {
        (Some(path), None) => {
            let (model, _) = load_checkpoint(path)?;
            Box::new(InProcessOracle::new(model))
        }
        (None, Some(cmd)) => {
            let parts: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            let (prog, args) = parts
                .split_first()
                .ok_or_else(|| usage("--oracle-cmd is empty"))?;
            Box::new(SubprocessOracle::spawn(prog, args)?)
        }
        _ => return Err(usage("pass exactly one of --checkpoint or --oracle-cmd")),
    };

    let params = cfg.verify.clone().unwrap_or_default();
    let source_class_only = params.source_class_only.unwrap_or_else(|| {
        matches!(cfg.watermark.as_ref().map(|w| w.method), Some(Method::UbwC))
    });
    let vcfg = VerificationConfig {
        tau: params.tau,
        m: params.m,
        alpha: params.alpha,
        seed: cfg.seed,
        source_class: source_class_only
            .then(|| cfg.watermark.as_ref().map(|w| w.source_class))
            .flatten(),
    };
    let report = verify_ownership(oracle.as_ref(), &test, &trigger, &vcfg, scenario)?;

    let json_path = out_dir.join("report.json");
    write_json(
        &json_path,
        &Artifact {
            config_digest: digest,
            body: report.clone(),
        },
    )?;
    report.write_csv(&out_dir.join("report.csv"))?;
    println!(
        "{}",
        serde_json::json!({
            "scenario": report.scenario,
            "delta_p": report.delta_p,
            "t": report.t_statistic,
            "dof": report.dof,
            "p_value": report.p_value,
            "reject_h0": report.reject_h0,
        })
    );
    eprintln!("wrote {}", json_path.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepKind {
    Gamma,
    Lambda,
}

/// Parse `gamma=0.01,0.05,0.1` / `lambda=0,1,2`.
pub fn parse_sweep(spec: &str) -> Result<(SweepKind, Vec<f64>)> {
    let (name, list) = spec
        .split_once('=')
        .ok_or_else(|| usage("sweep spec must look like gamma=0.01,0.05,0.1"))?;
    let kind = match name.trim() {
        "gamma" => SweepKind::Gamma,
        "lambda" => SweepKind::Lambda,
        other => return Err(usage(format!("unknown sweep variable `{other}`"))),
    };
    let values: Vec<f64> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| usage(format!("bad sweep value `{s}`: {e}")))
        })
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(usage("empty sweep list"));
    }
    Ok((kind, values))
}

pub fn cmd_ablate(config_path: &Path, sweep: &str, out_dir: Option<&Path>) -> Result<()> {
    let cfg = load_config(config_path)?;
    let (kind, values) = parse_sweep(sweep)?;
    if cfg.watermark.is_none() {
        return Err(usage("ablate requires a `watermark` section in the config"));
    }
    let out_dir = cfg.resolve_out_dir(out_dir);
    cfg.write_resolved(&out_dir)?;

    let path = out_dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    let var = match kind {
        SweepKind::Gamma => "gamma",
        SweepKind::Lambda => "lambda",
    };
    w.write_record([var, "ba", "asr_a", "asr_c", "d_p"])?;

    for &value in &values {
        let mut sub = cfg.clone();
        {
            let wm = sub.watermark.as_mut().expect("checked above");
            match kind {
                SweepKind::Gamma => wm.gamma = value,
                SweepKind::Lambda => wm.lambda = value,
            }
        }
        sub.validate().map_err(|e| usage(format!("{e:#}")))?;
        let metrics = run_pipeline_point(&sub)?;
        w.write_record([
            format!("{value}"),
            format!("{}", metrics.ba),
            format!("{}", metrics.asr_a),
            metrics
                .asr_c
                .map_or_else(|| "undefined".into(), |v| format!("{v}")),
            format!("{}", metrics.d_p),
        ])?;
        eprintln!("{var}={value}: BA {:.4} ASR-A {:.4} D_p {:.4}", metrics.ba, metrics.asr_a, metrics.d_p);
    }
    w.flush()?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// One fully seeded poison -> train -> evaluate sub-run.
fn run_pipeline_point(cfg: &RunConfig) -> Result<MetricSet> {
    let wm = cfg.watermark.clone().expect("pipeline point needs watermark");
    let (train, test) = cfg.load_datasets()?;
    let trigger = wm.trigger.build(train.image_shape())?;
    let rng = RngStream::new(cfg.seed);

    let poisoned = match wm.method {
        Method::UbwP => poison_ubw_p(&train, wm.gamma, &trigger, &rng, wm.exclude_original)?.0,
        Method::Badnets | Method::Blended => {
            poison_targeted(&train, wm.gamma, &trigger, wm.y_t, &rng)?.0
        }
        Method::UbwC => {
            let init = ModelState::init(cfg.arch.clone(), &rng.derive("init"))?;
            let (pretrained, _) =
                sgd_train(&init, &train, &cfg.train, &rng.derive("pretrain"), None)?;
            let bcfg = wm.bilevel(&cfg.train);
            optimize_ubw_c(&pretrained, &train, &bcfg, &trigger, &rng.derive("bilevel"))?.poisoned
        }
    };

    let init = ModelState::init(cfg.arch.clone(), &rng.derive("init"))?;
    let (model, _) = sgd_train(&init, &poisoned, &cfg.train, &rng.derive("train"), None)?;
    Ok(evaluate(&model, &test, &trigger, attack_goal(cfg))?)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_defend(
    config_path: &Path,
    checkpoint: &Path,
    kind: &str,
    fraction: f64,
    epochs: usize,
    lr: f64,
    frozen_prefix: usize,
    grid_step: f64,
    trigger_json: Option<&Path>,
    trigger_from: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config_path)?;
    let out_dir = cfg.resolve_out_dir(out_dir);
    cfg.write_resolved(&out_dir)?;

    let (train, test) = cfg.load_datasets()?;
    let (model, meta) = load_checkpoint(checkpoint)?;
    let trigger = resolve_trigger(&cfg, trigger_json, trigger_from, test.image_shape())?;
    let ctx = EvalContext {
        test: &test,
        trigger: &trigger,
        goal: attack_goal(&cfg),
    };
    let rng = RngStream::new(cfg.seed);

    let (run, tuned): (DefenseRun, Option<ModelState>) = match kind {
        "fine-tune" => {
            let (tuned, run) = fine_tune(
                &model,
                &train,
                fraction,
                epochs,
                lr,
                frozen_prefix,
                &rng,
                &ctx,
            )?;
            (run, Some(tuned))
        }
        "prune" => {
            if !(grid_step > 0.0 && grid_step < 1.0) {
                return Err(usage(format!("--grid-step {grid_step} outside (0,1)")));
            }
            // calibration on the benign fraction
            let m = ((fraction * train.len() as f64).floor() as usize).max(1);
            let idx: Vec<usize> = (0..m).collect();
            let calib = LabeledDataset::new(
                train.batch(&idx),
                idx.iter().map(|&i| train.label(i)).collect(),
                train.k(),
            )?;
            let mut grid = vec![];
            let mut beta = 0.0;
            while beta < 1.0 - 1e-12 {
                grid.push(beta);
                beta += grid_step;
            }
            (prune_grid(&model, &grid, &calib, &ctx)?, None)
        }
        other => return Err(usage(format!("unknown defense kind `{other}`"))),
    };

    let trace = out_dir.join("defense-trace.csv");
    run.write_csv(&trace)?;
    if let Some(tuned) = tuned {
        let path = out_dir.join("defended-checkpoint.json");
        save_checkpoint(&tuned, meta.seed, &meta.config_digest, &path)?;
        eprintln!("wrote {}", path.display());
    }
    eprintln!("wrote {}", trace.display());
    Ok(())
}

pub fn cmd_oracle(checkpoint: &Path) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    serve_oracle(&model, &mut stdin.lock(), &mut stdout.lock())?;
    Ok(())
}

/// Re-check the embedded config digests of every artifact in a run
/// directory against its resolved config.
pub fn cmd_verify_digests(dir: &Path) -> Result<()> {
    let resolved = dir.join("resolved-config.json");
    let bytes = std::fs::read(&resolved)
        .map_err(|e| usage(format!("reading {}: {e}", resolved.display())))?;
    let cfg: RunConfig = serde_json::from_slice(&bytes).map_err(|e| usage(format!("{e}")))?;
    let expected = cfg.digest()?;

    let mut checked = 0usize;
    let mut bad = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let found = if name.ends_with(".ubw") {
            let (_, digest) = read_container(&path)?;
            Some(digest)
        } else if name == "checkpoint.json" || name == "defended-checkpoint.json" {
            let (_, meta) = load_checkpoint(&path)?;
            Some(meta.config_digest)
        } else if name == "metrics.json" || name == "report.json" {
            let value: serde_json::Value = serde_json::from_slice(&std::fs::read(&path)?)?;
            Some(
                value
                    .get("config_digest")
                    .and_then(|v| v.as_str())
                    .unwrap_or_default()
                    .to_string(),
            )
        } else {
            None
        };
        if let Some(found) = found {
            checked += 1;
            if found != expected {
                bad.push(name);
            }
        }
    }
    if !bad.is_empty() {
        bail!("digest mismatch in {bad:?} (expected {expected})");
    }
    if checked == 0 {
        return Err(usage(format!("no artifacts found in {}", dir.display())));
    }
    println!("{checked} artifacts match digest {expected}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_parser() {
        let (kind, vals) = parse_sweep("gamma=0.01, 0.05,0.1").unwrap();
        assert_eq!(kind, SweepKind::Gamma);
        assert_eq!(vals, vec![0.01, 0.05, 0.1]);
        let (kind, vals) = parse_sweep("lambda=0,1,2").unwrap();
        assert_eq!(kind, SweepKind::Lambda);
        assert_eq!(vals, vec![0.0, 1.0, 2.0]);
        assert!(parse_sweep("gamma=").is_err());
        assert!(parse_sweep("rho=1").is_err());
        assert!(parse_sweep("gamma").is_err());
    }
}
