//! Entropy-based dispersibility metrics over prediction tables.
//!
//! Three quantities measure how spread-out a model's predictions are:
//! `d_p` over hard predictions grouped by ground-truth class, `d_s` over
//! per-sample probability vectors, and `d_c` over per-class mean probability
//! vectors. All use the natural logarithm, so every metric lies in
//! `[0, ln K]`. The strict inequality `D_c > D_s / N` holds for every table
//! with `N >= 2` rows; [`lemma1_witness`] makes it executable.

use std::path::Path;

use crate::error::{Error, Result};

/// Ground-truth labels paired with model predictions, hard or soft.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    k: usize,
    /// 1-based ground-truth labels, length N.
    labels: Vec<u32>,
    predictions: Predictions,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    /// 1-based predicted labels.
    Hard(Vec<u32>),
    /// One probability row of length K per sample.
    Soft(Vec<Vec<f64>>),
}

impl PredictionTable {
    pub fn hard(labels: Vec<u32>, predicted: Vec<u32>, k: usize) -> Result<Self> {
        if labels.len() != predicted.len() || labels.is_empty() {
            return Err(Error::InvalidParameter {
                name: "predictions",
                why: format!(
                    "{} labels vs {} predictions",
                    labels.len(),
                    predicted.len()
                ),
            });
        }
        for &y in labels.iter().chain(&predicted) {
            if y == 0 || y as usize > k {
                return Err(Error::LabelOutOfRange { label: y, k });
            }
        }
        Ok(PredictionTable {
            k,
            labels,
            predictions: Predictions::Hard(predicted),
        })
    }

    pub fn soft(labels: Vec<u32>, rows: Vec<Vec<f64>>, k: usize) -> Result<Self> {
        if labels.len() != rows.len() || labels.is_empty() {
            return Err(Error::InvalidParameter {
                name: "predictions",
                why: format!("{} labels vs {} rows", labels.len(), rows.len()),
            });
        }
        for &y in &labels {
            if y == 0 || y as usize > k {
                return Err(Error::LabelOutOfRange { label: y, k });
            }
        }
        for row in &rows {
            if row.len() != k {
                return Err(Error::BadProbability(format!(
                    "row length {} != K={k}",
                    row.len()
                )));
            }
            validate_probability(row)?;
        }
        Ok(PredictionTable {
            k,
            labels,
            predictions: Predictions::Soft(rows),
        })
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

    pub fn predictions(&self) -> &Predictions {
        &self.predictions
    }

    /// Parse a prediction dump: `y,pred` rows or `y,p1,...,pK` rows.
    pub fn from_csv(path: &Path, k: usize) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_path(path)
            .map_err(Error::from)?;
        let mut labels = Vec::new();
        let mut hard: Vec<u32> = Vec::new();
        let mut soft: Vec<Vec<f64>> = Vec::new();
        for record in reader.records() {
            let record = record?;
            let fields: Vec<&str> = record.iter().collect();
            let parse = |s: &str, what: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|e| Error::BadProbability(format!(
                    "{what} `{s}`: {e}"
                )))
            };
            match fields.len() {
                2 => {
                    labels.push(parse(fields[0], "label")? as u32);
                    hard.push(parse(fields[1], "prediction")? as u32);
                }
                n if n == k + 1 => {
                    labels.push(parse(fields[0], "label")? as u32);
                    let mut row = Vec::with_capacity(k);
                    for f in &fields[1..] {
                        row.push(parse(f, "probability")?);
                    }
                    soft.push(row);
                }
                n => {
                    return Err(Error::BadProbability(format!(
                        "row with {n} fields; expected 2 (hard) or {} (soft)",
                        k + 1
                    )))
                }
            }
        }
        match (hard.is_empty(), soft.is_empty()) {
            (false, true) => PredictionTable::hard(labels, hard, k),
            (true, false) => PredictionTable::soft(labels, soft, k),
            _ => Err(Error::BadProbability(
                "mixed or empty prediction dump".into(),
            )),
        }
    }
}

fn validate_probability(p: &[f64]) -> Result<()> {
    if let Some(v) = p.iter().find(|v| **v < 0.0) {
        return Err(Error::BadProbability(format!("negative component {v}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::BadProbability(format!("sum {sum} off by > 1e-6")));
    }
    Ok(())
}

/// Shannon entropy in nats, with `0 * ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    validate_probability(p)?;
    Ok(p.iter()
        .filter(|v| **v > 0.0)
        .map(|v| -v * v.ln())
        .sum())
}

/// Averaged prediction dispersibility over hard predictions: the entropy of
/// the empirical predicted-label distribution within each ground-truth
/// class, weighted by class frequency.
pub fn d_p(table: &PredictionTable) -> Result<f64> {
    let Predictions::Hard(preds) = &table.predictions else {
        return Err(Error::InvalidParameter {
            name: "table",
            why: "d_p needs hard predictions".into(),
        });
    };
    let n = table.len() as f64;
    let k = table.k;
    let mut total = 0.0;
    for class in 1..=k as u32 {
        let mut counts = vec![0.0f64; k];
        let mut nj = 0.0;
        for (&y, &c) in table.labels.iter().zip(preds) {
            if y == class {
                counts[(c - 1) as usize] += 1.0;
                nj += 1.0;
            }
        }
        if nj == 0.0 {
            continue; // empty classes carry zero indicator weight
        }
        for c in counts.iter_mut() {
            *c /= nj;
        }
        total += nj / n * entropy(&counts)?;
    }
    Ok(total)
}

/// Averaged sample-wise dispersibility: mean entropy of the per-sample
/// probability rows.
pub fn d_s(table: &PredictionTable) -> Result<f64> {
    let Predictions::Soft(rows) = &table.predictions else {
        return Err(Error::InvalidParameter {
            name: "table",
            why: "d_s needs probability rows".into(),
        });
    };
    let n = rows.len() as f64;
    let mut total = 0.0;
    for row in rows {
        total += entropy(row)?;
    }
    Ok(total / n)
}

/// Averaged class-wise dispersibility: entropy of the mean probability row
/// within each ground-truth class, weighted by class count.
pub fn d_c(table: &PredictionTable) -> Result<f64> {
    let Predictions::Soft(rows) = &table.predictions else {
        return Err(Error::InvalidParameter {
            name: "table",
            why: "d_c needs probability rows".into(),
        });
    };
    let n = table.len() as f64;
    let k = table.k;
    let mut total = 0.0;
    for class in 1..=k as u32 {
        let mut mean = vec![0.0f64; k];
        let mut nj = 0.0;
        for (&y, row) in table.labels.iter().zip(rows) {
            if y == class {
                for (m, p) in mean.iter_mut().zip(row) {
                    *m += p;
                }
                nj += 1.0;
            }
        }
        if nj == 0.0 {
            continue;
        }
        for m in mean.iter_mut() {
            *m /= nj;
        }
        total += nj / n * entropy(&mean)?;
    }
    Ok(total)
}

/// Executable witness of the class-wise/sample-wise inequality: returns
/// `(D_c, D_s / N, D_c > D_s / N)`. Requires `N >= 2` (equality can occur
/// at `N = 1`).
pub fn lemma1_witness(table: &PredictionTable) -> Result<(f64, f64, bool)> {
    if table.len() < 2 {
        return Err(Error::InvalidParameter {
            name: "table",
            why: "lemma witness needs N >= 2".into(),
        });
    }
    let dc = d_c(table)?;
    let ds_over_n = d_s(table)? / table.len() as f64;
    Ok((dc, ds_over_n, dc > ds_over_n))
}
