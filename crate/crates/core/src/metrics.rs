//! Dice and Jaccard overlap coefficients and their aggregation over folds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskops::{Attribute, BinaryMask};

fn overlap_counts(pred: &BinaryMask, target: &BinaryMask) -> Result<(usize, usize, usize)> {
    if pred.dims() != target.dims() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let (mut inter, mut a, mut b) = (0, 0, 0);
    for (&p, &t) in pred.bits().iter().zip(target.bits()) {
        inter += (p & t) as usize;
        a += p as usize;
        b += t as usize;
    }
    Ok((inter, a, b))
}

/// `2|A n B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(pred: &BinaryMask, target: &BinaryMask) -> Result<f64> {
    let (inter, a, b) = overlap_counts(pred, target)?;
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    })
}

/// `|A n B| / |A u B|`; two empty masks score 1.
pub fn jaccard(pred: &BinaryMask, target: &BinaryMask) -> Result<f64> {
    let (inter, a, b) = overlap_counts(pred, target)?;
    let union = a + b - inter;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Dice and Jaccard of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub dice: f64,
    pub jaccard: f64,
}

impl Score {
    pub fn of(pred: &BinaryMask, target: &BinaryMask) -> Result<Self> {
        Ok(Self {
            dice: dice(pred, target)?,
            jaccard: jaccard(pred, target)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("cannot summarize an empty group".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeSummary {
    pub jaccard: MeanStd,
    pub dice: MeanStd,
}

/// Per-attribute fold statistics plus the unweighted average over attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub rows: BTreeMap<Attribute, AttributeSummary>,
    pub average: AttributeSummary,
}

/// Per-sample scores keyed by attribute, then fold.
pub type ScoreTable = BTreeMap<Attribute, BTreeMap<usize, Vec<Score>>>;

/// Averages samples within each fold, then reports the across-fold mean and
/// population standard deviation per attribute. The "Average" row is the
/// unweighted mean of the attribute rows (means and standard deviations alike).
pub fn summarize(scores: &ScoreTable) -> Result<MetricSummary> {
    if scores.is_empty() {
        return Err(Error::Data("no attributes to summarize".into()));
    }
    let mut rows = BTreeMap::new();
    for (&attr, folds) in scores {
        if folds.is_empty() {
            return Err(Error::Data(format!("attribute {attr} has no folds")));
        }
        let mut dice_means = Vec::with_capacity(folds.len());
        let mut jac_means = Vec::with_capacity(folds.len());
        for (fold, samples) in folds {
            if samples.is_empty() {
                return Err(Error::Data(format!("attribute {attr}, fold {fold} is empty")));
            }
            let n = samples.len() as f64;
            dice_means.push(samples.iter().map(|s| s.dice).sum::<f64>() / n);
            jac_means.push(samples.iter().map(|s| s.jaccard).sum::<f64>() / n);
        }
        rows.insert(
            attr,
            AttributeSummary {
                jaccard: MeanStd::of(&jac_means)?,
                dice: MeanStd::of(&dice_means)?,
            },
        );
    }
    let avg = |f: fn(&AttributeSummary) -> f64| rows.values().map(f).sum::<f64>() / rows.len() as f64;
    let average = AttributeSummary {
        jaccard: MeanStd {
            mean: avg(|r| r.jaccard.mean),
            std: avg(|r| r.jaccard.std),
        },
        dice: MeanStd {
            mean: avg(|r| r.dice.mean),
            std: avg(|r| r.dice.std),
        },
    };
    Ok(MetricSummary { rows, average })
}

impl MetricSummary {
    /// CSV with header `attribute,jaccard_mean,jaccard_std,dice_mean,dice_std`,
    /// one row per attribute then `Average`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(["attribute", "jaccard_mean", "jaccard_std", "dice_mean", "dice_std"])
            .map_err(csv_err)?;
        let rows = self
            .rows
            .iter()
            .map(|(a, r)| (a.code().to_string(), r))
            .chain(std::iter::once(("Average".to_string(), &self.average)));
        for (name, r) in rows {
            w.write_record([
                name,
                format!("{:.6}", r.jaccard.mean),
                format!("{:.6}", r.jaccard.std),
                format!("{:.6}", r.dice.mean),
                format!("{:.6}", r.dice.std),
            ])
            .map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_csv()?)
    }
}
