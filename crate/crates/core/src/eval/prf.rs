//! Overlap precision, recall and F-score between binary summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Max,
    Mean,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Aggregation::Max),
            "mean" => Ok(Aggregation::Mean),
            other => Err(Error::Config(format!("unknown aggregation '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

impl Prf {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f_score = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f_score,
        }
    }
}

/// P, R and F of one prediction against one reference.
pub fn prf_single(pred: &[u8], gt: &[u8]) -> Result<Prf> {
    if pred.len() != gt.len() {
        return Err(Error::dim("prf", &[pred.len()], &[gt.len()]));
    }
    let overlap = pred.iter().zip(gt).filter(|(a, b)| **a != 0 && **b != 0).count() as f64;
    let np = pred.iter().filter(|&&a| a != 0).count() as f64;
    let ng = gt.iter().filter(|&&b| b != 0).count() as f64;
    let p = if np > 0.0 { overlap / np } else { 0.0 };
    let r = if ng > 0.0 { overlap / ng } else { 0.0 };
    Ok(Prf::from_pr(p, r))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrfReport {
    pub aggregate: Prf,
    pub per_user: Vec<Prf>,
    pub aggregation: Aggregation,
}

/// Scores against every reference summary, aggregated by the best user (max)
/// or by averaging P, R and F over users (mean).
pub fn prf(pred: &[u8], gts: &[Vec<u8>], aggregation: Aggregation) -> Result<PrfReport> {
    if gts.is_empty() {
        return Err(Error::Config("at least one reference summary is required".into()));
    }
    let per_user = gts.iter().map(|g| prf_single(pred, g)).collect::<Result<Vec<_>>>()?;
    let aggregate = match aggregation {
        Aggregation::Max => *per_user
            .iter()
            .reduce(|best, x| if x.f_score > best.f_score { x } else { best })
            .unwrap(),
        Aggregation::Mean => {
            let n = per_user.len() as f64;
            Prf {
                precision: per_user.iter().map(|x| x.precision).sum::<f64>() / n,
                recall: per_user.iter().map(|x| x.recall).sum::<f64>() / n,
                f_score: per_user.iter().map(|x| x.f_score).sum::<f64>() / n,
            }
        }
    };
    Ok(PrfReport {
        aggregate,
        per_user,
        aggregation,
    })
}
