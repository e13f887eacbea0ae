//! Groundtruth conversion and evaluation metrics.

mod dominance;
mod keyshot;
mod knapsack;
mod kts;
mod prf;
mod rank;

pub use dominance::{dominance, Dominance};
pub use keyshot::{
    frame_spans, keyshots_from_segments, min_max, scores_to_keyshots, segment_video, KeyshotConfig, KeyshotSummary,
};
pub use knapsack::knapsack;
pub use kts::{kts_segment, objective, KtsConfig, Scatter, SegmentSet};
pub use prf::{prf, prf_single, Aggregation, Prf, PrfReport};
pub use rank::{average_ranks, kendall_tau, pearson, spearman_rho, Correlation};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metrics for one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub video_id: String,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub kendall_tau: f64,
    pub spearman_rho: f64,
    pub rank_degenerate: bool,
    pub aggregation: Aggregation,
    pub per_user: Vec<Prf>,
}

impl EvalReport {
    /// Keyshot F-score against every user summary, plus rank correlations of
    /// `frame_scores` against each user's scores averaged over users.
    pub fn compute(
        video_id: &str,
        pred: &[u8],
        user_summaries: &[Vec<u8>],
        frame_scores: Option<&[f64]>,
        user_scores: &[Vec<f64>],
        aggregation: Aggregation,
    ) -> Result<Self> {
        let p = prf(pred, user_summaries, aggregation)?;
        let (mut tau, mut rho, mut degenerate) = (0.0, 0.0, false);
        if let Some(scores) = frame_scores {
            if !user_scores.is_empty() {
                let n = user_scores.len() as f64;
                for u in user_scores {
                    let t = kendall_tau(scores, u)?;
                    let r = spearman_rho(scores, u)?;
                    degenerate |= t.degenerate || r.degenerate;
                    tau += t.value / n;
                    rho += r.value / n;
                }
            }
        }
        Ok(Self {
            video_id: video_id.to_string(),
            precision: p.aggregate.precision,
            recall: p.aggregate.recall,
            f_score: p.aggregate.f_score,
            kendall_tau: tau,
            spearman_rho: rho,
            rank_degenerate: degenerate,
            aggregation,
            per_user: p.per_user,
        })
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let agg = match self.aggregation {
            Aggregation::Max => "max",
            Aggregation::Mean => "mean",
        };
        let mut s = format!(
            "video_id={}\nprecision={:.6}\nrecall={:.6}\nf_score={:.6}\nkendall_tau={:.6}\nspearman_rho={:.6}\nrank_degenerate={}\naggregation={}\n",
            self.video_id, self.precision, self.recall, self.f_score, self.kendall_tau, self.spearman_rho,
            self.rank_degenerate, agg
        );
        for (i, u) in self.per_user.iter().enumerate() {
            s.push_str(&format!(
                "user.{i}.precision={:.6}\nuser.{i}.recall={:.6}\nuser.{i}.f_score={:.6}\n",
                u.precision, u.recall, u.f_score
            ));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(format!("serialise report: {e}")))
    }
}

/// Mean of each metric over videos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub videos: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub kendall_tau: f64,
    pub spearman_rho: f64,
}

impl EvalSummary {
    pub fn from_reports(reports: &[EvalReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            videos: reports.len(),
            precision: mean(|r| r.precision),
            recall: mean(|r| r.recall),
            f_score: mean(|r| r.f_score),
            kendall_tau: mean(|r| r.kendall_tau),
            spearman_rho: mean(|r| r.spearman_rho),
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "videos={}\nprecision={:.6}\nrecall={:.6}\nf_score={:.6}\nkendall_tau={:.6}\nspearman_rho={:.6}\n",
            self.videos, self.precision, self.recall, self.f_score, self.kendall_tau, self.spearman_rho
        )
    }
}
