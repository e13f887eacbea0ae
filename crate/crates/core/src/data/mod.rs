//! Feature containers, groundtruth ingestion, splits and the synthetic generator.

mod container;
mod split;
mod synthetic;

pub use container::{decode, encode, read_features, write_features, MAGIC, VERSION};
pub use split::{Setting, SplitConfig};
pub use synthetic::{generate_synthetic, generate_with_truth, synthetic_dataset, SyntheticSpec, SyntheticTruth, CLASS_NAMES};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{scores_to_keyshots, KeyshotConfig, KeyshotSummary};
use crate::model::{QueryEmbedding, QueryMode};
use crate::tensor::Tensor;

/// One video's sampled frames, detections, query payload and annotations.
///
/// Numeric payloads are kept in their stored `f32` form so that a container
/// round-trips bitwise; [`FeatureSet::objects_tensor`] promotes to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub video_id: String,
    pub t_original: usize,
    /// Original-frame index of each sampled frame.
    pub picks: Vec<usize>,
    pub objects_per_frame: usize,
    pub d_obj: usize,
    /// `T·N·d_obj` values, frame-major.
    pub objects: Vec<f32>,
    /// `T·N` indices into `class_names`.
    pub class_ids: Vec<u16>,
    pub class_names: Vec<String>,
    pub query_mode: QueryMode,
    pub query_rows: usize,
    pub query_dim: usize,
    /// Word mode: one embedding per entry of `class_names`.
    /// Sentence mode: one embedding per caption.
    pub query: Vec<f32>,
    pub gt_binary: Option<Vec<u8>>,
    /// Per-user importance scores, each of length `T`.
    pub gt_scores: Option<Vec<Vec<f32>>>,
    /// Detector confidences, `T·N`, descending within each frame.
    pub confidences: Option<Vec<f32>>,
}

/// Top detected classes of a video.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSelection {
    pub words: Vec<String>,
    pub counts: Vec<usize>,
    /// Fewer distinct classes than requested.
    pub short: bool,
}

/// Which annotation defines the reference summaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtSource {
    /// Binary labels when present, otherwise per-user scores.
    Auto,
    Binary,
    Scores,
}

impl FeatureSet {
    pub fn frames(&self) -> usize {
        self.picks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames();
        let n = self.objects_per_frame;
        if t == 0 {
            return Err(Error::Config("a video needs at least one frame".into()));
        }
        if n == 0 || self.d_obj == 0 {
            return Err(Error::Config("N and d_obj must be >= 1".into()));
        }
        if self.picks.windows(2).any(|w| w[0] >= w[1]) || self.picks[t - 1] >= self.t_original {
            return Err(Error::Config(format!(
                "picks must be strictly increasing and below T_original={}",
                self.t_original
            )));
        }
        if self.objects.len() != t * n * self.d_obj {
            return Err(Error::dim("objects", &[self.objects.len()], &[t, n, self.d_obj]));
        }
        if self.class_ids.len() != t * n {
            return Err(Error::dim("class_ids", &[self.class_ids.len()], &[t, n]));
        }
        if let Some(bad) = self.class_ids.iter().find(|&&c| c as usize >= self.class_names.len()) {
            return Err(Error::Config(format!(
                "class id {bad} outside a table of {}",
                self.class_names.len()
            )));
        }
        if self.query.len() != self.query_rows * self.query_dim {
            return Err(Error::dim("query", &[self.query.len()], &[self.query_rows, self.query_dim]));
        }
        match self.query_mode {
            QueryMode::None if self.query_rows != 0 => {
                return Err(Error::Config("query mode none carries no query rows".into()))
            }
            QueryMode::Word if self.query_rows != self.class_names.len() => {
                return Err(Error::Config(format!(
                    "word queries need one row per class ({}), got {}",
                    self.class_names.len(),
                    self.query_rows
                )))
            }
            _ => {}
        }
        if let Some(g) = &self.gt_binary {
            if g.len() != t || g.iter().any(|&v| v > 1) {
                return Err(Error::Config(format!("gt_binary must be {t} values in {{0,1}}")));
            }
        }
        if let Some(users) = &self.gt_scores {
            if users.iter().any(|u| u.len() != t) {
                return Err(Error::Config(format!("every user score vector must have {t} entries")));
            }
        }
        if let Some(c) = &self.confidences {
            if c.len() != t * n {
                return Err(Error::dim("confidences", &[c.len()], &[t, n]));
            }
            if c.chunks(n).any(|f| f.windows(2).any(|w| w[0] < w[1])) {
                return Err(Error::Config("objects must be sorted by descending confidence".into()));
            }
        }
        Ok(())
    }

    /// `[T×N×d_obj]` in `f64`.
    pub fn objects_tensor(&self) -> Tensor {
        let data = self.objects.iter().map(|&v| v as f64).collect();
        Tensor::new(&[self.frames(), self.objects_per_frame, self.d_obj], data).expect("validated shape")
    }

    /// Per-frame mean object feature, `[T×d_obj]`.
    pub fn frame_features(&self) -> Tensor {
        crate::losses::frame_means(&self.objects_tensor()).expect("rank-3 objects")
    }

    /// Query rows as a `[rows×query_dim]` tensor, if any.
    pub fn query_tensor(&self) -> Option<Tensor> {
        (self.query_rows > 0).then(|| {
            Tensor::new(
                &[self.query_rows, self.query_dim],
                self.query.iter().map(|&v| v as f64).collect(),
            )
            .expect("validated shape")
        })
    }

    /// Average user score per frame.
    pub fn mean_user_scores(&self) -> Option<Vec<f64>> {
        let users = self.gt_scores.as_ref().filter(|u| !u.is_empty())?;
        let k = users.len() as f64;
        Some(
            (0..self.frames())
                .map(|t| users.iter().map(|u| u[t] as f64).sum::<f64>() / k)
                .collect(),
        )
    }

    /// Keeps the sampled frames at `indices` (strictly increasing).
    pub fn select_frames(&self, indices: &[usize]) -> Result<FeatureSet> {
        let t = self.frames();
        if indices.is_empty() || indices.windows(2).any(|w| w[0] >= w[1]) || indices[indices.len() - 1] >= t {
            return Err(Error::Config(format!("frame selection must be increasing indices below {t}")));
        }
        let n = self.objects_per_frame;
        let row = n * self.d_obj;
        let pick_rows = |v: &[f32], w: usize| indices.iter().flat_map(|&i| v[i * w..(i + 1) * w].iter().copied()).collect();
        Ok(FeatureSet {
            picks: indices.iter().map(|&i| self.picks[i]).collect(),
            objects: pick_rows(&self.objects, row),
            class_ids: indices.iter().flat_map(|&i| self.class_ids[i * n..(i + 1) * n].iter().copied()).collect(),
            gt_binary: self.gt_binary.as_ref().map(|g| indices.iter().map(|&i| g[i]).collect()),
            gt_scores: self
                .gt_scores
                .as_ref()
                .map(|us| us.iter().map(|u| indices.iter().map(|&i| u[i]).collect()).collect()),
            confidences: self.confidences.as_ref().map(|c| pick_rows(c, n)),
            ..self.clone()
        })
    }

    /// Uniformly samples at most `max_frames` frames.
    pub fn clip(&self, max_frames: usize) -> Result<FeatureSet> {
        let t = self.frames();
        if max_frames == 0 {
            return Err(Error::Config("clip length must be >= 1".into()));
        }
        if t <= max_frames {
            return Ok(self.clone());
        }
        let idx: Vec<usize> = (0..max_frames).map(|i| i * t / max_frames).collect();
        self.select_frames(&idx)
    }

    /// Top-`w` classes by detection count, ties broken alphabetically.
    pub fn select_word_queries(&self, w: usize) -> WordSelection {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for &c in &self.class_ids {
            *counts.entry(self.class_names[c as usize].as_str()).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let short = ranked.len() < w;
        ranked.truncate(w);
        WordSelection {
            words: ranked.iter().map(|r| r.0.to_string()).collect(),
            counts: ranked.iter().map(|r| r.1).collect(),
            short,
        }
    }

    /// The query the model consumes: detected top-`words` classes (or
    /// `override_words`) in word mode, the stored captions in sentence mode.
    ///
    /// Unknown override words produce a warning and the null query.
    pub fn query_embedding(&self, words: usize, override_words: Option<&[String]>) -> (QueryEmbedding, Vec<String>) {
        let mut warnings = Vec::new();
        let Some(table) = self.query_tensor() else {
            return (QueryEmbedding::none(), warnings);
        };
        match self.query_mode {
            QueryMode::None => (QueryEmbedding::none(), warnings),
            QueryMode::Sentence => (QueryEmbedding::new(QueryMode::Sentence, table), warnings),
            QueryMode::Word => {
                let chosen = match override_words {
                    Some(w) => w.to_vec(),
                    None => {
                        let sel = self.select_word_queries(words);
                        if sel.short {
                            warnings.push(format!(
                                "{}: only {} distinct classes for {} query words",
                                self.video_id,
                                sel.words.len(),
                                words
                            ));
                        }
                        sel.words
                    }
                };
                let mut rows = Vec::with_capacity(chosen.len());
                for w in &chosen {
                    match self.class_names.iter().position(|c| c == w) {
                        Some(i) => rows.push(table.row(i).to_vec()),
                        None => {
                            warnings.push(format!("{}: unknown query word '{w}', using the null query", self.video_id));
                            return (QueryEmbedding::none(), warnings);
                        }
                    }
                }
                if rows.is_empty() {
                    return (QueryEmbedding::none(), warnings);
                }
                (QueryEmbedding::new(QueryMode::Word, Tensor::from_rows(&rows)), warnings)
            }
        }
    }

    /// Keyshot summary of per-frame `scores` over this video's segmentation.
    pub fn keyshots(&self, scores: &[f64], cfg: &KeyshotConfig) -> Result<KeyshotSummary> {
        scores_to_keyshots(scores, &self.frame_features(), &self.picks, self.t_original, cfg)
    }

    /// Sampled-frame labels expanded to the original frames they cover; each
    /// maximal run of labelled frames is one shot.
    pub fn label_shots(&self, labels: &[u8], budget_ratio: f64) -> Result<KeyshotSummary> {
        if labels.len() != self.frames() {
            return Err(Error::dim("label_shots", &[labels.len()], &[self.frames()]));
        }
        let spans = crate::eval::frame_spans(&self.picks, self.t_original)?;
        let mut binary = vec![0u8; self.t_original];
        let mut segments: Vec<(usize, usize)> = Vec::new();
        for (t, &l) in labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let (a, b) = spans[t];
            binary[a..b].iter_mut().for_each(|v| *v = 1);
            match segments.last_mut() {
                Some(last) if t > 0 && labels[t - 1] != 0 => last.1 = b,
                _ => segments.push((a, b)),
            }
        }
        Ok(KeyshotSummary {
            binary,
            selected_segments: (0..segments.len()).collect(),
            segments,
            budget_ratio,
        })
    }

    /// Reference summaries, one per user (or one from the binary labels).
    pub fn gt_summaries(&self, source: GtSource, cfg: &KeyshotConfig) -> Result<Vec<KeyshotSummary>> {
        let use_binary = match source {
            GtSource::Binary => true,
            GtSource::Scores => false,
            GtSource::Auto => self.gt_binary.is_some(),
        };
        if use_binary {
            let g = self
                .gt_binary
                .as_ref()
                .ok_or_else(|| Error::Config(format!("{} has no binary labels", self.video_id)))?;
            Ok(vec![self.label_shots(g, cfg.budget_ratio)?])
        } else {
            let users = self
                .gt_scores
                .as_ref()
                .filter(|u| !u.is_empty())
                .ok_or_else(|| Error::Config(format!("{} has no user scores", self.video_id)))?;
            users
                .iter()
                .map(|u| self.keyshots(&u.iter().map(|&v| v as f64).collect::<Vec<_>>(), cfg))
                .collect()
        }
    }
}

/// Single training keyframe set from several users: average the scores,
/// convert to keyshots and label the sampled frames inside selected shots.
pub fn make_training_keyframes(
    user_scores: &[Vec<f64>],
    features: &Tensor,
    picks: &[usize],
    t_original: usize,
    cfg: &KeyshotConfig,
) -> Result<Vec<u8>> {
    let Some(first) = user_scores.first() else {
        return Err(Error::Config("at least one user score vector is required".into()));
    };
    if user_scores.iter().any(|u| u.len() != first.len()) {
        return Err(Error::Config("user score vectors differ in length".into()));
    }
    let k = user_scores.len() as f64;
    let mean: Vec<f64> = (0..first.len())
        .map(|t| user_scores.iter().map(|u| u[t]).sum::<f64>() / k)
        .collect();
    let ks = scores_to_keyshots(&mean, features, picks, t_original, cfg)?;
    Ok(picks.iter().map(|&p| ks.binary[p]).collect())
}
