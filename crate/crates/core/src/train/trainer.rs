//! Mini-batch training with per-video graphs.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, clip_grad_norm, lr_at, AdamConfig, AdamState};
use super::checkpoint::{Checkpoint, RngState};
use crate::autodiff::Tape;
use crate::data::{make_training_keyframes, FeatureSet, GtSource};
use crate::error::{Error, Result};
use crate::eval::{Aggregation, EvalReport, KeyshotConfig};
use crate::losses::{model_loss, DiversityNorm, LossMode, LossReport, LossWeights, Targets};
use crate::model::{forward, predict, ModelConfig, ModelParams, QueryEmbedding, QueryMode};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Videos per optimizer step; gradients are averaged over the batch.
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Longer videos are uniformly subsampled to this many frames.
    pub clip_frames: usize,
    pub mode: LossMode,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub rho: Option<f64>,
    pub diversity_norm: DiversityNorm,
    pub keyshot: KeyshotConfig,
    pub aggregation: Aggregation,
    pub gt_source: GtSource,
    /// Worker threads for per-video passes; `None` reads `VIDEOGRAPH_THREADS`.
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 5,
            lr: 1e-4,
            lr_decay: 0.1,
            lr_decay_every: 80,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            clip_frames: 320,
            mode: LossMode::SupBin,
            grad_clip: 5.0,
            alpha: None,
            beta: None,
            gamma: None,
            rho: None,
            diversity_norm: DiversityNorm::Squared,
            keyshot: KeyshotConfig::default(),
            aggregation: Aggregation::Max,
            gt_source: GtSource::Auto,
            threads: None,
        }
    }
}

impl TrainConfig {
    /// Schedule used for small synthetic runs on one CPU core.
    pub fn desk() -> Self {
        Self {
            epochs: 100,
            lr: 5e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.clip_frames == 0 {
            return Err(Error::Config("batch_size and clip_frames must be >= 1".into()));
        }
        self.weights().validate()
    }

    pub fn weights(&self) -> LossWeights {
        let base = LossWeights::for_mode(self.mode);
        LossWeights {
            alpha: self.alpha.unwrap_or(base.alpha),
            beta: self.beta.unwrap_or(base.beta),
            gamma: self.gamma.unwrap_or(base.gamma),
            rho: self.rho.unwrap_or(base.rho),
            diversity_norm: self.diversity_norm,
            ..base
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Training and validation videos.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<FeatureSet>,
    pub val: Vec<FeatureSet>,
}

/// A clip ready for the model.
#[derive(Clone, Debug)]
pub struct PreparedVideo {
    pub video_id: String,
    pub objects: Tensor,
    pub query: QueryEmbedding,
    pub labels: Option<Vec<u8>>,
    pub scores: Option<Vec<f64>>,
}

impl PreparedVideo {
    pub fn targets(&self) -> Targets<'_> {
        Targets {
            labels: self.labels.as_deref(),
            scores: self.scores.as_deref(),
        }
    }
}

/// Checks a video against the model and extracts the supervision `mode` needs.
pub fn prepare_video(fs: &FeatureSet, cfg: &ModelConfig, tc: &TrainConfig) -> Result<PreparedVideo> {
    let ctx = |e: Error| e.context(fs.video_id.clone());
    if fs.d_obj != cfg.d_obj {
        return Err(ctx(Error::Config(format!(
            "feature width {} does not match model d_obj {}",
            fs.d_obj, cfg.d_obj
        ))));
    }
    if fs.query_mode != QueryMode::None && cfg.query_mode != QueryMode::None {
        if fs.query_mode != cfg.query_mode || fs.query_dim != cfg.query_dim {
            return Err(ctx(Error::Config(format!(
                "query {:?}×{} does not match model {:?}×{}",
                fs.query_mode, fs.query_dim, cfg.query_mode, cfg.query_dim
            ))));
        }
    }
    let clip = fs.clip(tc.clip_frames).map_err(ctx)?;
    let (query, warnings) = if cfg.query_mode == QueryMode::None {
        (QueryEmbedding::none(), Vec::new())
    } else {
        clip.query_embedding(cfg.words, None)
    };
    for w in warnings {
        log::warn!("{w}");
    }
    let scores = clip.mean_user_scores();
    let labels = match (&clip.gt_binary, &scores) {
        (Some(b), _) => Some(b.clone()),
        (None, Some(s)) if tc.mode == LossMode::SupBin => Some(
            make_training_keyframes(
                std::slice::from_ref(s),
                &clip.frame_features(),
                &clip.picks,
                clip.t_original,
                &tc.keyshot,
            )
            .map_err(ctx)?,
        ),
        _ => None,
    };
    match tc.mode {
        LossMode::SupBin if labels.is_none() => {
            return Err(ctx(Error::Config("sup-bin training needs binary labels or user scores".into())))
        }
        LossMode::SupScore if scores.is_none() => {
            return Err(ctx(Error::Config("sup-score training needs user scores".into())))
        }
        _ => {}
    }
    Ok(PreparedVideo {
        video_id: fs.video_id.clone(),
        objects: clip.objects_tensor(),
        query,
        labels,
        scores,
    })
}

/// A clip zero-padded to a fixed length with its validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedClip {
    pub objects: Tensor,
    pub mask: Vec<bool>,
}

impl PaddedClip {
    pub fn pad(objects: &Tensor, frames: usize) -> Result<Self> {
        let (t, n, d) = objects.dims3()?;
        if frames < t {
            return Err(Error::Config(format!("cannot pad {t} frames down to {frames}")));
        }
        let mut data = objects.data().to_vec();
        data.resize(frames * n * d, 0.0);
        let mut mask = vec![true; t];
        mask.resize(frames, false);
        Ok(Self {
            objects: Tensor::new(&[frames, n, d], data)?,
            mask,
        })
    }

    /// The valid frames only. Each video is its own graph, so dropping padded
    /// frames removes them from every softmax, adjacency and loss term.
    pub fn compact(&self) -> Result<Tensor> {
        let (_, n, d) = self.objects.dims3()?;
        let row = n * d;
        let data: Vec<f64> = self
            .mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .flat_map(|(t, _)| self.objects.data()[t * row..(t + 1) * row].iter().copied())
            .collect();
        Tensor::new(&[data.len() / row, n, d], data)
    }
}

/// Loss report and parameter gradients for one video.
pub fn video_gradients(
    p: &ModelParams,
    cfg: &ModelConfig,
    w: &LossWeights,
    v: &PreparedVideo,
) -> Result<(LossReport, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, p, cfg, &v.objects, &v.query)?;
    let lv = model_loss(&mut tape, p, cfg, w, &out, &v.objects, v.targets())?;
    let report = lv.report(&tape, w)?;
    let grads = tape.backward(lv.total)?;
    Ok((report, grads.param_grads(&tape, &p.store)))
}

/// Loss report without gradients.
pub fn video_loss(p: &ModelParams, cfg: &ModelConfig, w: &LossWeights, v: &PreparedVideo) -> Result<LossReport> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, p, cfg, &v.objects, &v.query)?;
    model_loss(&mut tape, p, cfg, w, &out, &v.objects, v.targets())?.report(&tape, w)
}

/// Predicts a full video, converts to keyshots and scores them against the
/// reference summaries.
pub fn evaluate_video(
    p: &ModelParams,
    cfg: &ModelConfig,
    fs: &FeatureSet,
    keyshot: &KeyshotConfig,
    aggregation: Aggregation,
    gt_source: GtSource,
) -> Result<EvalReport> {
    let (query, _) = if cfg.query_mode == QueryMode::None {
        (QueryEmbedding::none(), Vec::new())
    } else {
        fs.query_embedding(cfg.words, None)
    };
    let (scores, _) = predict(p, cfg, &fs.objects_tensor(), &query)?;
    let kp = scores.keyframe_probs();
    let pred = fs.keyshots(&kp, keyshot)?;
    let gts = fs.gt_summaries(gt_source, keyshot)?;
    let user_bins: Vec<Vec<u8>> = gts.into_iter().map(|g| g.binary).collect();
    let user_scores: Vec<Vec<f64>> = fs
        .gt_scores
        .as_ref()
        .map(|us| us.iter().map(|u| u.iter().map(|&v| v as f64).collect()).collect())
        .unwrap_or_default();
    EvalReport::compute(&fs.video_id, &pred.binary, &user_bins, Some(&kp), &user_scores, aggregation)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Component means over the epoch's training videos.
    pub train: LossReport,
    pub grad_norm: f64,
    pub rejected_steps: usize,
    pub val_f_score: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

fn thread_pool(tc: &TrainConfig) -> Result<rayon::ThreadPool> {
    let env = std::env::var("VIDEOGRAPH_THREADS").ok().and_then(|s| s.parse::<usize>().ok());
    let n = tc.threads.or(env).unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mut components: BTreeMap<String, f64> = BTreeMap::new();
    for r in reports {
        for (k, v) in &r.components {
            *components.entry(k.clone()).or_default() += v / n;
        }
    }
    LossReport {
        total: reports.iter().map(|r| r.total).sum::<f64>() / n,
        components,
    }
}

/// Runs `tc.epochs` epochs from fresh parameters, or continues `resume`.
///
/// The best checkpoint maximises validation F-score in supervised modes and
/// minimises validation loss in unsupervised mode; without validation videos
/// it is the last one.
pub fn train(data: &Dataset, cfg: &ModelConfig, tc: &TrainConfig, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    tc.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("no training videos".into()));
    }
    let w = tc.weights();
    let adam_cfg = tc.adam();
    let train_set = data
        .train
        .iter()
        .map(|fs| prepare_video(fs, cfg, tc))
        .collect::<Result<Vec<_>>>()?;
    let val_set = data
        .val
        .iter()
        .map(|fs| prepare_video(fs, cfg, tc))
        .collect::<Result<Vec<_>>>()?;
    let pool = thread_pool(tc)?;

    let (mut p, mut adam, mut rng, start) = match resume {
        Some(c) => {
            if c.model_config != *cfg {
                return Err(Error::Config("checkpoint was trained with a different model config".into()));
            }
            (c.model_params()?, c.adam.clone(), c.rng.restore(), c.epoch)
        }
        None => {
            let p = ModelParams::init(cfg, tc.seed)?;
            let adam = AdamState::new(&p.store);
            (p, adam, ChaCha8Rng::seed_from_u64(tc.seed), 0)
        }
    };
    let snapshot = |p: &ModelParams, adam: &AdamState, rng: &ChaCha8Rng, epoch: usize| Checkpoint {
        model_config: cfg.clone(),
        epoch,
        params: p.store.clone(),
        adam: adam.clone(),
        rng: RngState::capture(rng),
    };

    let mut history = Vec::with_capacity(tc.epochs.saturating_sub(start));
    let mut best = snapshot(&p, &adam, &rng, start);
    let mut best_epoch = start;
    let mut best_metric: Option<f64> = None;
    for epoch in start..tc.epochs {
        let lr = lr_at(tc.lr, tc.lr_decay, tc.lr_decay_every, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut reports = Vec::with_capacity(order.len());
        let mut norms = Vec::new();
        let mut rejected = 0;
        for batch in order.chunks(tc.batch_size) {
            let results: Vec<Result<(LossReport, Vec<Tensor>)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| video_gradients(&p, cfg, &w, &train_set[i]).map_err(|e| e.context(train_set[i].video_id.clone())))
                    .collect()
            });
            let mut sum: Option<Vec<Tensor>> = None;
            for r in results {
                let (report, grads) = r?;
                reports.push(report);
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = sum.expect("non-empty batch");
            grads.iter_mut().for_each(|g| g.scale_assign(1.0 / batch.len() as f64));
            norms.push(clip_grad_norm(&mut grads, tc.grad_clip));
            match adam_step(&mut p.store, &grads, &mut adam, &adam_cfg, lr) {
                Ok(()) => {}
                Err(e @ Error::Domain { .. }) => {
                    log::warn!("epoch {epoch}: step rejected: {e}");
                    rejected += 1;
                }
                Err(e) => return Err(e),
            }
        }

        let (mut val_f, mut val_loss) = (None, None);
        if !data.val.is_empty() {
            if tc.mode.is_supervised() {
                let fs: Vec<f64> = pool.install(|| {
                    data.val
                        .par_iter()
                        .map(|v| evaluate_video(&p, cfg, v, &tc.keyshot, tc.aggregation, tc.gt_source).map(|r| r.f_score))
                        .collect::<Result<Vec<_>>>()
                })?;
                val_f = Some(fs.iter().sum::<f64>() / fs.len() as f64);
            } else {
                let ls: Vec<f64> = pool.install(|| {
                    val_set
                        .par_iter()
                        .map(|v| video_loss(&p, cfg, &w, v).map(|r| r.total))
                        .collect::<Result<Vec<_>>>()
                })?;
                val_loss = Some(ls.iter().sum::<f64>() / ls.len() as f64);
            }
        }
        let record = EpochRecord {
            epoch,
            lr,
            train: mean_report(&reports),
            grad_norm: norms.iter().sum::<f64>() / norms.len().max(1) as f64,
            rejected_steps: rejected,
            val_f_score: val_f,
            val_loss,
        };
        log::info!(
            "epoch {epoch} lr {lr:.2e} loss {:.6} val_f {:?} val_loss {:?}",
            record.train.total,
            record.val_f_score,
            record.val_loss
        );
        history.push(record);

        let metric = val_f.or(val_loss.map(|l| -l));
        let improved = match (metric, best_metric) {
            (Some(m), Some(b)) => m > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best_metric = metric;
            best_epoch = epoch + 1;
            best = snapshot(&p, &adam, &rng, epoch + 1);
        }
    }
    Ok(TrainOutcome {
        last: snapshot(&p, &adam, &rng, tc.epochs.max(start)),
        best,
        best_epoch,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny_data(videos: usize, mode: QueryMode) -> (Dataset, ModelConfig) {
        let spec = SyntheticSpec {
            frames: 12,
            objects: 3,
            d_obj: 6,
            n_events: 2,
            query_mode: mode,
            query_dim: 4,
            ..SyntheticSpec::default()
        };
        let train = (0..videos as u64)
            .map(|i| {
                generate_synthetic(&SyntheticSpec {
                    video_index: i,
                    ..spec.clone()
                })
                .unwrap()
            })
            .collect();
        let mut cfg = ModelConfig::tiny(mode);
        cfg.d_obj = 6;
        cfg.query_dim = 4;
        (Dataset { train, val: Vec::new() }, cfg)
    }

    #[test]
    fn zero_lr_freezes_parameters() {
        let (data, cfg) = tiny_data(2, QueryMode::Word);
        let tc = TrainConfig {
            epochs: 2,
            lr: 0.0,
            threads: Some(1),
            ..TrainConfig::default()
        };
        let out = train(&data, &cfg, &tc, None).unwrap();
        let init = ModelParams::init(&cfg, tc.seed).unwrap();
        for (a, b) in out.last.params.iter().zip(init.store.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn same_seed_same_history() {
        let (data, cfg) = tiny_data(3, QueryMode::Sentence);
        let tc = TrainConfig {
            epochs: 3,
            lr: 1e-2,
            batch_size: 2,
            threads: Some(2),
            ..TrainConfig::default()
        };
        let a = train(&data, &cfg, &tc, None).unwrap();
        let b = train(&data, &cfg, &tc, None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.last.to_bytes().unwrap(), b.last.to_bytes().unwrap());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (data, cfg) = tiny_data(2, QueryMode::None);
        let full = TrainConfig {
            epochs: 4,
            lr: 1e-2,
            threads: Some(1),
            ..TrainConfig::default()
        };
        let whole = train(&data, &cfg, &full, None).unwrap();
        let half = train(&data, &cfg, &TrainConfig { epochs: 2, ..full.clone() }, None).unwrap();
        let rest = train(&data, &cfg, &full, Some(&half.last)).unwrap();
        assert_eq!(whole.last.to_bytes().unwrap(), rest.last.to_bytes().unwrap());
    }

    #[test]
    fn feature_width_mismatch_is_config_error() {
        let (data, mut cfg) = tiny_data(1, QueryMode::None);
        cfg.d_obj = 7;
        let err = train(&data, &cfg, &TrainConfig::default(), None).unwrap_err();
        assert!(err.to_string().contains("feature width"));
    }

    #[test]
    fn padding_does_not_change_losses() {
        let (data, cfg) = tiny_data(1, QueryMode::Word);
        let tc = TrainConfig::default();
        let v = prepare_video(&data.train[0], &cfg, &tc).unwrap();
        let p = ModelParams::init(&cfg, 1).unwrap();
        let w = tc.weights();
        let base = video_loss(&p, &cfg, &w, &v).unwrap();
        let padded = PaddedClip::pad(&v.objects, 20).unwrap();
        assert_eq!(padded.mask.iter().filter(|&&m| m).count(), 12);
        let again = PreparedVideo {
            objects: padded.compact().unwrap(),
            ..v.clone()
        };
        let after = video_loss(&p, &cfg, &w, &again).unwrap();
        assert!((base.total - after.total).abs() <= 1e-9);
    }
}
