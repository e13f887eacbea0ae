//! Planted synthetic videos with known keyframes.
//!
//! Each video is a sequence of contiguous events, each with a contiguous core
//! of central frames. Object `o` of a frame in event `e` is
//! `p_e + c_o + A_dev·m_t·u + noise` for the first `DRIFTERS` slots and
//! `p_e + c_o + noise` for the rest. `p_e` is the event prototype, `c_o` a
//! per-slot offset shared by all videos and `u` a shared unit direction;
//! `m_t` is 0 inside the core and 1 elsewhere. The groundtruth score is
//! `exp(−mean_o ‖x_o − p_e − c_o‖² / A_dev²)` and the planted keyframes are the
//! top `⌈ratio·T⌉` frames by score.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FeatureSet;
use crate::error::{Error, Result};
use crate::model::QueryMode;

pub const CLASS_NAMES: [&str; 12] = [
    "ball", "bicycle", "bird", "car", "chair", "cup", "dog", "person", "phone", "sky", "table", "tree",
];

const A_DEV: f64 = 12.0;
const DRIFTERS: usize = 2;
const OFFSET_SIGMA: f64 = 0.5;
const CLASSES_PER_EVENT: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub frames: usize,
    pub objects: usize,
    pub d_obj: usize,
    pub n_events: usize,
    pub keyframe_ratio: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub query_mode: QueryMode,
    pub query_dim: usize,
    /// Original frames per sampled frame.
    pub stride: usize,
    /// Selects an independent stream for each video of a dataset.
    pub video_index: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            frames: 64,
            objects: 6,
            d_obj: 32,
            n_events: 4,
            keyframe_ratio: 0.15,
            noise_sigma: 0.3,
            seed: 7,
            query_mode: QueryMode::Word,
            query_dim: 16,
            stride: 15,
            video_index: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_events < 2 {
            return Err(Error::Config(format!("n_events must be >= 2, got {}", self.n_events)));
        }
        if !(self.keyframe_ratio > 0.0 && self.keyframe_ratio <= 0.5) {
            return Err(Error::Config(format!(
                "keyframe_ratio must lie in (0, 0.5], got {}",
                self.keyframe_ratio
            )));
        }
        if self.frames < 2 * self.n_events {
            return Err(Error::Config(format!(
                "{} frames cannot hold {} events of length >= 2",
                self.frames, self.n_events
            )));
        }
        if self.objects == 0 || self.d_obj < 3 || self.query_dim == 0 || self.stride == 0 {
            return Err(Error::Config("objects, stride and query_dim must be >= 1 and d_obj >= 3".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn planted_count(&self) -> usize {
        (self.keyframe_ratio * self.frames as f64).ceil() as usize
    }
}

/// Generator-side truth not stored in the container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    /// Sampled-frame range `[start, end)` of each event.
    pub events: Vec<(usize, usize)>,
    /// Central frames `[start, end)` of each event.
    pub cores: Vec<(usize, usize)>,
    /// Event index of each sampled frame.
    pub frame_event: Vec<usize>,
}

impl SyntheticTruth {
    /// Events holding at least one frame with label 1.
    pub fn planted_events(&self, labels: &[u8]) -> Vec<usize> {
        let mut ev: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .map(|(t, _)| self.frame_event[t])
            .collect();
        ev.dedup();
        ev
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    let d = Normal::new(0.0, sigma).expect("finite sigma");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn remove_component(x: &mut [f64], dir: &[f64]) {
    let c = dot(x, dir);
    x.iter_mut().zip(dir).for_each(|(a, d)| *a -= c * d);
}

fn unit(mut x: Vec<f64>) -> Vec<f64> {
    let n = dot(&x, &x).sqrt();
    x.iter_mut().for_each(|v| *v /= n);
    x
}

struct Shared {
    u: Vec<f64>,
    class_table: Vec<f32>,
    caption_proj: Vec<f64>,
    offsets: Vec<f64>,
}

fn shared(spec: &SyntheticSpec) -> Shared {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.d_obj;
    let u = unit(gaussian(&mut rng, d, 1.0));
    let class_table = gaussian(&mut rng, CLASS_NAMES.len() * spec.query_dim, 1.0)
        .into_iter()
        .map(|x| x as f32)
        .collect();
    let caption_proj = gaussian(&mut rng, d * spec.query_dim, 1.0 / (d as f64).sqrt());
    let offsets = gaussian(&mut rng, spec.objects * d, OFFSET_SIGMA);
    Shared {
        u,
        class_table,
        caption_proj,
        offsets,
    }
}

/// Random partition of `t` frames into `k` contiguous runs of at least `min_len`.
fn event_lengths(rng: &mut ChaCha8Rng, t: usize, k: usize, min_len: usize) -> Vec<usize> {
    let spare = t - k * min_len;
    let mut cuts: Vec<usize> = (0..k - 1).map(|_| rng.random_range(0..=spare)).collect();
    cuts.sort_unstable();
    let mut lens = Vec::with_capacity(k);
    let mut prev = 0;
    for &c in cuts.iter().chain(std::iter::once(&spare)) {
        lens.push(min_len + c - prev);
        prev = c;
    }
    lens
}

/// Splits `total` core frames over events: two each while possible, then in
/// proportion to event length.
fn core_sizes(lens: &[usize], total: usize) -> Vec<usize> {
    let mut sizes = vec![0usize; lens.len()];
    for _ in 0..total {
        let pick = (0..lens.len())
            .filter(|&e| sizes[e] < lens[e])
            .max_by(|&a, &b| {
                let key = |e: usize| ((sizes[e] < 2) as u8, lens[e] as f64 / (sizes[e] + 1) as f64);
                let (ka, kb) = (key(a), key(b));
                ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(b.cmp(&a))
            });
        match pick {
            Some(e) => sizes[e] += 1,
            None => break,
        }
    }
    sizes
}

/// One synthetic video and its generator truth.
pub fn generate_with_truth(spec: &SyntheticSpec) -> Result<(FeatureSet, SyntheticTruth)> {
    spec.validate()?;
    let sh = shared(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.video_index + 1);

    let (t, n, d, k) = (spec.frames, spec.objects, spec.d_obj, spec.n_events);
    let min_len = (t / (2 * k)).max(2);
    let lens = event_lengths(&mut rng, t, k, min_len);
    let mut events = Vec::with_capacity(k);
    let mut start = 0;
    for &l in &lens {
        events.push((start, start + l));
        start += l;
    }
    let sizes = core_sizes(&lens, spec.planted_count());
    let cores: Vec<(usize, usize)> = events
        .iter()
        .zip(&sizes)
        .map(|(&(a, b), &c)| {
            let l = b - a;
            let lo = a + (l / 4).min(l - c);
            let hi = (b - l / 4).saturating_sub(c).max(lo) + 1;
            let s = rng.random_range(lo..hi).min(b - c);
            (s, s + c)
        })
        .collect();
    let prototypes: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let mut p = gaussian(&mut rng, d, 1.0);
            remove_component(&mut p, &sh.u);
            p
        })
        .collect();
    let event_classes: Vec<Vec<u16>> = (0..k)
        .map(|_| {
            let mut ids: Vec<u16> = (0..CLASS_NAMES.len() as u16).collect();
            ids.shuffle(&mut rng);
            ids.truncate(CLASSES_PER_EVENT);
            ids
        })
        .collect();


    let mut objects = Vec::with_capacity(t * n * d);
    let mut class_ids = Vec::with_capacity(t * n);
    let mut scores = Vec::with_capacity(t);
    let mut frame_event = Vec::with_capacity(t);
    for (e, &(a, b)) in events.iter().enumerate() {
        let (cs, ce) = cores[e];
        for f in a..b {
            let m = if (cs..ce).contains(&f) { 0.0 } else { 1.0 };
            let noise = gaussian(&mut rng, n * d, spec.noise_sigma);
            let mut dist2 = 0.0;
            for o in 0..n {
                let drift = if o < DRIFTERS { A_DEV * m } else { 0.0 };
                for i in 0..d {
                    let centre = prototypes[e][i] + sh.offsets[o * d + i];
                    let x = centre + drift * sh.u[i] + noise[o * d + i];
                    objects.push(x as f32);
                    dist2 += (x - centre) * (x - centre);
                }
                class_ids.push(event_classes[e][o % CLASSES_PER_EVENT]);
            }
            scores.push((-dist2 / (n as f64 * A_DEV * A_DEV)).exp() as f32);
            frame_event.push(e);
        }
    }

    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut planted = vec![0u8; t];
    for &i in order.iter().take(spec.planted_count()) {
        planted[i] = 1;
    }

    let (query_rows, query) = match spec.query_mode {
        QueryMode::None => (0, Vec::new()),
        QueryMode::Word => (CLASS_NAMES.len(), sh.class_table.clone()),
        QueryMode::Sentence => {
            let q = spec.query_dim;
            let rows = prototypes
                .iter()
                .flat_map(|p| {
                    (0..q)
                        .map(|c| (0..d).map(|i| p[i] * sh.caption_proj[i * q + c]).sum::<f64>() as f32)
                        .collect::<Vec<_>>()
                })
                .collect();
            (k, rows)
        }
    };
    let confidences = (0..t)
        .flat_map(|_| (0..n).map(|o| (0.95 - 0.9 * o as f64 / n as f64) as f32))
        .collect();

    let fs = FeatureSet {
        video_id: format!("synth_{:03}", spec.video_index),
        t_original: t * spec.stride,
        picks: (0..t).map(|i| i * spec.stride).collect(),
        objects_per_frame: n,
        d_obj: d,
        objects,
        class_ids,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        query_mode: spec.query_mode,
        query_rows,
        query_dim: spec.query_dim,
        query,
        gt_binary: Some(planted),
        gt_scores: Some(vec![scores]),
        confidences: Some(confidences),
    };
    fs.validate()?;
    let truth = SyntheticTruth {
        events,
        cores,
        frame_event,
    };
    Ok((fs, truth))
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FeatureSet> {
    generate_with_truth(spec).map(|(fs, _)| fs)
}

/// `videos` independent videos sharing the seed-level directions and vocabulary.
pub fn synthetic_dataset(spec: &SyntheticSpec, videos: usize) -> Result<Vec<(FeatureSet, SyntheticTruth)>> {
    (0..videos as u64)
        .map(|i| {
            generate_with_truth(&SyntheticSpec {
                video_index: i,
                ..spec.clone()
            })
        })
        .collect()
}
