//! Training objectives: weighted BCE, score regression, adjacency entropy,
//! reconstruction and diversity, plus their weighted combination.

use std::collections::BTreeMap;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{ForwardOutput, ModelConfig, ModelParams};
use crate::nn;
use crate::tensor::Tensor;

/// Median class frequency in the BCE weights.
pub const MEDIAN_FREQ: f64 = 0.5;
/// Probability clamp used by the BCE.
pub const PROB_CLAMP: f64 = 1e-7;
/// Floor inside `a·ln a`.
pub const LOG_FLOOR: f64 = 1e-12;
/// Denominator floor in the diversity term.
pub const DIVERSITY_EPS: f64 = 1e-8;
/// Fraction of frames selected for reconstruction/diversity.
pub const SELECT_RATIO: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    SupBin,
    SupScore,
    Unsup,
}

impl LossMode {
    pub fn is_supervised(self) -> bool {
        !matches!(self, LossMode::Unsup)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::SupBin => "sup-bin",
            LossMode::SupScore => "sup-score",
            LossMode::Unsup => "unsup",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sup-bin" => Ok(LossMode::SupBin),
            "sup-score" => Ok(LossMode::SupScore),
            "unsup" => Ok(LossMode::Unsup),
            other => Err(Error::Config(format!("unknown loss mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityNorm {
    Squared,
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub rho: f64,
    pub mode: LossMode,
    #[serde(default = "default_diversity_norm")]
    pub diversity_norm: DiversityNorm,
}

fn default_diversity_norm() -> DiversityNorm {
    DiversityNorm::Squared
}

impl LossWeights {
    pub fn for_mode(mode: LossMode) -> Self {
        let (alpha, bg) = if mode.is_supervised() { (1e-4, 0.1) } else { (1e-3, 10.0) };
        Self {
            alpha,
            beta: bg,
            gamma: bg,
            rho: 5.0,
            mode,
            diversity_norm: DiversityNorm::Squared,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.rho];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        Ok(())
    }
}

/// Scalar loss values by name plus their weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

/// Component values feeding [`total_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub classification: Option<f64>,
    pub sparsity: f64,
    pub diversity: f64,
    pub reconstruction: f64,
}

/// `ℒ_c + αℒ_s + βℒ_d + γℒ_r`, or without `ℒ_c` when unsupervised.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    let mut components = BTreeMap::new();
    let mut total = 0.0;
    if w.mode.is_supervised() {
        let c = parts
            .classification
            .ok_or_else(|| Error::Config("supervised loss requires a classification term".into()))?;
        components.insert("classification".to_string(), c);
        total += c;
    }
    components.insert("sparsity".to_string(), parts.sparsity);
    components.insert("diversity".to_string(), parts.diversity);
    components.insert("reconstruction".to_string(), parts.reconstruction);
    total += w.alpha * parts.sparsity + w.beta * parts.diversity + w.gamma * parts.reconstruction;
    Ok(LossReport { total, components })
}

/// Per-frame BCE weights `ω_m / ω_t`, or all ones when a class is absent.
pub fn bce_weights(labels: &[u8]) -> (Vec<f64>, bool) {
    let t = labels.len() as f64;
    let k = labels.iter().filter(|&&l| l != 0).count() as f64;
    if k == 0.0 || k == t {
        return (vec![1.0; labels.len()], true);
    }
    let wk = MEDIAN_FREQ / (k / t);
    let wb = MEDIAN_FREQ / (1.0 - k / t);
    (labels.iter().map(|&l| if l != 0 { wk } else { wb }).collect(), false)
}

fn check_len(op: &'static str, probs: &Tensor, n: usize) -> Result<usize> {
    let (t, c) = probs.dims2()?;
    if c != 2 || t != n {
        return Err(Error::dim(op, probs.shape(), &[n, 2]));
    }
    Ok(t)
}

/// Class-weighted binary cross entropy on the keyframe column of `probs: [T×2]`.
pub fn weighted_bce(tape: &mut Tape, probs: Var, labels: &[u8]) -> Result<Var> {
    let t = check_len("weighted_bce", tape.value(probs), labels.len())?;
    let (w, degenerate) = bce_weights(labels);
    if degenerate {
        debug!("weighted_bce: labels contain a single class, falling back to unit weights");
    }
    let y = tape.slice_cols(probs, 1, 2)?;
    let y = tape.clamp(y, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let ln_y = tape.log(y, 0.0);
    let neg = tape.scale(y, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let ln_1y = tape.log(one_minus, 0.0);
    let pos_c: Vec<f64> = labels.iter().zip(&w).map(|(&l, w)| if l != 0 { *w } else { 0.0 }).collect();
    let neg_c: Vec<f64> = labels.iter().zip(&w).map(|(&l, w)| if l != 0 { 0.0 } else { *w }).collect();
    let pos_c = tape.input(Tensor::new(&[t, 1], pos_c)?);
    let neg_c = tape.input(Tensor::new(&[t, 1], neg_c)?);
    let a = tape.mul(ln_y, pos_c)?;
    let b = tape.mul(ln_1y, neg_c)?;
    let s = tape.add(a, b)?;
    let s = tape.sum(s);
    Ok(tape.scale(s, -1.0 / t as f64))
}

/// `(1/T) Σ (y − y*)²` between the keyframe probabilities and target scores.
pub fn score_mse(tape: &mut Tape, probs: Var, gt: &[f64]) -> Result<Var> {
    let t = check_len("score_mse", tape.value(probs), gt.len())?;
    let y = tape.slice_cols(probs, 1, 2)?;
    let g = tape.input(Tensor::new(&[t, 1], gt.to_vec())?);
    let d = tape.sub(y, g)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / t as f64))
}

/// Plain-number form of [`score_mse`].
pub fn score_mse_values(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::dim("score_mse", &[pred.len()], &[gt.len()]));
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

fn off_diagonal_mask(shape: &[usize]) -> Tensor {
    let n = shape[shape.len() - 1];
    let mut m = Tensor::full(shape, 1.0);
    for (i, v) in m.data_mut().iter_mut().enumerate() {
        let r = (i / n) % n;
        if r == i % n {
            *v = 0.0;
        }
    }
    m
}

/// `−Σ_{j≠i} a log a` over every square slice of `adj`.
pub fn off_diagonal_entropy(tape: &mut Tape, adj: Var) -> Result<Var> {
    let shape = tape.shape(adj).to_vec();
    if let Some(bad) = tape.value(adj).data().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Domain {
            op: "sparsity_entropy",
            msg: format!("adjacency entries must be > 0, found {bad}"),
        });
    }
    let ln = tape.log(adj, LOG_FLOOR);
    let alna = tape.mul(adj, ln)?;
    let mask = tape.input(off_diagonal_mask(&shape));
    let masked = tape.mul(alna, mask)?;
    let s = tape.sum(masked);
    Ok(tape.scale(s, -1.0))
}

/// Spatial plus `ρ`-weighted temporal entropy of the operational adjacencies.
pub fn sparsity_entropy(tape: &mut Tape, s_op: Var, a_op: Var, rho: f64) -> Result<Var> {
    let s = off_diagonal_entropy(tape, s_op)?;
    let a = off_diagonal_entropy(tape, a_op)?;
    let a = tape.scale(a, rho);
    tape.add(s, a)
}

/// Decoder output `x̂` and `(1/|𝒦|) Σ ‖x − x̂‖²`.
///
/// `selected` is `[k×d_model]`, `originals` `[k×d_obj]`.
pub fn reconstruct(tape: &mut Tape, p: &ModelParams, selected: Var, originals: &Tensor) -> Result<(Var, Var)> {
    let (k, _) = tape.value(selected).dims2()?;
    if originals.dims2()?.0 != k {
        return Err(Error::dim("reconstruct", tape.shape(selected), originals.shape()));
    }
    let (w1, b1) = p.recon1.vars(tape, &p.store);
    let mut h = nn::linear(tape, selected, w1, b1)?;
    if let Some(n) = &p.recon1_norm {
        let (g, b) = n.vars(tape, &p.store);
        h = tape.node_norm(h, g, b)?;
    }
    let h = tape.elu(h);
    let orig = tape.input(originals.clone());
    let cat = tape.concat(&[h, orig], 1)?;
    let (w2, b2) = p.recon2.vars(tape, &p.store);
    let x_hat = nn::linear(tape, cat, w2, b2)?;
    let d = tape.sub(orig, x_hat)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    let loss = tape.scale(s, 1.0 / k as f64);
    Ok((x_hat, loss))
}

/// Mean over ordered pairs `i≠j` of `x̂ᵢᵀx̂ⱼ / (‖x̂ᵢ‖²‖x̂ⱼ‖²)` (or plain norms).
///
/// Returns zero when fewer than two rows are given.
pub fn diversity(tape: &mut Tape, x: Var, norm: DiversityNorm) -> Result<Var> {
    let (k, _) = tape.value(x).dims2()?;
    if k < 2 {
        debug!("diversity: fewer than two selected frames, term is zero");
        return Ok(tape.input(Tensor::scalar(0.0)));
    }
    let xt = tape.transpose(x)?;
    let ratio = match norm {
        DiversityNorm::Squared => {
            let g = tape.matmul(x, xt)?;
            let s = tape.row_sum_sq(x)?;
            let s = tape.clamp(s, DIVERSITY_EPS, f64::INFINITY);
            let st = tape.transpose(s)?;
            let outer = tape.matmul(s, st)?;
            tape.div(g, outer)?
        }
        DiversityNorm::Plain => {
            let u = tape.row_l2_normalize(x, DIVERSITY_EPS);
            let ut = tape.transpose(u)?;
            tape.matmul(u, ut)?
        }
    };
    let mask = tape.input(off_diagonal_mask(&[k, k]));
    let m = tape.mul(ratio, mask)?;
    let s = tape.sum(m);
    Ok(tape.scale(s, 1.0 / (k * (k - 1)) as f64))
}

/// Top `⌈ratio·T⌉` indices by score, ties to the lower index, returned ascending.
pub fn top_fraction(scores: &[f64], ratio: f64) -> Vec<usize> {
    let k = ((ratio * scores.len() as f64).ceil() as usize).clamp(1, scores.len().max(1)).min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Training-time frame selection `𝒦` from `probs: [T×2]`.
///
/// Supervised: frames whose keyframe probability wins, else the top 15%.
/// Unsupervised: always the top 15%.
pub fn select_keyframes(probs: &Tensor, mode: LossMode) -> Vec<usize> {
    let p1: Vec<f64> = probs.data().chunks(2).map(|r| r[1]).collect();
    if mode.is_supervised() {
        let set: Vec<usize> = probs
            .data()
            .chunks(2)
            .enumerate()
            .filter(|(_, r)| r[1] > r[0])
            .map(|(i, _)| i)
            .collect();
        if !set.is_empty() {
            return set;
        }
    }
    top_fraction(&p1, SELECT_RATIO)
}

/// Per-frame mean of raw object features: `[T×N×d] → [T×d]`.
pub fn frame_means(objects: &Tensor) -> Result<Tensor> {
    let (t, n, d) = objects.dims3()?;
    let mut out = vec![0.0; t * d];
    for ti in 0..t {
        for i in 0..n {
            let row = &objects.data()[(ti * n + i) * d..(ti * n + i + 1) * d];
            for (o, v) in out[ti * d..(ti + 1) * d].iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    for o in &mut out {
        *o /= n as f64;
    }
    Tensor::new(&[t, d], out)
}

/// Supervision for one video.
#[derive(Clone, Copy, Debug, Default)]
pub struct Targets<'a> {
    pub labels: Option<&'a [u8]>,
    pub scores: Option<&'a [f64]>,
}

/// Tape handles for each component and the weighted total.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub classification: Option<Var>,
    pub sparsity: Var,
    pub diversity: Var,
    pub reconstruction: Var,
    pub selected: Vec<usize>,
}

impl LossVars {
    pub fn report(&self, tape: &Tape, w: &LossWeights) -> Result<LossReport> {
        let v = |x: Var| tape.value(x).data()[0];
        let parts = LossParts {
            classification: self.classification.map(v),
            sparsity: v(self.sparsity),
            diversity: v(self.diversity),
            reconstruction: v(self.reconstruction),
        };
        total_loss(&parts, w)
    }
}

/// Full training objective for one forward pass on `objects: [T×N×d_obj]`.
pub fn model_loss(
    tape: &mut Tape,
    p: &ModelParams,
    _cfg: &ModelConfig,
    w: &LossWeights,
    out: &ForwardOutput,
    objects: &Tensor,
    targets: Targets<'_>,
) -> Result<LossVars> {
    w.validate()?;
    let classification = match w.mode {
        LossMode::SupBin => {
            let labels = targets
                .labels
                .ok_or_else(|| Error::Config("sup-bin mode requires binary labels".into()))?;
            Some(weighted_bce(tape, out.probs, labels)?)
        }
        LossMode::SupScore => {
            let scores = targets
                .scores
                .ok_or_else(|| Error::Config("sup-score mode requires importance scores".into()))?;
            Some(score_mse(tape, out.probs, scores)?)
        }
        LossMode::Unsup => None,
    };
    let sparsity = sparsity_entropy(tape, out.s_final(), out.a_final(), w.rho)?;

    let selected = select_keyframes(tape.value(out.probs), w.mode);
    let reps = tape.gather_rows(out.frame_repr, &selected)?;
    let p1 = tape.slice_cols(out.probs, 1, 2)?;
    let gate = tape.gather_rows(p1, &selected)?;
    let gated = tape.mul_col(reps, gate)?;
    let means = frame_means(objects)?;
    let originals = {
        let d = means.last_dim();
        let mut data = Vec::with_capacity(selected.len() * d);
        for &i in &selected {
            data.extend_from_slice(means.row(i));
        }
        Tensor::new(&[selected.len(), d], data)?
    };
    let (x_hat, reconstruction) = reconstruct(tape, p, gated, &originals)?;
    let diversity = diversity(tape, x_hat, w.diversity_norm)?;

    let s = tape.scale(sparsity, w.alpha);
    let d = tape.scale(diversity, w.beta);
    let r = tape.scale(reconstruction, w.gamma);
    let mut total = tape.add(s, d)?;
    total = tape.add(total, r)?;
    if let Some(c) = classification {
        total = tape.add(total, c)?;
    }
    Ok(LossVars {
        total,
        classification,
        sparsity,
        diversity,
        reconstruction,
        selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, QueryEmbedding, QueryMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn value(tape: &Tape, v: Var) -> f64 {
        tape.value(v).data()[0]
    }

    fn probs_from(p1: &[f64]) -> Tensor {
        Tensor::from_rows(&p1.iter().map(|&p| vec![1.0 - p, p]).collect::<Vec<_>>())
    }

    #[test]
    fn bce_hand_case() {
        let mut tape = Tape::new();
        let p = tape.input(probs_from(&[0.5; 4]));
        let l = weighted_bce(&mut tape, p, &[0, 1, 0, 0]).unwrap();
        let want = 0.25 * (2.0 * 2f64.ln() + 3.0 * (2.0 / 3.0) * 2f64.ln());
        assert!((value(&tape, l) - want).abs() <= 1e-12);
        assert!((value(&tape, l) - 0.6931).abs() <= 1e-4);
    }

    #[test]
    fn bce_confident_correct_is_near_zero() {
        let mut tape = Tape::new();
        let p = tape.input(probs_from(&[1.0, 0.0, 0.0, 1.0]));
        let l = weighted_bce(&mut tape, p, &[1, 0, 0, 1]).unwrap();
        assert!(value(&tape, l) <= 1e-6);
    }

    #[test]
    fn bce_symmetric_under_label_and_column_swap() {
        let probs = [0.2, 0.7, 0.9, 0.4, 0.55];
        let labels = [0u8, 1, 1, 0, 0];
        let mut tape = Tape::new();
        let p = tape.input(probs_from(&probs));
        let a = weighted_bce(&mut tape, p, &labels).unwrap();
        let flipped: Vec<f64> = probs.iter().map(|p| 1.0 - p).collect();
        let fl: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let q = tape.input(probs_from(&flipped));
        let b = weighted_bce(&mut tape, q, &fl).unwrap();
        assert!((value(&tape, a) - value(&tape, b)).abs() <= 1e-12);
    }

    #[test]
    fn bce_single_class_falls_back_to_unit_weights() {
        let (w, flag) = bce_weights(&[1, 1, 1]);
        assert!(flag);
        assert_eq!(w, vec![1.0; 3]);
    }

    #[test]
    fn score_mse_cases() {
        assert_eq!(score_mse_values(&[0.1, 0.5], &[0.1, 0.5]).unwrap(), 0.0);
        assert!((score_mse_values(&[1.5, 2.0, -1.0], &[0.5, 1.0, -2.0]).unwrap() - 1.0).abs() <= 1e-12);
        assert!(score_mse_values(&[1.0], &[1.0, 2.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..7).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..7).map(|_| rng.random()).collect();
        let mut naive = 0.0;
        for i in 0..7 {
            naive += (a[i] - b[i]) * (a[i] - b[i]);
        }
        let mut tape = Tape::new();
        let p = tape.input(probs_from(&a));
        let l = score_mse(&mut tape, p, &b).unwrap();
        assert!((value(&tape, l) - naive / 7.0).abs() <= 1e-12);
    }

    #[test]
    fn uniform_temporal_entropy_closed_form() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::full(&[4, 4], 0.25));
        let e = off_diagonal_entropy(&mut tape, a).unwrap();
        assert!((value(&tape, e) - 3.0 * 4f64.ln()).abs() <= 1e-9);
    }

    #[test]
    fn entropy_drops_when_mass_concentrates() {
        let mut tape = Tape::new();
        let u = tape.input(Tensor::full(&[4, 4], 0.25));
        let mut conc = Tensor::full(&[4, 4], 0.1);
        for i in 0..4 {
            conc.set2(i, (i + 1) % 4, 0.7);
        }
        let c = tape.input(conc);
        let eu = off_diagonal_entropy(&mut tape, u).unwrap();
        let ec = off_diagonal_entropy(&mut tape, c).unwrap();
        assert!(value(&tape, ec) < value(&tape, eu));
        let near = tape.input(Tensor::from_rows(&[vec![0.5, 1.0 - 3e-12, 1e-12], vec![1e-12, 0.5, 1.0 - 1e-12], vec![1e-12, 1.0 - 1e-12, 0.5]]));
        let en = off_diagonal_entropy(&mut tape, near).unwrap();
        assert!(value(&tape, en) < 1e-9);
    }

    #[test]
    fn entropy_rejects_nonpositive_entries() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]));
        assert!(matches!(off_diagonal_entropy(&mut tape, a), Err(Error::Domain { .. })));
    }

    #[test]
    fn diversity_cases() {
        let mut tape = Tape::new();
        let same = tape.input(Tensor::from_rows(&[vec![0.6, 0.8], vec![0.6, 0.8], vec![0.6, 0.8]]));
        let d = diversity(&mut tape, same, DiversityNorm::Squared).unwrap();
        assert!((value(&tape, d) - 1.0).abs() <= 1e-9);
        let orth = tape.input(Tensor::eye(3));
        let d = diversity(&mut tape, orth, DiversityNorm::Squared).unwrap();
        assert!(value(&tape, d).abs() <= 1e-9);
        let one = tape.input(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let d = diversity(&mut tape, one, DiversityNorm::Squared).unwrap();
        assert_eq!(value(&tape, d), 0.0);
    }

    #[test]
    fn diversity_matches_pair_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for (norm, pw) in [(DiversityNorm::Squared, 1.0), (DiversityNorm::Plain, 0.5)] {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        s += dot(&rows[i], &rows[j]) / (dot(&rows[i], &rows[i]).powf(pw) * dot(&rows[j], &rows[j]).powf(pw));
                    }
                }
            }
            let mut tape = Tape::new();
            let x = tape.input(Tensor::from_rows(&rows));
            let d = diversity(&mut tape, x, norm).unwrap();
            assert!((value(&tape, d) - s / 6.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn total_loss_defaults() {
        let ones = LossParts {
            classification: Some(1.0),
            sparsity: 1.0,
            diversity: 1.0,
            reconstruction: 1.0,
        };
        let r = total_loss(&ones, &LossWeights::for_mode(LossMode::SupBin)).unwrap();
        assert!((r.total - 1.2001).abs() <= 1e-12);
        let r = total_loss(&ones, &LossWeights::for_mode(LossMode::Unsup)).unwrap();
        assert!((r.total - 20.001).abs() <= 1e-12);
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            ..LossWeights::for_mode(LossMode::SupScore)
        };
        let parts = LossParts {
            classification: Some(0.37),
            sparsity: 5.0,
            diversity: 2.0,
            reconstruction: 9.0,
        };
        assert_eq!(total_loss(&parts, &zero).unwrap().total, 0.37);
        let missing = LossParts {
            classification: None,
            ..parts
        };
        assert!(matches!(total_loss(&missing, &zero), Err(Error::Config(_))));
    }

    fn recon_setup() -> (ModelParams, Tensor, Tensor) {
        let cfg = ModelConfig::tiny(QueryMode::None);
        let p = ModelParams::init(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sel = Tensor::new(&[3, cfg.d_model], (0..3 * cfg.d_model).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let orig = Tensor::new(&[3, cfg.d_obj], (0..3 * cfg.d_obj).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        (p, sel, orig)
    }

    #[test]
    fn reconstruction_oracle_weights_and_zero_decoder() {
        let (mut p, sel, orig) = recon_setup();
        let d = orig.last_dim();
        let mut pass = Tensor::zeros(&[2 * d, d]);
        for i in 0..d {
            pass.set2(d + i, i, 1.0);
        }
        p.store.set_value(p.recon2.w, pass).unwrap();
        let mut tape = Tape::new();
        let s = tape.input(sel.clone());
        let (_, l) = reconstruct(&mut tape, &p, s, &orig).unwrap();
        assert!(value(&tape, l).abs() <= 1e-24);

        p.store.set_value(p.recon2.w, Tensor::zeros(&[2 * d, d])).unwrap();
        let mut tape = Tape::new();
        let s = tape.input(sel);
        let (_, l) = reconstruct(&mut tape, &p, s, &orig).unwrap();
        let want = orig.data().iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!((value(&tape, l) - want).abs() <= 1e-12);
    }

    #[test]
    fn reconstruction_matches_layer_oracle() {
        let (p, sel, orig) = recon_setup();
        let mut tape = Tape::new();
        let s = tape.input(sel.clone());
        let (xh, l) = reconstruct(&mut tape, &p, s, &orig).unwrap();
        let h = sel.matmul(p.store.value(p.recon1.w)).unwrap();
        let (k, d) = h.dims2().unwrap();
        let b1 = p.store.value(p.recon1.b.unwrap());
        let mut h1 = h.clone();
        for j in 0..d {
            let col: Vec<f64> = (0..k).map(|i| h.at2(i, j) + b1.data()[j]).collect();
            let mean = col.iter().sum::<f64>() / k as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k as f64;
            for i in 0..k {
                let z = (col[i] - mean) / (var + crate::autodiff::NODE_NORM_EPS).sqrt();
                h1.set2(i, j, if z > 0.0 { z } else { z.exp_m1() });
            }
        }
        let mut rows = Vec::new();
        for i in 0..k {
            let mut r = h1.row(i).to_vec();
            r.extend_from_slice(orig.row(i));
            rows.push(r);
        }
        let cat = Tensor::from_rows(&rows);
        let mut out = cat.matmul(p.store.value(p.recon2.w)).unwrap();
        let b2 = p.store.value(p.recon2.b.unwrap()).clone();
        for i in 0..k {
            for j in 0..d {
                let v = out.at2(i, j) + b2.data()[j];
                out.set2(i, j, v);
            }
        }
        assert!(tape.value(xh).max_abs_diff(&out) <= 1e-12);
        let want = out.data().iter().zip(orig.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / k as f64;
        assert!((value(&tape, l) - want).abs() <= 1e-12);
    }

    #[test]
    fn selection_rules() {
        let probs = probs_from(&[0.2, 0.3, 0.1, 0.4, 0.45, 0.05, 0.3]);
        assert_eq!(select_keyframes(&probs, LossMode::SupBin), vec![3, 4]);
        let probs = probs_from(&[0.6, 0.7, 0.1, 0.4]);
        assert_eq!(select_keyframes(&probs, LossMode::SupBin), vec![0, 1]);
        assert_eq!(select_keyframes(&probs, LossMode::Unsup), vec![1]);
        assert_eq!(top_fraction(&[0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5], 0.15), vec![0, 1]);
    }

    #[test]
    fn model_loss_report_is_consistent() {
        let cfg = ModelConfig::tiny(QueryMode::None);
        let p = ModelParams::init(&cfg, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::new(&[6, 3, cfg.d_obj], (0..6 * 3 * cfg.d_obj).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels = [0u8, 1, 0, 0, 1, 0];
        let scores = [0.1, 0.8, 0.2, 0.3, 0.9, 0.0];
        for mode in [LossMode::SupBin, LossMode::SupScore, LossMode::Unsup] {
            let w = LossWeights::for_mode(mode);
            let mut tape = Tape::new();
            let out = forward(&mut tape, &p, &cfg, &x, &QueryEmbedding::none()).unwrap();
            let targets = Targets {
                labels: Some(&labels),
                scores: Some(&scores),
            };
            let lv = model_loss(&mut tape, &p, &cfg, &w, &out, &x, targets).unwrap();
            let rep = lv.report(&tape, &w).unwrap();
            assert!((rep.total - value(&tape, lv.total)).abs() <= 1e-9);
            assert_eq!(rep.components.contains_key("classification"), mode.is_supervised());
        }
    }
}
