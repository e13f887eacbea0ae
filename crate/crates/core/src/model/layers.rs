//! Individual network stages. Every function records onto the caller's tape.

use super::config::{ModelConfig, QueryMode};
use super::params::{GcnIds, MhcaIds, ModelParams, NormIds, TrrIds};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, NormVars};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Language query payload: `rows × query_dim` vectors, or nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEmbedding {
    pub mode: QueryMode,
    pub vectors: Option<Tensor>,
}

impl QueryEmbedding {
    pub fn none() -> Self {
        Self {
            mode: QueryMode::None,
            vectors: None,
        }
    }

    pub fn new(mode: QueryMode, vectors: Tensor) -> Self {
        Self {
            mode,
            vectors: Some(vectors),
        }
    }
}

fn norm_vars(tape: &mut Tape, store: &ParamStore, ids: &Option<NormIds>) -> NormVars {
    ids.as_ref().map(|n| n.vars(tape, store))
}

/// Object embedding `ô = W_o o + b_o` for `[N×d_obj]` or `[T×N×d_obj]` input.
pub fn embed_objects(tape: &mut Tape, p: &ModelParams, raw: Var) -> Result<Var> {
    let (w, b) = p.obj_emb.vars(tape, &p.store);
    nn::linear(tape, raw, w, b).map_err(|e| e.context("embed_objects"))
}

/// Pads with zero rows or keeps the first `rows` rows.
fn fit_rows(t: &Tensor, rows: usize) -> Result<Tensor> {
    let (r, d) = t.dims2()?;
    let mut data = vec![0.0; rows * d];
    let keep = r.min(rows) * d;
    data[..keep].copy_from_slice(&t.data()[..keep]);
    Tensor::new(&[rows, d], data)
}

/// Fuses the query into a single `[1×d_embed]` vector.
pub fn fuse_query(tape: &mut Tape, p: &ModelParams, cfg: &ModelConfig, q: &QueryEmbedding) -> Result<Var> {
    let vectors = match (&q.vectors, q.mode) {
        (_, QueryMode::None) | (None, _) => return Ok(tape.param(&p.store, p.query.null)),
        (Some(v), _) => v,
    };
    if q.mode != cfg.query_mode {
        return Err(Error::Config(format!(
            "query mode {:?} does not match model query mode {:?}",
            q.mode, cfg.query_mode
        )));
    }
    if vectors.rank() != 2 || vectors.last_dim() != cfg.query_dim {
        return Err(Error::Config(format!(
            "query vectors must be [rows × {}], got {:?}",
            cfg.query_dim,
            vectors.shape()
        )));
    }
    let fuse = p
        .query
        .fuse
        .as_ref()
        .ok_or_else(|| Error::Config("model has no query fusion layer".into()))?;
    let flat = match q.mode {
        QueryMode::Word => {
            let word = p
                .query
                .word
                .as_ref()
                .ok_or_else(|| Error::Config("model has no word embedding layer".into()))?;
            let x = tape.input(fit_rows(vectors, cfg.words)?);
            let (w, b) = word.vars(tape, &p.store);
            let h = nn::linear(tape, x, w, b)?;
            let h = tape.relu(h);
            tape.reshape(h, &[1, cfg.words * cfg.d_word])?
        }
        QueryMode::Sentence => {
            let x = tape.input(fit_rows(vectors, cfg.captions)?);
            tape.reshape(x, &[1, cfg.captions * cfg.query_dim])?
        }
        QueryMode::None => unreachable!(),
    };
    let (w, b) = fuse.vars(tape, &p.store);
    nn::linear(tape, flat, w, b)
}

/// Multi-head cross-attention with the query as the attention query.
///
/// `nodes` is `[n×d]` or grouped `[G×n×d]`; each group attends independently and
/// its context vector is added to every node of the group before node_norm.
pub fn mhca_fuse(tape: &mut Tape, p: &ModelParams, ids: &MhcaIds, query: Var, nodes: Var) -> Result<Var> {
    let in_shape = tape.shape(nodes).to_vec();
    let mut x = match in_shape[..] {
        [n, d] => tape.reshape(nodes, &[1, n, d])?,
        [_, _, _] => nodes,
        _ => return Err(Error::dim("mhca_fuse", &in_shape, tape.shape(query))),
    };
    if let Some(proj) = &ids.input_proj {
        let (w, b) = proj.vars(tape, &p.store);
        x = nn::linear(tape, x, w, b)?;
    }
    let (g, n, d) = tape.value(x).dims3()?;
    let flat = tape.reshape(x, &[g * n, d])?;
    let mut heads = Vec::with_capacity(ids.wq.len());
    for h in 0..ids.wq.len() {
        let wq = tape.param(&p.store, ids.wq[h]);
        let wk = tape.param(&p.store, ids.wk[h]);
        let wv = tape.param(&p.store, ids.wv[h]);
        let qh = tape.matmul(query, wq)?;
        let dh = tape.shape(qh)[1];
        let kh = tape.matmul(flat, wk)?;
        let vh = tape.matmul(flat, wv)?;
        let qt = tape.transpose(qh)?;
        let logits = tape.matmul(kh, qt)?;
        let logits = tape.reshape(logits, &[g, n])?;
        let attn = tape.softmax(logits, 1.0 / (dh as f64).sqrt())?;
        let attn = tape.reshape(attn, &[g, 1, n])?;
        let vh = tape.reshape(vh, &[g, n, dh])?;
        let ctx = tape.bmm(attn, vh)?;
        heads.push(tape.reshape(ctx, &[g, dh])?);
    }
    let cat = tape.concat(&heads, 1)?;
    let wo = tape.param(&p.store, ids.wo);
    let ctx = tape.matmul(cat, wo)?;
    let mut fused = tape.add_group(x, ctx)?;
    if let Some((gm, bt)) = norm_vars(tape, &p.store, &ids.norm) {
        fused = nn::node_norm(tape, fused, gm, bt)?;
    }
    if in_shape.len() == 2 {
        tape.reshape(fused, &[n, d])
    } else {
        Ok(fused)
    }
}

/// `softmax(λ_o · Õ Õᵀ)` per frame, `[N×d] → [N×N]` or `[T×N×d] → [T×N×N]`.
pub fn build_spatial_graph(tape: &mut Tape, nodes: Var, lambda_o: f64) -> Result<Var> {
    let t = tape.transpose(nodes)?;
    let gram = if tape.shape(nodes).len() == 2 {
        tape.matmul(nodes, t)?
    } else {
        tape.bmm(nodes, t)?
    };
    tape.softmax(gram, lambda_o)
}

fn gcn_layer(tape: &mut Tape, p: &ModelParams, cfg: &ModelConfig, ids: &GcnIds, x: Var, adj: Var, act: Activation) -> Result<Var> {
    let w = tape.param(&p.store, ids.w);
    let norm = norm_vars(tape, &p.store, &ids.norm);
    nn::graph_conv(tape, x, adj, w, act, cfg.gcn_sym_norm, norm)
}

/// Spatial relation reasoning: the stack of graph convolutions over object nodes.
pub fn srr_forward(tape: &mut Tape, p: &ModelParams, cfg: &ModelConfig, objects: Var, s_op: Var) -> Result<Var> {
    let mut x = objects;
    for (l, ids) in p.srr.iter().enumerate() {
        x = gcn_layer(tape, p, cfg, ids, x, s_op, Activation::Elu).map_err(|e| e.context(format!("srr layer {l}")))?;
    }
    Ok(x)
}

/// Mean over objects: `[N×d] → [1×d]`, `[T×N×d] → [T×d]`.
pub fn frame_pool(tape: &mut Tape, z: Var) -> Result<Var> {
    tape.mean_rows(z)
}

/// Language-guided frame nodes `F̂` and the temporal graph `softmax(λ_f F̂F̂ᵀ)`.
///
/// `frames` must already carry the positional encoding when one is used.
pub fn build_temporal_graph(tape: &mut Tape, p: &ModelParams, query: Var, frames: Var, lambda_f: f64) -> Result<(Var, Var)> {
    let f_hat = mhca_fuse(tape, p, &p.temporal_mhca, query, frames)?;
    let t = tape.transpose(f_hat)?;
    let gram = tape.matmul(f_hat, t)?;
    let a = tape.softmax(gram, lambda_f)?;
    Ok((f_hat, a))
}

fn trr_layer(tape: &mut Tape, p: &ModelParams, ids: &TrrIds, z: Var, msg: Var) -> Result<Var> {
    let h = tape.add_group(z, msg)?;
    let w = tape.param(&p.store, ids.w);
    let b = tape.param(&p.store, ids.b);
    let mut h = nn::linear(tape, h, w, Some(b))?;
    if let Some((g, bt)) = norm_vars(tape, &p.store, &ids.norm) {
        h = nn::node_norm(tape, h, g, bt)?;
    }
    Ok(tape.elu(h))
}

/// Temporal relation reasoning: `ẑ = σ(W_f(z + Σ_k a_tk f̂_k) + b_f)` per layer.
pub fn trr_forward(tape: &mut Tape, p: &ModelParams, z: Var, a_op: Var, f_hat: Var) -> Result<Var> {
    let msg = tape.matmul(a_op, f_hat)?;
    let mut x = z;
    for (l, ids) in p.trr.iter().enumerate() {
        x = trr_layer(tape, p, ids, x, msg).map_err(|e| e.context(format!("trr layer {l}")))?;
    }
    Ok(x)
}

/// Two graph convolutions over frames followed by a 2-class softmax: `[T×2]`.
pub fn summarize_head(tape: &mut Tape, p: &ModelParams, cfg: &ModelConfig, frames: Var, a_op: Var) -> Result<Var> {
    let h = gcn_layer(tape, p, cfg, &p.sum1, frames, a_op, Activation::Relu)?;
    gcn_layer(tape, p, cfg, &p.sum2, h, a_op, Activation::SoftmaxRows)
}

/// Per-frame probabilities and the keyframes they select.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryScores {
    /// `[T×2]`: background, keyframe.
    pub probs: Tensor,
    pub keyframe_set: Vec<usize>,
}

impl SummaryScores {
    /// Keyframes are frames whose keyframe probability strictly exceeds background.
    pub fn from_probs(probs: Tensor) -> Self {
        let keyframe_set = probs
            .data()
            .chunks(2)
            .enumerate()
            .filter(|(_, r)| r[1] > r[0])
            .map(|(i, _)| i)
            .collect();
        Self { probs, keyframe_set }
    }

    pub fn keyframe_probs(&self) -> Vec<f64> {
        self.probs.data().chunks(2).map(|r| r[1]).collect()
    }
}
