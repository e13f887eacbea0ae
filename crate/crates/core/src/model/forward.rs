use super::config::ModelConfig;
use super::layers::{
    build_spatial_graph, build_temporal_graph, embed_objects, frame_pool, fuse_query, mhca_fuse, srr_forward,
    summarize_head, trr_forward, QueryEmbedding, SummaryScores,
};
use super::params::ModelParams;
use super::refine::{operational_adjacency, RefinementSnapshot, RefinementState};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::sinusoidal_pe;
use crate::tensor::Tensor;

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[T×2]` class probabilities.
    pub probs: Var,
    /// Final pooled frame representations `F̃`, `[T×d_model]`.
    pub frame_repr: Var,
    /// Operational spatial graphs `[T×N×N]`, one per stage `0..=K`.
    pub s_ops: Vec<Var>,
    /// Operational temporal graphs `[T×T]`, one per stage `0..=K`.
    pub a_ops: Vec<Var>,
    pub state: RefinementState,
}

impl ForwardOutput {
    pub fn s_final(&self) -> Var {
        *self.s_ops.last().expect("at least the initial stage")
    }

    pub fn a_final(&self) -> Var {
        *self.a_ops.last().expect("at least the initial stage")
    }

    pub fn scores(&self, tape: &Tape) -> SummaryScores {
        SummaryScores::from_probs(tape.value(self.probs).clone())
    }

    pub fn diagnostics(&self, tape: &Tape) -> Diagnostics {
        Diagnostics {
            s_ops: self.s_ops.iter().map(|v| tape.value(*v).clone()).collect(),
            a_ops: self.a_ops.iter().map(|v| tape.value(*v).clone()).collect(),
            refinement: self.state.snapshot(tape),
        }
    }
}

/// Every intermediate adjacency of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub s_ops: Vec<Tensor>,
    pub a_ops: Vec<Tensor>,
    pub refinement: RefinementSnapshot,
}

fn with_pe(tape: &mut Tape, cfg: &ModelConfig, frames: Var) -> Result<Var> {
    if !cfg.positional_encoding {
        return Ok(frames);
    }
    let (t, d) = tape.value(frames).dims2()?;
    let pe = tape.input(sinusoidal_pe(t, d));
    tape.add(frames, pe)
}

/// Full pipeline on `objects: [T×N×d_obj]`.
pub fn forward(tape: &mut Tape, p: &ModelParams, cfg: &ModelConfig, objects: &Tensor, query: &QueryEmbedding) -> Result<ForwardOutput> {
    let (t, n, d) = objects.dims3()?;
    if d != cfg.d_obj || t == 0 || n == 0 {
        return Err(Error::Config(format!(
            "object tensor {:?} incompatible with d_obj={}",
            objects.shape(),
            cfg.d_obj
        )));
    }
    let raw = tape.input(objects.clone());
    let emb = embed_objects(tape, p, raw)?;
    let q = fuse_query(tape, p, cfg, query).map_err(|e| e.context("fuse_query"))?;
    let nodes = mhca_fuse(tape, p, &p.spatial_mhca, q, emb).map_err(|e| e.context("spatial mhca"))?;
    let s0 = build_spatial_graph(tape, nodes, cfg.lambda_o)?;

    let s_op0 = operational_adjacency(tape, s0);
    let z0 = srr_forward(tape, p, cfg, nodes, s_op0).map_err(|e| e.context("iteration 0"))?;
    let f0 = frame_pool(tape, z0)?;
    let f0_pe = with_pe(tape, cfg, f0)?;
    let (f_hat0, a0) = build_temporal_graph(tape, p, q, f0_pe, cfg.lambda_f).map_err(|e| e.context("iteration 0"))?;

    let mut state = RefinementState::new(s0, a0, cfg.iterations);
    let a_op0 = operational_adjacency(tape, a0);
    let mut s_ops = vec![s_op0];
    let mut a_ops = vec![a_op0];
    let mut z_hat = trr_forward(tape, p, z0, a_op0, f_hat0).map_err(|e| e.context("iteration 0"))?;

    for k in 1..=cfg.iterations {
        let ctx = |e: Error| e.context(format!("iteration {k}"));
        let s_prev = *s_ops.last().unwrap();
        let z = srr_forward(tape, p, cfg, z_hat, s_prev).map_err(ctx)?;
        let f = frame_pool(tape, z)?;
        state.refine_step(tape, p, f, z_hat).map_err(ctx)?;
        let (s_op, a_op) = state.operational(tape);
        s_ops.push(s_op);
        a_ops.push(a_op);
        let f_pe = with_pe(tape, cfg, f)?;
        let f_hat = mhca_fuse(tape, p, &p.temporal_mhca, q, f_pe).map_err(ctx)?;
        z_hat = trr_forward(tape, p, z, a_op, f_hat).map_err(ctx)?;
    }

    let frame_repr = frame_pool(tape, z_hat)?;
    let a_fin = *a_ops.last().unwrap();
    let probs = summarize_head(tape, p, cfg, frame_repr, a_fin).map_err(|e| e.context("summarize"))?;
    Ok(ForwardOutput {
        probs,
        frame_repr,
        s_ops,
        a_ops,
        state,
    })
}

/// Inference convenience: runs [`forward`] on a fresh tape.
pub fn predict(p: &ModelParams, cfg: &ModelConfig, objects: &Tensor, query: &QueryEmbedding) -> Result<(SummaryScores, Diagnostics)> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, p, cfg, objects, query)?;
    Ok((out.scores(&tape), out.diagnostics(&tape)))
}
