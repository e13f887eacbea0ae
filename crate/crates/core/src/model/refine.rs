use super::params::ModelParams;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::Tensor;

/// Lower clamp applied before row normalisation of an adjacency.
pub const ADJ_FLOOR: f64 = 1e-6;

/// `clamp(raw, 1e-6)` followed by row normalisation.
pub fn operational_adjacency(tape: &mut Tape, raw: Var) -> Var {
    let c = tape.clamp(raw, ADJ_FLOOR, f64::INFINITY);
    tape.row_normalize(c)
}

/// Raw accumulated adjacencies and their residual history.
///
/// `s_*` are `[T×N×N]` (one spatial graph per frame); `a_*` are `[T×T]`.
#[derive(Clone, Debug)]
pub struct RefinementState {
    pub s_init: Var,
    pub a_init: Var,
    pub s_raw: Var,
    pub a_raw: Var,
    pub ds_history: Vec<Var>,
    pub da_history: Vec<Var>,
    pub iteration: usize,
    pub max_iterations: usize,
}

impl RefinementState {
    pub fn new(s_init: Var, a_init: Var, max_iterations: usize) -> Self {
        Self {
            s_init,
            a_init,
            s_raw: s_init,
            a_raw: a_init,
            ds_history: Vec::new(),
            da_history: Vec::new(),
            iteration: 0,
            max_iterations,
        }
    }

    /// Operational `(S, A)` for the current iteration.
    pub fn operational(&self, tape: &mut Tape) -> (Var, Var) {
        (operational_adjacency(tape, self.s_raw), operational_adjacency(tape, self.a_raw))
    }

    /// One refinement: `dA = σ(cos(F^k))` and per frame `dS_t = σ(cos(Ẑ_t^{k-1}))`,
    /// both added to the raw matrices.
    pub fn refine_step(&mut self, tape: &mut Tape, p: &ModelParams, frames: Var, z_prev: Var) -> Result<()> {
        if self.iteration >= self.max_iterations {
            return Err(Error::State(format!(
                "refinement already ran {} of {} iterations",
                self.iteration, self.max_iterations
            )));
        }
        let ts = tape.param(&p.store, p.theta_s);
        let ps = tape.param(&p.store, p.phi_s);
        let da = nn::cosine_affinity(tape, frames, ts, ps)?;
        let da = tape.sigmoid(da);
        let tt = tape.param(&p.store, p.theta_t);
        let pt = tape.param(&p.store, p.phi_t);
        let ds = nn::cosine_affinity(tape, z_prev, tt, pt)?;
        let ds = tape.sigmoid(ds);
        self.a_raw = tape.add(self.a_raw, da)?;
        self.s_raw = tape.add(self.s_raw, ds)?;
        self.da_history.push(da);
        self.ds_history.push(ds);
        self.iteration += 1;
        Ok(())
    }

    pub fn snapshot(&self, tape: &Tape) -> RefinementSnapshot {
        let get = |v: &Var| tape.value(*v).clone();
        RefinementSnapshot {
            s_init: get(&self.s_init),
            a_init: get(&self.a_init),
            s_raw: get(&self.s_raw),
            a_raw: get(&self.a_raw),
            ds_history: self.ds_history.iter().map(get).collect(),
            da_history: self.da_history.iter().map(get).collect(),
            iteration: self.iteration,
        }
    }
}

/// Detached copy of a [`RefinementState`].
#[derive(Clone, Debug, PartialEq)]
pub struct RefinementSnapshot {
    pub s_init: Tensor,
    pub a_init: Tensor,
    pub s_raw: Tensor,
    pub a_raw: Tensor,
    pub ds_history: Vec<Tensor>,
    pub da_history: Vec<Tensor>,
    pub iteration: usize,
}

impl RefinementSnapshot {
    /// Largest deviation of `raw − init − Σ residuals` over both graphs.
    pub fn telescoping_error(&self) -> f64 {
        let resid = |init: &Tensor, raw: &Tensor, hist: &[Tensor]| {
            let mut acc = init.clone();
            for h in hist {
                acc.add_assign(h);
            }
            acc.max_abs_diff(raw)
        };
        resid(&self.s_init, &self.s_raw, &self.ds_history).max(resid(&self.a_init, &self.a_raw, &self.da_history))
    }
}
