use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl LinearIds {
    pub fn vars(&self, tape: &mut Tape, store: &ParamStore) -> (Var, Option<Var>) {
        (tape.param(store, self.w), self.b.map(|b| tape.param(store, b)))
    }
}

#[derive(Clone, Debug)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormIds {
    pub fn vars(&self, tape: &mut Tape, store: &ParamStore) -> (Var, Var) {
        (tape.param(store, self.gamma), tape.param(store, self.beta))
    }
}

#[derive(Clone, Debug)]
pub struct MhcaIds {
    pub input_proj: Option<LinearIds>,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
    pub norm: Option<NormIds>,
}

#[derive(Clone, Debug)]
pub struct GcnIds {
    pub w: ParamId,
    pub norm: Option<NormIds>,
}

#[derive(Clone, Debug)]
pub struct TrrIds {
    pub w: ParamId,
    pub b: ParamId,
    pub norm: Option<NormIds>,
}

#[derive(Clone, Debug)]
pub struct QueryIds {
    /// Learned stand-in used when no query is available.
    pub null: ParamId,
    pub word: Option<LinearIds>,
    pub fuse: Option<LinearIds>,
}

/// Every learnable weight of the network, addressed by typed ids into one store.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub store: ParamStore,
    pub obj_emb: LinearIds,
    pub query: QueryIds,
    pub spatial_mhca: MhcaIds,
    pub temporal_mhca: MhcaIds,
    pub srr: Vec<GcnIds>,
    pub trr: Vec<TrrIds>,
    pub theta_s: ParamId,
    pub phi_s: ParamId,
    pub theta_t: ParamId,
    pub phi_t: ParamId,
    pub sum1: GcnIds,
    pub sum2: GcnIds,
    pub recon1: LinearIds,
    pub recon1_norm: Option<NormIds>,
    pub recon2: LinearIds,
}

struct Builder<'a> {
    store: ParamStore,
    rng: ChaCha8Rng,
    cfg: &'a ModelConfig,
}

impl Builder<'_> {
    fn mat(&mut self, name: &str, i: usize, o: usize) -> ParamId {
        self.store.add_glorot(name, i, o, &mut self.rng)
    }

    fn linear(&mut self, name: &str, i: usize, o: usize, bias: bool) -> LinearIds {
        let w = self.mat(&format!("{name}.w"), i, o);
        let b = bias.then(|| self.store.add_const(format!("{name}.b"), &[1, o], 0.0));
        LinearIds { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Option<NormIds> {
        self.cfg.node_norm.then(|| NormIds {
            gamma: self.store.add_const(format!("{name}.gamma"), &[1, d], 1.0),
            beta: self.store.add_const(format!("{name}.beta"), &[1, d], 0.0),
        })
    }

    fn mhca(&mut self, name: &str, d_q: usize, d_in: usize, d_nodes: usize, proj: bool, norm: bool) -> MhcaIds {
        let cfg = self.cfg;
        let input_proj = proj.then(|| self.linear(&format!("{name}.emb"), d_in, d_nodes, true));
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for h in 0..cfg.heads {
            wq.push(self.mat(&format!("{name}.h{h}.q"), d_q, cfg.d_head));
            wk.push(self.mat(&format!("{name}.h{h}.k"), d_nodes, cfg.d_head));
            wv.push(self.mat(&format!("{name}.h{h}.v"), d_nodes, cfg.d_head));
        }
        let wo = self.mat(&format!("{name}.out"), cfg.heads * cfg.d_head, d_nodes);
        let norm = if norm { self.norm(&format!("{name}.norm"), d_nodes) } else { None };
        MhcaIds {
            input_proj,
            wq,
            wk,
            wv,
            wo,
            norm,
        }
    }
}

impl ModelParams {
    /// Deterministically initialised parameters for `cfg`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            cfg,
        };
        let obj_emb = b.linear("obj_emb", cfg.d_obj, cfg.d_embed, true);

        let null = b.store.add_const("query.null", &[1, cfg.d_embed], 0.0);
        let (word, fuse) = match cfg.query_mode {
            super::QueryMode::None => (None, None),
            super::QueryMode::Word => (
                Some(b.linear("query.word", cfg.query_dim, cfg.d_word, true)),
                Some(b.linear("query.fuse", cfg.words * cfg.d_word, cfg.d_embed, true)),
            ),
            super::QueryMode::Sentence => (
                None,
                Some(b.linear("query.fuse", cfg.captions * cfg.query_dim, cfg.d_embed, true)),
            ),
        };
        let query = QueryIds { null, word, fuse };

        let d_frame = cfg.d_frame();
        let spatial_mhca = b.mhca("spatial_mhca", cfg.d_embed, cfg.d_embed, cfg.d_model, true, true);
        // A single group: normalising over it would cancel the broadcast context.
        let temporal_mhca = b.mhca("temporal_mhca", cfg.d_embed, d_frame, d_frame, false, false);

        let srr = cfg
            .srr_channels
            .windows(2)
            .enumerate()
            .map(|(l, w)| GcnIds {
                w: b.mat(&format!("srr.{l}.w"), w[0], w[1]),
                norm: b.norm(&format!("srr.{l}.norm"), w[1]),
            })
            .collect();
        let trr = cfg
            .trr_channels
            .windows(2)
            .enumerate()
            .map(|(l, w)| TrrIds {
                w: b.mat(&format!("trr.{l}.w"), w[0], w[1]),
                b: b.store.add_const(format!("trr.{l}.b"), &[1, w[1]], 0.0),
                norm: b.norm(&format!("trr.{l}.norm"), w[1]),
            })
            .collect();

        let theta_s = b.mat("refine.theta_s", d_frame, d_frame);
        let phi_s = b.mat("refine.phi_s", d_frame, d_frame);
        let theta_t = b.mat("refine.theta_t", cfg.d_model, cfg.d_model);
        let phi_t = b.mat("refine.phi_t", cfg.d_model, cfg.d_model);

        let sum1 = GcnIds {
            w: b.mat("sum1.w", cfg.d_model, cfg.sum_hidden),
            norm: b.norm("sum1.norm", cfg.sum_hidden),
        };
        let sum2 = GcnIds {
            w: b.mat("sum2.w", cfg.sum_hidden, 2),
            norm: b.norm("sum2.norm", 2),
        };
        let recon1 = b.linear("recon1", cfg.d_model, cfg.d_obj, true);
        let recon1_norm = b.norm("recon1.norm", cfg.d_obj);
        let recon2 = b.linear("recon2", 2 * cfg.d_obj, cfg.d_obj, true);

        Ok(Self {
            store: b.store,
            obj_emb,
            query,
            spatial_mhca,
            temporal_mhca,
            srr,
            trr,
            theta_s,
            phi_s,
            theta_t,
            phi_t,
            sum1,
            sum2,
            recon1,
            recon1_norm,
            recon2,
        })
    }
}
