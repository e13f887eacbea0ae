//! The recursive spatiotemporal graph network.

mod config;
mod forward;
mod layers;
mod params;
mod refine;

pub use config::{ModelConfig, QueryMode};
pub use forward::{forward, predict, Diagnostics, ForwardOutput};
pub use layers::{
    build_spatial_graph, build_temporal_graph, embed_objects, frame_pool, fuse_query, mhca_fuse, srr_forward,
    summarize_head, trr_forward, QueryEmbedding, SummaryScores,
};
pub use params::{GcnIds, LinearIds, MhcaIds, ModelParams, NormIds, QueryIds, TrrIds};
pub use refine::{operational_adjacency, RefinementSnapshot, RefinementState, ADJ_FLOOR};
