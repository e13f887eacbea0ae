use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which language query conditions the graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    None,
    Word,
    Sentence,
}

impl QueryMode {
    pub fn code(self) -> u8 {
        match self {
            QueryMode::None => 0,
            QueryMode::Word => 1,
            QueryMode::Sentence => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(QueryMode::None),
            1 => Some(QueryMode::Word),
            2 => Some(QueryMode::Sentence),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QueryMode::None => "none",
            QueryMode::Word => "word",
            QueryMode::Sentence => "sentence",
        }
    }
}

impl std::str::FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(QueryMode::None),
            "word" => Ok(QueryMode::Word),
            "sentence" => Ok(QueryMode::Sentence),
            other => Err(Error::Config(format!("unknown query mode '{other}'"))),
        }
    }
}

/// Shape and hyperparameters of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Frames per training clip.
    pub frames: usize,
    /// Objects per frame.
    pub objects: usize,
    pub d_obj: usize,
    pub d_embed: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    /// Channel plan of the spatial graph convolutions, input first.
    pub srr_channels: Vec<usize>,
    /// Channel plan of the temporal propagation layers, input first.
    pub trr_channels: Vec<usize>,
    pub sum_hidden: usize,
    /// Refinement iterations `K`.
    pub iterations: usize,
    pub lambda_o: f64,
    pub lambda_f: f64,
    pub query_mode: QueryMode,
    pub words: usize,
    pub captions: usize,
    pub d_word: usize,
    /// Width of the stored query vectors (text-encoder output).
    pub query_dim: usize,
    pub positional_encoding: bool,
    pub gcn_sym_norm: bool,
    pub node_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 320,
            objects: 16,
            d_obj: 2048,
            d_embed: 1024,
            d_model: 512,
            heads: 4,
            d_head: 256,
            srr_channels: vec![512, 256, 256, 256],
            trr_channels: vec![256, 256, 256, 512],
            sum_hidden: 256,
            iterations: 5,
            lambda_o: 1.6,
            lambda_f: 30.0,
            query_mode: QueryMode::Word,
            words: 8,
            captions: 8,
            d_word: 128,
            query_dim: 128,
            positional_encoding: true,
            gcn_sym_norm: true,
            node_norm: true,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration for a query mode.
    pub fn paper(mode: QueryMode) -> Self {
        Self {
            query_mode: mode,
            query_dim: if mode == QueryMode::Sentence { 2048 } else { 128 },
            ..Self::default()
        }
    }

    /// Small widths suitable for CPU training on synthetic data.
    pub fn desk(d_obj: usize, query_dim: usize, mode: QueryMode) -> Self {
        Self {
            frames: 64,
            objects: 6,
            d_obj,
            d_embed: 32,
            d_model: 32,
            heads: 2,
            d_head: 8,
            srr_channels: vec![32, 16, 16, 16],
            trr_channels: vec![16, 16, 16, 32],
            sum_hidden: 16,
            query_mode: mode,
            words: 4,
            captions: 4,
            d_word: 8,
            query_dim,
            ..Self::default()
        }
    }

    /// Minimal widths used by gradient checks.
    pub fn tiny(mode: QueryMode) -> Self {
        Self {
            frames: 4,
            objects: 3,
            d_obj: 5,
            d_embed: 4,
            d_model: 4,
            heads: 2,
            d_head: 2,
            srr_channels: vec![4, 3, 3, 3],
            trr_channels: vec![3, 3, 3, 4],
            sum_hidden: 3,
            iterations: 2,
            query_mode: mode,
            words: 2,
            captions: 2,
            d_word: 2,
            query_dim: 3,
            ..Self::default()
        }
    }

    /// Width of frame nodes (output of the spatial stack).
    pub fn d_frame(&self) -> usize {
        *self.srr_channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("frames", self.frames),
            ("objects", self.objects),
            ("d_obj", self.d_obj),
            ("d_embed", self.d_embed),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_head", self.d_head),
            ("sum_hidden", self.sum_hidden),
            ("words", self.words),
            ("captions", self.captions),
            ("d_word", self.d_word),
            ("query_dim", self.query_dim),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.srr_channels.len() < 2 || self.trr_channels.len() < 2 {
            return Err(Error::Config("channel plans need at least one layer".into()));
        }
        if self.srr_channels[0] != self.d_model {
            return Err(Error::Config(format!(
                "spatial stack must start at d_model={}, got {}",
                self.d_model, self.srr_channels[0]
            )));
        }
        if *self.trr_channels.last().unwrap() != self.d_model {
            return Err(Error::Config(format!(
                "temporal stack must end at d_model={}, got {}",
                self.d_model,
                self.trr_channels.last().unwrap()
            )));
        }
        let d_frame = self.d_frame();
        let inputs = &self.trr_channels[..self.trr_channels.len() - 1];
        if let Some(bad) = inputs.iter().find(|&&c| c != d_frame) {
            return Err(Error::Config(format!(
                "every temporal layer consumes frame messages of width {d_frame}, found input width {bad}"
            )));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model={} not divisible by heads={}",
                self.d_model, self.heads
            )));
        }
        if !(self.lambda_o > 0.0 && self.lambda_f > 0.0) {
            return Err(Error::Config("scaling factors must be positive".into()));
        }
        Ok(())
    }
}
