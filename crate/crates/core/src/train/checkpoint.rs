//! "VGCK" checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "VGCK" | u16 version | u64 config hash | u32 config length | config JSON
//! | u32 epoch | u64 optimizer step | rng: 32-byte seed, u64 stream, u128 word position
//! | u32 parameter count
//! | per parameter: u16 name length, name, u8 rank, u32×rank dims,
//!   f64 values, f64 first moments, f64 second moments
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::adam::AdamState;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VGCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Parameters, optimizer moments and loop position.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub epoch: usize,
    pub params: ParamStore,
    pub adam: AdamState,
    pub rng: RngState,
}

fn config_json(cfg: &ModelConfig) -> Result<String> {
    serde_json::to_string(cfg).map_err(|e| Error::Config(format!("serialise model config: {e}")))
}

/// First 8 bytes of the SHA-256 of the model config JSON.
pub fn config_hash(cfg: &ModelConfig) -> Result<u64> {
    let digest = Sha256::digest(config_json(cfg)?.as_bytes());
    Ok(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

impl Checkpoint {
    pub fn config_hash(&self) -> Result<u64> {
        config_hash(&self.model_config)
    }

    /// Rebuilds typed model parameters from the stored values.
    pub fn model_params(&self) -> Result<ModelParams> {
        let mut p = ModelParams::init(&self.model_config, 0)?;
        if p.store.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters, model expects {}",
                self.params.len(),
                p.store.len()
            )));
        }
        for (id, stored) in self.params.iter().enumerate() {
            if p.store.get(id).name != stored.name {
                return Err(Error::Config(format!(
                    "parameter {id} is '{}' in the checkpoint but '{}' in the model",
                    stored.name,
                    p.store.get(id).name
                )));
            }
            p.store
                .set_value(id, stored.value.clone())
                .map_err(|e| e.context(stored.name.clone()))?;
        }
        Ok(p)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.config_hash()?.to_le_bytes());
        let json = config_json(&self.model_config)?;
        b.extend_from_slice(&(json.len() as u32).to_le_bytes());
        b.extend_from_slice(json.as_bytes());
        b.extend_from_slice(&(self.epoch as u32).to_le_bytes());
        b.extend_from_slice(&self.adam.step.to_le_bytes());
        b.extend_from_slice(&self.rng.seed);
        b.extend_from_slice(&self.rng.stream.to_le_bytes());
        b.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (i, p) in self.params.iter().enumerate() {
            b.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            b.extend_from_slice(p.name.as_bytes());
            b.push(p.value.rank() as u8);
            for &d in p.value.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for t in [&p.value, &self.adam.m[i], &self.adam.v[i]] {
                for x in t.data() {
                    b.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if bytes.len() - pos < n {
                return Err(Error::Parse {
                    offset: pos,
                    msg: format!("truncated {what}"),
                });
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        if take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                msg: "bad magic, expected VGCK".into(),
            });
        }
        let version = u16::from_le_bytes(take(2, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let hash = u64::from_le_bytes(take(8, "config hash")?.try_into().unwrap());
        let len = u32::from_le_bytes(take(4, "config length")?.try_into().unwrap()) as usize;
        let json = take(len, "config")?;
        let model_config: ModelConfig = serde_json::from_slice(json).map_err(|e| Error::Parse {
            offset: 18,
            msg: format!("config: {e}"),
        })?;
        if config_hash(&model_config)? != hash {
            return Err(Error::Parse {
                offset: 6,
                msg: "config hash mismatch".into(),
            });
        }
        let epoch = u32::from_le_bytes(take(4, "epoch")?.try_into().unwrap()) as usize;
        let step = u64::from_le_bytes(take(8, "optimizer step")?.try_into().unwrap());
        let seed: [u8; 32] = take(32, "rng seed")?.try_into().unwrap();
        let stream = u64::from_le_bytes(take(8, "rng stream")?.try_into().unwrap());
        let word_pos = u128::from_le_bytes(take(16, "rng position")?.try_into().unwrap());
        let count = u32::from_le_bytes(take(4, "parameter count")?.try_into().unwrap()) as usize;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let nlen = u16::from_le_bytes(take(2, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(nlen, "name")?)
                .map_err(|_| Error::Parse {
                    offset: 0,
                    msg: "parameter name is not UTF-8".into(),
                })?
                .to_string();
            let rank = take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(4, "dim")?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let mut read = |what: &str| -> Result<Tensor> {
                let raw = take(n * 8, what)?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::new(&shape, data)
            };
            params.add(name, read("values")?);
            m.push(read("first moments")?);
            v.push(read("second moments")?);
        }
        if pos != bytes.len() {
            return Err(Error::Parse {
                offset: pos,
                msg: "trailing bytes".into(),
            });
        }
        Ok(Self {
            model_config,
            epoch,
            params,
            adam: AdamState { m, v, step },
            rng: RngState { seed, stream, word_pos },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::from(e).context(path.display().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::QueryMode;
    use rand::Rng;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::tiny(QueryMode::Word);
        let p = ModelParams::init(&cfg, 3).unwrap();
        let mut adam = AdamState::new(&p.store);
        adam.step = 7;
        adam.m[0].data_mut()[0] = 0.25;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rng.random();
        Checkpoint {
            model_config: cfg,
            epoch: 4,
            params: p.store.clone(),
            adam,
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn save_load_save_is_bitwise() {
        let c = sample();
        let b = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back.to_bytes().unwrap(), b);
        assert_eq!(back.epoch, 4);
        assert_eq!(back.adam, c.adam);
        let p = back.model_params().unwrap();
        assert_eq!(p.store.value(0), c.params.value(0));
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let _: u32 = a.random();
        let mut b = RngState::capture(&a).restore();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn corruption_detected() {
        let b = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 3]).is_err());
        let mut bad = b.clone();
        bad[7] ^= 1;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = b;
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
