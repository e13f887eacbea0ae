use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    #[default]
    Standard,
    Augment,
    Transfer,
}

/// Video ids per role for one evaluation round.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub setting: Setting,
    pub round: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (role, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Config(format!("video '{id}' appears twice (again in {role})")));
                }
            }
        }
        if self.train.is_empty() {
            return Err(Error::Config("split has no training videos".into()));
        }
        Ok(())
    }

    /// Deterministic split of `ids` in order: first `n_train`, then `n_val`, rest test.
    pub fn sequential(ids: &[String], n_train: usize, n_val: usize) -> Result<Self> {
        if n_train + n_val > ids.len() {
            return Err(Error::Config(format!(
                "cannot take {n_train}+{n_val} videos from {}",
                ids.len()
            )));
        }
        let s = Self {
            setting: Setting::Standard,
            round: 0,
            train: ids[..n_train].to_vec(),
            val: ids[n_train..n_train + n_val].to_vec(),
            test: ids[n_train + n_val..].to_vec(),
        };
        s.validate()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_rejected() {
        let ids: Vec<String> = (0..8).map(|i| format!("v{i}")).collect();
        let mut s = SplitConfig::sequential(&ids, 5, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (5, 1, 2));
        s.test.push("v0".into());
        assert!(s.validate().is_err());
        assert!(SplitConfig::sequential(&ids, 8, 1).is_err());
    }
}
