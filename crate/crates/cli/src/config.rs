//! Training config files: a preset, then `[model]` and `[train]` overrides,
//! then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use videograph::data::{read_features, FeatureSet, SplitConfig};
use videograph::model::{ModelConfig, QueryMode};
use videograph::train::TrainConfig;

use crate::{usage, TrainArgs};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    preset: Option<String>,
    #[serde(default)]
    data: DataSection,
    #[serde(default)]
    model: toml::Table,
    #[serde(default)]
    train: toml::Table,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    /// JSON split file; defaults to `<dir>/split.json` when present.
    pub split: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(usage(format!("unknown preset '{other}' (expected paper or desk)"))),
        }
    }
}

/// Fully resolved training setup.
#[derive(Clone, Debug, Serialize)]
pub struct Resolved {
    pub preset: Preset,
    pub data_dir: PathBuf,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Overlays `table` onto the serialised `base`, rejecting keys `base` lacks.
fn overlay<T>(base: &T, table: &toml::Table, section: &str) -> Result<T>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let mut value = serde_json::to_value(base)?;
    let obj = value.as_object_mut().expect("config structs serialise to objects");
    for (k, v) in table {
        if !obj.contains_key(k) {
            return Err(usage(format!("unknown key '{section}.{k}'")));
        }
        obj.insert(k.clone(), serde_json::to_value(v)?);
    }
    serde_json::from_value(value).map_err(|e| usage(format!("invalid [{section}] table: {e}")))
}

fn relative_to(base: Option<&Path>, p: &Path) -> PathBuf {
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    }
}

pub fn load_split(dir: &Path, split: Option<&Path>) -> Result<SplitConfig> {
    let default = dir.join("split.json");
    let path = match split {
        Some(p) => Some(p.to_path_buf()),
        None if default.exists() => Some(default),
        None => None,
    };
    let split = match path {
        Some(p) => {
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<SplitConfig>(&text).map_err(|e| usage(format!("split {}: {e}", p.display())))?
        }
        None => {
            let mut ids = container_ids(dir)?;
            ids.sort();
            SplitConfig::sequential(&ids, ids.len(), 0)?
        }
    };
    split.validate().map_err(|e| usage(e.to_string()))?;
    Ok(split)
}

/// Stems of every `.vgf` file in `dir`.
pub fn container_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "vgf") {
            if let Some(stem) = path.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn load_videos(dir: &Path, ids: &[String]) -> Result<Vec<FeatureSet>> {
    ids.iter()
        .map(|id| {
            let path = dir.join(format!("{id}.vgf"));
            read_features(&path).map_err(anyhow::Error::from)
        })
        .collect()
}

/// Reads the config file (if any), applies flags and fills data-dependent
/// widths from the first training video.
pub fn resolve(args: &TrainArgs) -> Result<(Resolved, Vec<FeatureSet>, Vec<FeatureSet>)> {
    let (file, base) = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let f: ConfigFile = toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))?;
            (f, p.parent().map(Path::to_path_buf))
        }
        None => (ConfigFile::default(), None),
    };
    let preset: Preset = match args.preset.as_deref().or(file.preset.as_deref()) {
        Some(s) => s.parse()?,
        None => Preset::Paper,
    };
    let data_dir = match (&args.data, &file.data.dir) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => relative_to(base.as_deref(), d),
        (None, None) => return Err(usage("no data directory: pass --data or set data.dir")),
    };
    let split_path = file.data.split.as_ref().map(|p| relative_to(base.as_deref(), p));
    let split = load_split(&data_dir, split_path.as_deref())?;
    let train_videos = load_videos(&data_dir, &split.train)?;
    let val_videos = load_videos(&data_dir, &split.val)?;
    let first = &train_videos[0];

    let query_mode = args
        .query_mode
        .or_else(|| file.model.get("query_mode").and_then(|v| v.as_str()).and_then(|s| s.parse().ok()))
        .unwrap_or(first.query_mode);
    let mut model = match preset {
        Preset::Paper => ModelConfig::paper(query_mode),
        Preset::Desk => ModelConfig::desk(first.d_obj, first.query_dim.max(1), query_mode),
    };
    if !file.model.contains_key("d_obj") {
        model.d_obj = first.d_obj;
    }
    if !file.model.contains_key("query_dim") && first.query_dim > 0 {
        model.query_dim = first.query_dim;
    }
    if !file.model.contains_key("objects") {
        model.objects = first.objects_per_frame;
    }
    let mut model = overlay(&model, &file.model, "model")?;
    model.query_mode = query_mode;
    if let Some(k) = args.iterations {
        model.iterations = k;
    }
    if let Some(n) = args.objects {
        model.objects = n;
    }
    if let Some(w) = args.words {
        model.words = w;
    }

    let train_base = match preset {
        Preset::Paper => TrainConfig::default(),
        Preset::Desk => TrainConfig::desk(),
    };
    let mut train = overlay(&train_base, &file.train, "train")?;
    if let Some(s) = args.seed {
        train.seed = s;
    }
    if let Some(m) = args.mode {
        train.mode = m;
    }
    if let Some(e) = args.epochs {
        train.epochs = e;
    }
    if let Some(lr) = args.lr {
        train.lr = lr;
    }
    if !file.model.contains_key("frames") {
        model.frames = train.clip_frames;
    }
    model.validate().map_err(|e| usage(e.to_string()))?;
    train.validate().map_err(|e| usage(e.to_string()))?;
    if model.query_mode != QueryMode::None {
        if let Some(v) = train_videos.iter().find(|v| v.query_mode != model.query_mode) {
            return Err(usage(format!(
                "model query mode {} but {} stores {} queries",
                model.query_mode.as_str(),
                v.video_id,
                v.query_mode.as_str()
            )));
        }
    }
    Ok((
        Resolved {
            preset,
            data_dir,
            split,
            model,
            train,
        },
        train_videos,
        val_videos,
    ))
}
