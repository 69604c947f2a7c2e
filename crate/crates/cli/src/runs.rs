use std::path::{Path, PathBuf};

use invbasin::data::{load_csv, split_and_normalize, split_by_fraction, EntityDataset};
use invbasin::train::{load_json, save_json, TrainConfig};
use invbasin::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG: &str = "config.toml";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const HISTORY: &str = "history.csv";
pub const REPORT: &str = "report.json";
pub const META: &str = "run.json";
pub const PENALTY: &str = "penalty.json";
pub const UNCERTAINTY: &str = "uncertainty.csv";

/// Provenance of a run directory, enough for `evaluate` to find its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    pub data: PathBuf,
    pub seeds: Vec<u64>,
}

impl RunMeta {
    pub fn load(run: &Path) -> Result<Self> {
        load_json(&run.join(META))
    }
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

/// Loads the three CSVs and applies the config's chronological split.
pub fn load_data(dir: &Path, cfg: &TrainConfig) -> Result<EntityDataset> {
    let raw = load_csv(&dir.join("drivers.csv"), &dir.join("response.csv"), &dir.join("statics.csv"))?;
    let split = split_by_fraction(raw.steps(), cfg.train_frac, cfg.val_frac)?;
    split_and_normalize(&raw, split.train_end, split.val_end)
}

/// Creates the run directory and records config and provenance.
pub fn start_run(out: &Path, command: &str, cfg: &TrainConfig, data: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(CONFIG), cfg.to_toml())?;
    save_json(
        &RunMeta {
            command: command.into(),
            data: data.to_path_buf(),
            seeds: cfg.seeds.clone(),
        },
        &out.join(META),
    )
}

pub fn write_report<T: Serialize>(out: &Path, report: &T) -> Result<()> {
    save_json(report, &out.join(REPORT))
}

pub fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::Data(format!("{} is not a run directory", dir.display())))
    }
}
