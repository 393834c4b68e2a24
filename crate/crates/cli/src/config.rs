use std::path::{Path, PathBuf};

use aceg_core::experiment::ExperimentConfig;
use anyhow::{Context, Result};

use crate::{Common, OUT_ENV};

/// Loads the config file (or defaults) and applies the shared flag overrides.
pub fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => ExperimentConfig::desk(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.pretrain.seed = s;
        cfg.mapping.seed = s;
        cfg.localize.seed = s;
    }
    cfg.pretrain.workers = common.workers;
    Ok(cfg)
}

/// `--out`, then the config's output root, then `$ACEG_OUT`, then
/// `./aceg_out`; the last three get the command name appended.
pub fn out_dir(common: &Common, cfg: &ExperimentConfig, command: &str) -> PathBuf {
    if let Some(o) = &common.out {
        return o.clone();
    }
    let root = cfg
        .output_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("aceg_out"));
    root.join(command)
}

/// Creates `dir` and writes the fully resolved config into it.
pub fn write_resolved(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut text = serde_json::to_string_pretty(cfg)?;
    text.push('\n');
    std::fs::write(dir.join("config.json"), text)?;
    Ok(())
}
