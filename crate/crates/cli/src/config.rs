//! Optional defaults file. `--config FILE` or the `KGCHAT_CONFIG`
//! environment variable points at a TOML file supplying default paths and
//! decode settings; explicit command-line flags always win.
//!
//! ```toml
//! model = "runs/stage2/model.ckpt"
//! vocab = "artifacts/vocab.bpe"
//! index = "artifacts/knowledge.idx"
//! seed = 7
//!
//! [decode]
//! strategy = "top-p"        # or "greedy"
//! top_p = 0.9
//! temperature = 1.0
//! max_new_tokens = 128
//! ```

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

use kgchat_core::inference::DecodeStrategy;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "KGCHAT_CONFIG";

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub decode: DecodeSection,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    pub strategy: Option<DecodeStrategy>,
    pub top_p: Option<f64>,
    pub temperature: Option<f64>,
    pub max_new_tokens: Option<usize>,
}

/// Load the config file named by the flag, else by `KGCHAT_CONFIG`, else
/// return empty defaults. A named file that is missing or malformed is a
/// hard error: silently ignoring it would mask typos.
pub fn load(flag: Option<&Path>) -> Result<FileConfig> {
    let path = match flag {
        Some(p) => Some(p.to_path_buf()),
        None => std::env::var_os(CONFIG_ENV).map(PathBuf::from),
    };
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let cfg: FileConfig =
        toml::from_str(&text).with_context(|| format!("parsing config file {}", path.display()))?;
    log::info!("config file: {}", path.display());
    Ok(cfg)
}
