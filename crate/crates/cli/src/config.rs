//! `controlpipe.toml` loading. Every key is optional; missing keys take the
//! defaults of the corresponding library config.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use controlpipe_core::backend::BackendConfig;
use controlpipe_core::filters::FilterConfig;
use controlpipe_core::synth::Budgets;
use controlpipe_core::toy::{PpoConfig, SftConfig};
use serde::{Deserialize, Serialize};

pub const DEFAULT_CONFIG_FILE: &str = "controlpipe.toml";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Http,
    Stub,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// Cassette replayed by the stub backend.
    pub cassette: Option<PathBuf>,
    #[serde(flatten)]
    pub http: BackendConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub temperature: f64,
    pub max_tokens: u32,
    pub verify_threshold: u8,
    pub budgets: Budgets,
    pub budget_slack: f64,
    /// Script names, e.g. `["arabic", "cyrillic"]`.
    pub ban_scripts: Vec<String>,
    pub prompts_dir: Option<PathBuf>,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = controlpipe_core::synth::SynthConfig::default();
        Self {
            temperature: d.temperature,
            max_tokens: d.max_tokens,
            verify_threshold: d.verify_threshold,
            budgets: d.budgets,
            budget_slack: d.budget_slack,
            ban_scripts: Vec::new(),
            prompts_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySection {
    pub sft: SftConfig,
    pub ppo: PpoConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    /// Seed shared by every stochastic subcommand.
    pub seed: Option<u64>,
    pub backend: BackendSection,
    pub filter: FilterConfig,
    pub synth: SynthSection,
    pub toy: ToySection,
}

impl AppConfig {
    /// Reads `explicit` if given (it must exist), else `controlpipe.toml` in
    /// the working directory if present, else defaults.
    pub fn load(explicit: Option<&Path>) -> Result<Self> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let p = PathBuf::from(DEFAULT_CONFIG_FILE);
                if !p.exists() {
                    return Ok(Self::default());
                }
                p
            }
        };
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
