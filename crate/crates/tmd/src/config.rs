//! JSON configuration. Values resolve as built-in defaults, then the
//! `--config` file, then command-line flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tmd_core::defense::{DEFAULT_HEAD_EPOCHS, DEFAULT_HEAD_LR};
use tmd_core::projection::{CandidateMode, GdConfig, DEFAULT_K};
use tmd_core::TrainConfig;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct Config {
    pub train: TrainConfig,
    pub arch: ArchSection,
    pub projection: ProjectionSection,
    pub head: HeadSection,
    pub synth: SynthSection,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    /// `mlp`, `conv768` or `conv1024`.
    pub preset: String,
    pub mlp_widths: Option<Vec<usize>>,
}

impl Default for ArchSection {
    fn default() -> Self {
        Self {
            preset: "mlp".into(),
            mlp_widths: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSection {
    pub k: usize,
    pub candidates: CandidateMode,
    pub gd: GdConfig,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            candidates: CandidateMode::PerRow,
            gd: GdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for HeadSection {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_HEAD_EPOCHS,
            lr: DEFAULT_HEAD_LR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub clusters: usize,
    pub dim: usize,
    pub per: usize,
    pub center_scale: f64,
    pub sigma: f64,
    pub intrinsic_dim: Option<usize>,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            clusters: 4,
            dim: 16,
            per: 250,
            center_scale: 1.0,
            sigma: 0.1,
            intrinsic_dim: None,
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_json(&text)
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
