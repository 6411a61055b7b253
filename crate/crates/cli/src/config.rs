//! Run configuration file.
//!
//! ```toml
//! master_seed = 7          # dataset seed
//!
//! [splits]                 # pairs per split
//! train = 400
//! val = 50
//! test = 150
//!
//! [generator]              # synthetic scene generator
//! image_size = 256.0
//!
//! [train]                  # trainer; see TrainConfig
//! epochs = 10
//! optimizer = { lr = 0.005 }
//! ```
//!
//! Every table and key is optional; missing values take library defaults.
//! Command-line flags override the file.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use xview_core::detector::TrainConfig;
use xview_core::synth::{GeneratorConfig, SplitSizes};

pub const DEFAULT_MASTER_SEED: u64 = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub splits: SplitSizes,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            master_seed: DEFAULT_MASTER_SEED,
            splits: SplitSizes::default(),
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }
}
