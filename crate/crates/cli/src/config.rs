use std::path::{Path, PathBuf};

use fedsilo::datagen::{GenConfig, Variant};
use fedsilo::federation::{FedConfig, FederationError, Phase};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Synthetic corpus size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corpus {
    /// Small, label-dense corpus that trains in seconds.
    Bench,
    Standard,
}

impl std::str::FromStr for Corpus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bench" => Ok(Corpus::Bench),
            "standard" => Ok(Corpus::Standard),
            other => Err(format!("unknown corpus {other:?} (expected bench or standard)")),
        }
    }
}

/// Everything a command needs, read from `--config` and then overridden by
/// flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub partners: usize,
    pub variant: String,
    pub phase: u8,
    pub corpus: Corpus,
    /// Compounds per partner; overrides the corpus default.
    pub compounds: Option<usize>,
    /// Directory of `partner_<i>` bundles; generated from `seed` when absent.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mode: String,
    pub verbose: bool,
    pub federation: FedConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            partners: 3,
            variant: "CLS".into(),
            phase: 1,
            corpus: Corpus::Bench,
            compounds: None,
            data: None,
            out: None,
            mode: "local".into(),
            verbose: false,
            federation: FedConfig::default(),
        }
    }
}

/// Validated view of a [`RunConfig`].
#[derive(Clone, Debug)]
pub struct Resolved {
    pub variant: Variant,
    pub phase: Phase,
    pub gen: GenConfig,
}

fn field(field: &'static str, message: impl Into<String>) -> CliError {
    CliError::Config {
        field,
        message: message.into(),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| field("config", format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| field("config", format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let variant: Variant = self.variant.parse().map_err(|m: String| field("variant", m))?;
        let phase = Phase::try_from(self.phase).map_err(|_| field("phase", format!("must be 1, 2 or 3, got {}", self.phase)))?;
        if self.partners == 0 || self.partners >= u16::MAX as usize {
            return Err(field("partners", "must be between 1 and 65534"));
        }
        if self.mode != "local" {
            return Err(field("mode", format!("only `local` is supported, got {:?}", self.mode)));
        }
        self.federation.validate().map_err(|e| match e {
            FederationError::Config { field: f, message } => CliError::Config { field: f, message },
            other => CliError::Other(other.to_string()),
        })?;
        let mut gen = match self.corpus {
            Corpus::Bench => GenConfig::bench(self.partners, variant),
            Corpus::Standard => GenConfig::new(self.partners, variant),
        };
        if let Some(n) = self.compounds {
            if n == 0 {
                return Err(field("compounds", "must be at least 1"));
            }
            gen.raw.n_compounds = n;
        }
        Ok(Resolved { variant, phase, gen })
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| field("out", "an output path is required"))
    }
}
