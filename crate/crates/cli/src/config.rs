use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use infosum::corpus::Limits;
use infosum::model::{BeamSettings, ModelConfig};
use infosum::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// File locations; every entry can also be given on the command line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Annotated JSONL read by `prepare`.
    pub annotated: Option<PathBuf>,
    pub merge_table: Option<PathBuf>,
    pub train_examples: Option<PathBuf>,
    pub val_examples: Option<PathBuf>,
    /// Destination directory of `prepare` and `train`.
    pub output_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Documents for `generate`, one per line.
    pub input: Option<PathBuf>,
    /// Output file of `generate` and `score`.
    pub output: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    pub references: Option<PathBuf>,
}

/// Everything a command needs, read from a JSON file and then overridden
/// by command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Explicit decoding settings; a profile takes precedence.
    pub beam: Option<BeamSettings>,
    pub profile: Option<String>,
    /// Merge rules learned by `prepare`.
    pub merges: usize,
    pub limits: Limits,
    /// Normalize whitespace of generated summaries.
    pub normalize: bool,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let limits = Limits::default();
        Self {
            model: ModelConfig {
                max_source_len: limits.source,
                max_summary_len: limits.summary,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            beam: None,
            profile: None,
            merges: 400,
            limits,
            normalize: false,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }

    /// Decoding settings: the named profile, else `beam`, else a four-beam
    /// search over the model's summary length.
    pub fn beam_settings(&self) -> Result<BeamSettings> {
        let settings = match &self.profile {
            Some(name) => match BeamSettings::profile(name) {
                Some(s) => s,
                None => bail!(
                    "unknown profile `{name}` (expected one of {})",
                    BeamSettings::PROFILES.join(", ")
                ),
            },
            None => self.beam.unwrap_or(BeamSettings {
                max_len: self.model.max_summary_len,
                min_len: 0,
                beams: 4,
                length_penalty: 1.0,
            }),
        };
        settings.validate()?;
        Ok(settings)
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
        match path {
            Some(p) => Ok(p),
            None => bail!("no {what} given (flag or `paths` in the config file)"),
        }
    }
}
