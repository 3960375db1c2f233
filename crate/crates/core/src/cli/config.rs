//! Run configuration file.
//!
//! ```toml
//! [data]
//! source = "synthetic"   # or "folder" / "cifar-binary" with a `path`
//! clusters = 4
//! per_cluster = 150
//!
//! [output]
//! dir = "runs/desk"
//!
//! [train]
//! epochs = 200
//! batch_size = 64
//!
//! [train.model.backbone]
//! channels = [8, 16, 32]
//! ```
//!
//! Every section is strict: an unknown key is an error.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::data::{load_cifar_binary, load_image_folder, make_synthetic, CifarVariant, LabeledImageSet, SyntheticSpec};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    #[serde(rename_all = "snake_case")]
    Folder { path: PathBuf },
    #[serde(rename_all = "snake_case")]
    CifarBinary {
        path: PathBuf,
        #[serde(default)]
        variant: CifarVariant,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

impl DataSource {
    /// Replaces the file or directory of a folder or CIFAR source.
    pub fn set_path(&mut self, new: PathBuf) -> Result<(), CliError> {
        match self {
            DataSource::Folder { path } | DataSource::CifarBinary { path, .. } => {
                *path = new;
                Ok(())
            }
            DataSource::Synthetic(_) => Err(CliError::Config {
                field: "data.source".into(),
                message: "--data needs a folder or cifar-binary source".into(),
            }),
        }
    }

    /// Loads the set; folder images are resized to `resolution` on load.
    pub fn load(&self, resolution: usize) -> Result<LabeledImageSet, CliError> {
        Ok(match self {
            DataSource::Synthetic(spec) => make_synthetic(spec)?,
            DataSource::Folder { path } => load_image_folder(path, resolution)?,
            DataSource::CifarBinary { path, variant } => load_cifar_binary(path, *variant)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/htcn"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSource,
    pub output: OutputSection,
    pub train: TrainConfig,
    pub ablate: AblateSection,
}

impl RunConfig {
    /// Parses and validates.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Parse(m) => CliError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        if self.ablate.seeds.is_empty() {
            return Err(CliError::Config {
                field: "ablate.seeds".into(),
                message: "need at least one seed".into(),
            });
        }
        Ok(())
    }
}
