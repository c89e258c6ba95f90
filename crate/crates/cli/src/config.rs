use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use certcf_core::bounds::{MultiplicitySpec, Norm};
use certcf_core::data::{
    load_csv, make_synthetic_shift, read_feature_csv, BlobsSpec, SchemaSpec, SplitDataset,
};
use certcf_core::eval::FleetSpec;
use certcf_core::model::sha256_hex;
use certcf_core::simul::Method;
use certcf_core::train::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Blobs,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: Source,
    /// Seed for data generation and the train/test split.
    pub seed: u64,
    pub blobs: BlobsSpec,
    pub path: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    /// Feature-space CSV with the shifted training split, for DS runs on
    /// CSV sources.
    pub shifted_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifyConfig {
    pub method: Method,
    /// Defaults to the training κ and norm.
    pub kappa: Option<f64>,
    pub norm: Option<Norm>,
    pub delta: Option<f64>,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            method: Method::SimulCrown,
            kappa: None,
            norm: None,
            delta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Training and fleet seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub certify: CertifyConfig,
    #[serde(default)]
    pub fleet: FleetSpec,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_name() -> String {
    "run".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// A parsed config together with its source text and hash.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub text: String,
    pub hash: String,
    base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(s) = seed {
            config.seed = s;
        }
        config.train.seed = config.seed;
        config.fleet.seed = config.seed;
        config.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let effective = serde_json::to_string(&config).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Self {
            hash: sha256_hex(effective.as_bytes()),
            config,
            text,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self, over: Option<&Path>) -> PathBuf {
        over.map_or_else(|| self.resolve(&self.config.output_dir), Path::to_path_buf)
    }

    /// The dataset, and the shifted dataset when one is defined.
    pub fn datasets(&self) -> Result<(SplitDataset, Option<SplitDataset>), CliError> {
        let d = &self.config.dataset;
        match d.source {
            Source::Blobs => {
                let (orig, shifted) = make_synthetic_shift(&d.blobs, d.seed);
                Ok((orig, Some(shifted)))
            }
            Source::Csv => {
                let path = d.path.as_ref().ok_or_else(|| CliError::Config("dataset.path is required for csv".into()))?;
                let schema = d.schema.as_ref().ok_or_else(|| CliError::Config("dataset.schema is required for csv".into()))?;
                let schema_path = self.resolve(schema);
                let text = std::fs::read_to_string(&schema_path)
                    .map_err(|e| CliError::Config(format!("{}: {e}", schema_path.display())))?;
                let spec = SchemaSpec::from_toml(&text)?;
                let orig = load_csv(&self.resolve(path), &spec, d.seed)?;
                let shifted = match &d.shifted_path {
                    Some(p) => {
                        let train = read_feature_csv(&self.resolve(p), &orig.schema)?;
                        Some(SplitDataset {
                            train,
                            ..orig.clone()
                        })
                    }
                    None => None,
                };
                Ok((orig, shifted))
            }
        }
    }

    pub fn certify_spec(&self) -> MultiplicitySpec {
        let c = &self.config.certify;
        MultiplicitySpec {
            norm: c.norm.unwrap_or(self.config.train.norm),
            kappa: c.kappa.unwrap_or(self.config.train.kappa),
            delta: c.delta,
        }
    }
}
