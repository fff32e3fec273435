//! The experiment config file: TOML with `[dataset]`, `[network]`, `[train]`,
//! `[eval]` and `[output]` sections. Every key is optional and defaulted.

use std::path::{Path, PathBuf};

use dsdr_core::data::{load_directory_dataset, synthesize_domains, Dataset, DomainShiftSpec};
use dsdr_core::evaluation::{Experiment, HeldOut};
use dsdr_core::networks::NetworkConfig;
use dsdr_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SPEC_VERSION: u32 = 1;
/// Overrides `output.dir` when set.
pub const OUT_DIR_ENV: &str = "DSDR_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: Source,
    /// Root of a `<domain>/<class>/<image>` tree; directory source only.
    pub path: Option<PathBuf>,
    pub domains: usize,
    pub per_domain: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: Source::Synthetic,
            path: None,
            domains: 4,
            per_domain: 500,
            classes: 10,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seeds: Vec<u64>,
    /// `"all"` or a domain name.
    pub held_out: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            held_out: "all".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

/// Fully resolved configuration. `[network]` may name a `preset`
/// (`"default"` or `"compact"`) whose fields the other keys override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spec_version: u32,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| usage(format!("config: {e}")))?;
        if let Some(net) = table.get_mut("network") {
            let net = net
                .as_table_mut()
                .ok_or_else(|| usage("config: [network] must be a table"))?;
            let base = match net.remove("preset") {
                None => NetworkConfig::default(),
                Some(toml::Value::String(p)) if p == "default" => NetworkConfig::default(),
                Some(toml::Value::String(p)) if p == "compact" => NetworkConfig::compact(),
                Some(other) => {
                    return Err(usage(format!(
                        "config: network.preset must be \"default\" or \"compact\", got {other}"
                    )))
                }
            };
            let mut merged = toml::Table::try_from(base).expect("network config serializes");
            for (k, v) in std::mem::take(net) {
                merged.insert(k, v);
            }
            *net = merged;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.output.dir = PathBuf::from(dir);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.spec_version != SPEC_VERSION {
            return Err(usage(format!(
                "spec_version: expected {SPEC_VERSION}, found {}",
                self.spec_version
            )));
        }
        let field = |e: dsdr_core::Error| usage(e.to_string());
        self.train.validate().map_err(field)?;
        self.network.validate().map_err(|e| usage(format!("network: {e}")))?;
        let d = &self.dataset;
        match d.source {
            Source::Directory if d.path.is_none() => {
                return Err(usage("dataset.path: required when dataset.source = \"directory\""))
            }
            Source::Synthetic => {
                if d.domains < 2 {
                    return Err(usage(format!("dataset.domains: need at least 2, got {}", d.domains)));
                }
                if d.per_domain < d.classes {
                    return Err(usage(format!(
                        "dataset.per_domain: {} is fewer than the {} classes",
                        d.per_domain, d.classes
                    )));
                }
                if d.classes != self.network.num_classes {
                    return Err(usage(format!(
                        "dataset.classes ({}) differs from network.num_classes ({})",
                        d.classes, self.network.num_classes
                    )));
                }
            }
            _ => {}
        }
        if self.eval.seeds.is_empty() {
            return Err(usage("eval.seeds: must list at least one seed"));
        }
        Ok(())
    }

    /// SHA-256 of the normalized (fully defaulted) config as JSON.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn load_dataset(&self) -> Result<Dataset, CliError> {
        let d = &self.dataset;
        let data = match d.source {
            Source::Synthetic => synthesize_domains(&DomainShiftSpec::standard(d.domains, d.seed), d.classes, d.per_domain)?,
            Source::Directory => load_directory_dataset(d.path.as_deref().expect("validated"), self.network.image_shape)?,
        };
        if data.meta.num_classes != self.network.num_classes {
            return Err(usage(format!(
                "dataset has {} classes but network.num_classes is {}",
                data.meta.num_classes, self.network.num_classes
            )));
        }
        Ok(data)
    }

    pub fn experiment(&self) -> Experiment {
        let mut exp = Experiment::new(self.train.clone(), self.network.clone());
        exp.seeds = self.eval.seeds.clone();
        exp.held_out = if self.eval.held_out == "all" {
            HeldOut::All
        } else {
            HeldOut::One(self.eval.held_out.clone())
        };
        exp
    }

    /// Documented template with every key at its default value.
    pub fn template() -> String {
        let cfg = Self {
            spec_version: SPEC_VERSION,
            dataset: DatasetSection::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            output: OutputSection::default(),
        };
        toml::to_string_pretty(&cfg).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sections_take_defaults() {
        let cfg = ExperimentConfig::from_toml("spec_version = 1\n").unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.network, NetworkConfig::default());
        assert_eq!(cfg.eval.seeds, vec![0, 1, 2]);
    }

    #[test]
    fn preset_with_override() {
        let cfg = ExperimentConfig::from_toml("spec_version = 1\n[network]\npreset = \"compact\"\nfeature_dim = 24\n").unwrap();
        assert_eq!(cfg.network.feature_dim, 24);
        assert_eq!(cfg.network.encoder_widths, NetworkConfig::compact().encoder_widths);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml("spec_version = 1\n[train]\nbatchsize = 3\n").unwrap_err();
        assert!(err.to_string().contains("batchsize"), "{err}");
    }

    #[test]
    fn template_round_trips() {
        let cfg = ExperimentConfig::from_toml(&ExperimentConfig::template()).unwrap();
        assert_eq!(cfg.digest(), ExperimentConfig::from_toml(&ExperimentConfig::template()).unwrap().digest());
    }
}
