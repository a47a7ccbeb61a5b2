//! Experiment configuration: one TOML file, overridable by flags.

use std::path::{Path, PathBuf};

use restore_core::data::{default_domains, DatasetConfig, MixtureSpec, PhantomKind};
use restore_core::label_estimation::GridSearchConfig;
use restore_core::training::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub domains: usize,
    pub subjects_per_domain: Vec<usize>,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub val_fraction: f64,
    pub phantom: PhantomKind,
    pub mixtures: Vec<MixtureSpec>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            domains: d.domains.len(),
            subjects_per_domain: d.subjects_per_domain,
            dims: d.dims,
            spacing: d.spacing,
            val_fraction: d.val_fraction,
            phantom: d.phantom,
            mixtures: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub grid: GridSearchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            data_dir: None,
            checkpoint_dir: None,
            dataset: DatasetSection::default(),
            train: TrainConfig::default(),
            model: ModelConfig::toy(3),
            grid: GridSearchConfig::default(),
        }
    }
}

/// Flags shared by every subcommand that can override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<restore_core::training::TrainMode>,
    pub epochs: Option<usize>,
    pub domains: Option<usize>,
    pub epsilon: Option<f64>,
    pub coarse: Option<f64>,
    pub fine: Option<f64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("invalid config {}: {e}", path.display())))
    }

    /// Flags win over the file.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.mode {
            self.train.mode = m;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(n) = o.domains {
            self.dataset.domains = n;
            let spd = &mut self.dataset.subjects_per_domain;
            let last = spd.last().copied().unwrap_or(1);
            spd.resize(n, last);
        }
        if let Some(v) = o.epsilon {
            self.grid.epsilon = v;
        }
        if let Some(v) = o.coarse {
            self.grid.coarse = v;
        }
        if let Some(v) = o.fine {
            self.grid.fine = v;
        }
        if let Some(p) = &o.out {
            self.output_dir = Some(p.clone());
        }
        self.train.seed = self.seed;
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig, CliError> {
        let d = &self.dataset;
        Ok(DatasetConfig {
            domains: default_domains(d.domains)?,
            subjects_per_domain: d.subjects_per_domain.clone(),
            dims: d.dims,
            spacing: d.spacing,
            val_fraction: d.val_fraction,
            phantom: d.phantom,
            seed: self.seed,
            mixtures: d.mixtures.clone(),
        })
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        format!("{:x}", Sha256::digest(&json))
    }

    pub fn output_dir(&self) -> Result<&Path, CliError> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| CliError::Validation("no output directory: pass --out or set output_dir".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let mut c: ExperimentConfig = toml::from_str("seed = 4\n[train]\nepochs = 7\n").unwrap();
        assert_eq!((c.seed, c.train.epochs), (4, 7));
        c.apply(&Overrides {
            seed: Some(9),
            epochs: Some(1),
            domains: Some(2),
            ..Default::default()
        });
        assert_eq!((c.seed, c.train.seed, c.train.epochs), (9, 9, 1));
        assert_eq!(c.dataset.subjects_per_domain, vec![18, 15]);
        assert_eq!(c.dataset_config().unwrap().domains[1].one_hot_label.0, vec![0.0, 1.0]);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("sed = 4").is_err());
    }
}
