use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use hbdc::datagen::{derive_seed, DatasetSpec};
use hbdc::fedtrain::TrainingConfig;
use hbdc::hashnet::{mlp_spec, LayerSpec};
use hbdc::pairloss::LossConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Sim,
    Wire,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSpec {
    pub n_clusters: usize,
    pub ambient_dim: usize,
    pub embed_dim: usize,
    pub samples_per_cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Generate(GenerateSpec),
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub name: String,
    pub dataset: DatasetSource,
    pub sites: usize,
    pub min_per_site: usize,
    pub hidden: Vec<usize>,
    pub code_len: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub t: f64,
    pub learning_rate: f64,
    pub k: usize,
    #[serde(default)]
    pub mode: Mode,
    pub seed: u64,
    /// Defaults to a value derived from `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        // relative CSV paths resolve against the config file
        if let DatasetSource::Csv(p) = &mut cfg.dataset {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.k == 0 {
            bail!("k must be >= 1");
        }
        if self.code_len == 0 {
            bail!("code_len must be >= 1");
        }
        if self.sites == 0 {
            bail!("sites must be >= 1");
        }
        if let DatasetSource::Generate(g) = &self.dataset {
            self.dataset_spec_for(g).validate()?;
        }
        self.training().validate()?;
        Ok(())
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset_seed
            .unwrap_or_else(|| derive_seed(self.seed, 1))
    }

    pub fn shard_seed(&self) -> u64 {
        derive_seed(self.seed, 2)
    }

    pub fn training_seed(&self) -> u64 {
        derive_seed(self.seed, 3)
    }

    pub fn cluster_seed(&self) -> u64 {
        derive_seed(self.seed, 4)
    }

    fn dataset_spec_for(&self, g: &GenerateSpec) -> DatasetSpec {
        DatasetSpec::uniform(
            g.n_clusters,
            g.ambient_dim,
            g.embed_dim,
            g.samples_per_cluster,
            self.dataset_seed(),
        )
    }

    pub fn dataset_spec(&self) -> Option<DatasetSpec> {
        match &self.dataset {
            DatasetSource::Generate(g) => Some(self.dataset_spec_for(g)),
            DatasetSource::Csv(_) => None,
        }
    }

    pub fn network_spec(&self, input_dim: usize) -> Vec<LayerSpec> {
        mlp_spec(input_dim, &self.hidden, self.code_len)
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            n_rounds: self.rounds,
            n_sites: self.sites,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            loss: LossConfig {
                lambda: self.lambda,
                t: self.t,
            },
            seed: self.training_seed(),
        }
    }
}

/// Built-in desk-scale configuration; `configs/default.json` holds the same
/// values.
pub fn default_config() -> PipelineConfig {
    PipelineConfig {
        name: "default".into(),
        dataset: DatasetSource::Generate(GenerateSpec {
            n_clusters: 4,
            ambient_dim: 16,
            embed_dim: 2,
            samples_per_cluster: 500,
        }),
        sites: 4,
        min_per_site: 50,
        hidden: vec![16, 16],
        code_len: 8,
        rounds: 50,
        batch_size: 32,
        lambda: 1.0,
        t: 1.0,
        learning_rate: 0.05,
        k: 4,
        mode: Mode::Sim,
        seed: 1,
        dataset_seed: None,
        out: None,
    }
}
