use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::comm::LinkTopology;
use crate::dist::{MeshConfig, MeshOrdering, Strategy, WorkerExecutor};
use crate::error::{Error, Result};
use crate::model::{Batch, ModelConfig};
use crate::offload::RuntimeOptions;
use crate::zo::ZoHyper;

/// A named profile, a path to a topology JSON file, or an inline topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologySpec {
    Named(String),
    Inline(LinkTopology),
}

impl Default for TopologySpec {
    fn default() -> Self {
        TopologySpec::Named("pcie-nvlink".into())
    }
}

impl TopologySpec {
    /// Strings ending in `.json` are read as files relative to `base`.
    pub fn resolve(&self, base: Option<&Path>) -> Result<LinkTopology> {
        match self {
            TopologySpec::Inline(t) => {
                t.validate()?;
                Ok(*t)
            }
            TopologySpec::Named(name) if name.ends_with(".json") => {
                let path = match base {
                    Some(dir) if Path::new(name).is_relative() => dir.join(name),
                    _ => PathBuf::from(name),
                };
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::Config(format!("topology file {}: {e}", path.display())))?;
                LinkTopology::from_json(&text)
            }
            TopologySpec::Named(name) => LinkTopology::profile(name),
        }
    }
}

fn default_hyper() -> ZoHyper {
    ZoHyper::new(1e-3, 1e-2, 10).expect("default hyperparameters are valid")
}

fn default_strategy() -> Strategy {
    Strategy::Mezo
}

fn default_batch_size() -> usize {
    4
}

fn default_data_seed() -> u64 {
    1
}

fn default_check_every() -> u64 {
    1
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "ModelConfig::tiny")]
    pub model: ModelConfig,
    #[serde(default = "default_hyper")]
    pub hyper: ZoHyper,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    /// Defaults to the smallest worker count the strategy accepts.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub n_b: Option<usize>,
    #[serde(default)]
    pub n_p: Option<usize>,
    #[serde(default)]
    pub ordering: MeshOrdering,
    /// Streamed for `zo2`, eager otherwise.
    #[serde(default)]
    pub executor: Option<WorkerExecutor>,
    #[serde(default)]
    pub topology: TopologySpec,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Base of the per-iteration seed sequence.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default = "default_data_seed")]
    pub data_seed: u64,
    #[serde(default = "default_check_every")]
    pub check_every: u64,
    #[serde(default)]
    pub runtime: RuntimeOptions,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        // Relative topology files are resolved next to the config.
        if let TopologySpec::Named(name) = &cfg.topology {
            if name.ends_with(".json") && Path::new(name).is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.topology = TopologySpec::Named(dir.join(name).to_string_lossy().into_owned());
                }
            }
        }
        Ok(cfg)
    }

    pub fn executor(&self) -> WorkerExecutor {
        self.executor.unwrap_or(match self.strategy {
            Strategy::Zo2 => WorkerExecutor::Streamed,
            _ => WorkerExecutor::Eager,
        })
    }

    pub fn mesh(&self) -> MeshConfig {
        let default_workers = match self.strategy {
            Strategy::Mezo | Strategy::Zo2 => 1,
            Strategy::Pertp | Strategy::Ddp => 2,
            Strategy::TwoD => 4,
        };
        let workers = self.workers.unwrap_or(default_workers);
        let base = MeshConfig::for_strategy(self.strategy, workers);
        MeshConfig {
            n_b: self.n_b.unwrap_or(base.n_b),
            n_p: self.n_p.unwrap_or(base.n_p),
            ordering: self.ordering,
            ..base
        }
    }

    /// Short label used in comparison tables, e.g. `pertp+streamed`.
    pub fn method(&self) -> String {
        match (self.strategy, self.executor()) {
            (Strategy::Zo2, _) | (_, WorkerExecutor::Eager) => self.strategy.as_str().to_string(),
            (s, WorkerExecutor::Streamed) => format!("{}+streamed", s.as_str()),
        }
    }

    /// Every check that does not need to run the model.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mesh().validate()?;
        match (self.strategy, self.executor()) {
            (Strategy::Zo2, WorkerExecutor::Eager) => {
                return Err(Error::Config("zo2 always streams blocks; use executor \"streamed\"".into()))
            }
            (Strategy::Mezo, WorkerExecutor::Streamed) => {
                return Err(Error::Config("mezo keeps the model in memory; use strategy zo2 to stream".into()))
            }
            _ => {}
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let n_b = self.mesh().n_b;
        if self.batch_size % n_b != 0 {
            return Err(Error::Config(format!(
                "batch_size {} does not split evenly into {n_b} data-parallel shards",
                self.batch_size
            )));
        }
        self.runtime.cost.validate()?;
        self.topology.resolve(None)?;
        Ok(())
    }

    pub fn batch(&self) -> Result<Batch> {
        Batch::synthetic(self.model.vocab_size, self.batch_size, self.model.seq_len, self.data_seed)
    }
}
