//! Run configuration shared by all commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use smoothflow::diffengine::Activation;
use smoothflow::dynamics::MdConfig;
use smoothflow::flow::{Direction, FlowSpec};
use smoothflow::ramp::RampSpec;
use smoothflow::rootfind::RootFindConfig;
use smoothflow::training::data::SamplerConfig;
use smoothflow::training::potential::ToyPotential;
use smoothflow::training::TrainConfig;

use crate::CliError;

pub const RUN_CONFIG_VERSION: u32 = 1;

/// Architecture section. Domain tags come from the potential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_components: usize,
    pub ramp: RampSpec,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub n_frequencies: usize,
    pub direction: Direction,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_components: 40,
            ramp: RampSpec::Exponential { alpha: 1.0, beta: 1.0 },
            hidden: vec![100, 100],
            activation: Activation::Swish,
            n_frequencies: 2,
            direction: Direction::Forward,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub potential: ToyPotential,
    #[serde(default)]
    pub dataset: SamplerConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    /// Root finding used by training, evaluation and sampling.
    #[serde(default)]
    pub rootfind: RootFindConfig,
    #[serde(default)]
    pub md: MdConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub seed: u64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Per-stage seeds derived from the top-level seed.
#[derive(Debug, Clone, Copy)]
pub struct Seeds {
    pub dataset: u64,
    pub init: u64,
    pub train: u64,
    pub md: u64,
    pub eval: u64,
}

impl Seeds {
    pub fn from_master(seed: u64) -> Self {
        Self {
            dataset: seed,
            init: seed.wrapping_add(1),
            train: seed.wrapping_add(2),
            md: seed.wrapping_add(3),
            eval: seed.wrapping_add(4),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let raw: Value = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for section in ["dataset", "train", "md"] {
            if raw.get(section).and_then(|s| s.get("seed")).is_some() {
                return Err(CliError::Config(format!("{section}.seed is not allowed; set the top-level seed")));
            }
        }
        match raw.get("schema_version").and_then(Value::as_u64) {
            Some(v) if v == RUN_CONFIG_VERSION as u64 => {}
            Some(v) => return Err(CliError::Config(format!("unsupported schema_version {v}, expected {RUN_CONFIG_VERSION}"))),
            None => return Err(CliError::Config("missing schema_version".into())),
        }
        let cfg: RunConfig = serde_json::from_value(raw).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.potential.validate().map_err(|e| bad(&e))?;
        self.dataset.validate().map_err(|e| bad(&e))?;
        self.train_config().validate().map_err(|e| bad(&e))?;
        self.rootfind.validate().map_err(|e| bad(&e))?;
        self.md_config().validate().map_err(|e| bad(&e))?;
        let m = &self.model;
        if m.n_layers == 0 || m.n_components == 0 {
            return Err(CliError::Config("model.n_layers and model.n_components must be positive".into()));
        }
        m.ramp.validate().map_err(|e| bad(&e))?;
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_master(self.seed)
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig { seed: self.seeds().dataset, ..self.dataset }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seeds().train, rootfind: self.rootfind, ..self.train.clone() }
    }

    pub fn md_config(&self) -> MdConfig {
        MdConfig { seed: self.seeds().md, ..self.md }
    }

    pub fn flow_spec(&self) -> FlowSpec {
        let m = &self.model;
        FlowSpec {
            domain_tags: vec![self.potential.domain(); self.potential.dims()],
            n_layers: m.n_layers,
            n_components: m.n_components,
            ramp: m.ramp,
            hidden: m.hidden.clone(),
            activation: m.activation,
            n_frequencies: m.n_frequencies,
            direction: m.direction,
        }
    }
}
