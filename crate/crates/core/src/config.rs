//! Experiment configuration files.
//!
//! A config is one JSON document. Every section is optional and unknown keys
//! are rejected. Example:
//!
//! ```json
//! {
//!   "seed": 0,
//!   "output_dir": "out/xor",
//!   "xor": { "d": 10, "n_train": 10000, "n_test": 5000, "p_hat": 1.0 },
//!   "model": { "hidden_dim": 128, "embed_dim": 128 },
//!   "train": { "epochs": 50, "batch_size": 512, "objective": "confu", "lambda": 0.5 },
//!   "retrieval": [{ "target": 2, "queries": [1, 3], "pool_size": 32 }],
//!   "objectives": ["confu", "triclip", "symile", "gram", "triangle"],
//!   "grid": { "p_hat": [0.0, 0.5, 1.0], "seeds": [0, 1, 2] },
//!   "workers": 1
//! }
//! ```
//!
//! `seed` drives data generation, initialization, shuffling and masking. The
//! nested `xor.seed` and `train.seed` fields may be omitted; if present they
//! must agree with it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::RetrievalSpec;
use crate::io::sha256_hex;
use crate::nets::ModelConfig;
use crate::objectives::ObjectiveKind;
use crate::synth::XorConfig;
use crate::train::TrainConfig;

pub const ENV_SEED: &str = "CONFU_SEED";
pub const ENV_OUT_DIR: &str = "CONFU_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    /// Width of encoder and fusion hidden layers, and of the features `h`.
    pub hidden_dim: usize,
    pub embed_dim: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            embed_dim: 128,
        }
    }
}

impl ModelSpec {
    pub fn build(&self, input_dim: usize) -> ModelConfig {
        ModelConfig::symmetric(input_dim, self.hidden_dim, self.embed_dim)
    }
}

/// Axes of a sweep. An empty axis falls back to the base config value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid {
    pub p_hat: Vec<f64>,
    /// Applies to ConFu only.
    pub lambda: Vec<f64>,
    pub embed_dim: Vec<usize>,
    pub seeds: Vec<u64>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_specs() -> Vec<RetrievalSpec> {
    vec![RetrievalSpec::xor_default()]
}

fn default_objectives() -> Vec<ObjectiveKind> {
    ObjectiveKind::ALL.to_vec()
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub xor: XorConfig,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_specs")]
    pub retrieval: Vec<RetrievalSpec>,
    /// Objectives crossed with the grid by `sweep`.
    #[serde(default = "default_objectives")]
    pub objectives: Vec<ObjectiveKind>,
    #[serde(default)]
    pub grid: Grid,
    /// Concurrent sweep cells.
    #[serde(default = "one")]
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(json_path(&e), e.to_string()))
    }

    /// Reads, applies environment overrides, resolves seeds and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Only the seed and output directory may come from the environment.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(s) = get(ENV_SEED) {
            self.seed = s.trim().parse().map_err(|_| {
                Error::config(ENV_SEED, format!("{s:?} is not an unsigned integer"))
            })?;
            self.xor.seed = self.seed;
            self.train.seed = self.seed;
        }
        if let Some(d) = get(ENV_OUT_DIR) {
            self.output_dir = PathBuf::from(d);
        }
        Ok(())
    }

    /// Propagates the top-level seed into the nested sections and validates.
    pub fn resolve(&mut self) -> Result<()> {
        for (field, nested) in [("xor.seed", self.xor.seed), ("train.seed", self.train.seed)] {
            if nested != 0 && nested != self.seed {
                return Err(Error::config(
                    field,
                    format!("{nested} disagrees with the top-level seed {}", self.seed),
                ));
            }
        }
        self.xor.seed = self.seed;
        self.train.seed = self.seed;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.xor.validate()?;
        self.train.validate()?;
        self.model_config().validate()?;
        if self.model.hidden_dim == 0 || self.model.embed_dim == 0 {
            return Err(Error::config("model", "dimensions must be >= 1"));
        }
        for (i, s) in self.retrieval.iter().enumerate() {
            s.validate().map_err(|e| match e {
                Error::Config { field, reason } => {
                    Error::config(format!("retrieval[{i}].{field}"), reason)
                }
                other => other,
            })?;
            if s.pool_size > self.xor.n_test {
                return Err(Error::config(
                    format!("retrieval[{i}].pool_size"),
                    format!("exceeds xor.n_test = {}", self.xor.n_test),
                ));
            }
        }
        if self.objectives.is_empty() {
            return Err(Error::config("objectives", "must not be empty"));
        }
        for (i, &p) in self.grid.p_hat.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(
                    format!("grid.p_hat[{i}]"),
                    "must lie in [0, 1]",
                ));
            }
        }
        for (i, &l) in self.grid.lambda.iter().enumerate() {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::config(
                    format!("grid.lambda[{i}]"),
                    "must lie in [0, 1]",
                ));
            }
        }
        if let Some(i) = self.grid.embed_dim.iter().position(|&d| d == 0) {
            return Err(Error::config(
                format!("grid.embed_dim[{i}]"),
                "must be >= 1",
            ));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be >= 1"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.build(self.xor.d)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the whole resolved config.
    pub fn hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    /// Hash of what determines a trained model: data, architecture and
    /// training settings. Retrieval specs and sweep axes are excluded.
    pub fn run_hash(&self) -> String {
        run_hash(&self.xor, &self.model, &self.train)
    }

    /// Hash tagging generated datasets.
    pub fn data_hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(&self.xor)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

pub fn run_hash(xor: &XorConfig, model: &ModelSpec, train: &TrainConfig) -> String {
    let v = serde_json::json!({ "xor": xor, "model": model, "train": train });
    sha256_hex(v.to_string().as_bytes())
}

/// Location of a parse error; serde's message names the offending key.
fn json_path(e: &serde_json::Error) -> String {
    format!("line {} column {}", e.line(), e.column())
}
