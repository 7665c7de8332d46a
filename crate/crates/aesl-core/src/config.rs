//! Experiment configuration: JSON-backed, every field defaulted except the
//! dataset source and the protocol.

use crate::data::GeneratorConfig;
use crate::decoupling::Activation;
use crate::error::{AeslError, Result};
use crate::numerics::adam::AdamConfig;
use crate::trainer::{LossWeights, ModelDims, SigmaPolicy, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[clap(rename_all = "kebab-case")]
pub enum Method {
    Aesl,
    Finetune,
    Lwf,
    Er,
    Rs,
    UpperBound,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Aesl => "aesl",
            Method::Finetune => "finetune",
            Method::Lwf => "lwf",
            Method::Er => "er",
            Method::Rs => "rs",
            Method::UpperBound => "upper-bound",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = AeslError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aesl" => Ok(Method::Aesl),
            "finetune" => Ok(Method::Finetune),
            "lwf" => Ok(Method::Lwf),
            "er" => Ok(Method::Er),
            "rs" => Ok(Method::Rs),
            "upper-bound" | "upper_bound" => Ok(Method::UpperBound),
            other => Err(AeslError::Config(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Generate a synthetic dataset from this config (persisted alongside
    /// the results for reproducibility).
    Generate(GeneratorConfig),
    /// Load an existing dataset manifest.
    Manifest(PathBuf),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub base: usize,
    pub increment: usize,
}

/// Architecture widths; the instance feature dimension comes from the data.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct DimsConfig {
    pub node_dim: usize,
    pub gin_hidden: usize,
    pub embed_dim: usize,
    pub latent_dim: usize,
    pub semantic_dim: usize,
}

impl Default for DimsConfig {
    fn default() -> Self {
        DimsConfig {
            node_dim: 32,
            gin_hidden: 64,
            embed_dim: 64,
            latent_dim: 64,
            semantic_dim: 64,
        }
    }
}

impl DimsConfig {
    pub fn to_model_dims(self, feature_dim: usize) -> ModelDims {
        ModelDims {
            feature_dim,
            node_dim: self.node_dim,
            gin_hidden: self.gin_hidden,
            embed_dim: self.embed_dim,
            latent_dim: self.latent_dim,
            semantic_dim: self.semantic_dim,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub beta: f64,
    pub sigma: SigmaPolicy,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub propagation_tolerance: f64,
    pub propagation_max_iters: usize,
    pub replay_capacity: usize,
    pub replay_sample: usize,
    pub activation: Activation,
    pub dims: DimsConfig,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lambda1: 1.0,
            lambda2: 0.4,
            lambda3: 0.1,
            beta: 0.95,
            sigma: SigmaPolicy::Median,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.9999,
            epochs: 100,
            batch_size: 64,
            propagation_tolerance: 1e-10,
            propagation_max_iters: 5000,
            replay_capacity: 500,
            replay_sample: 64,
            activation: Activation::Relu,
            dims: DimsConfig::default(),
        }
    }
}

impl HyperParams {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                epsilon: 1e-8,
                weight_decay: self.weight_decay,
            },
            beta: self.beta,
            sigma: self.sigma,
            propagation_tolerance: self.propagation_tolerance,
            propagation_max_iters: self.propagation_max_iters,
            replay_capacity: self.replay_capacity,
            replay_sample: self.replay_sample,
        }
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::Aesl, Method::Finetune]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("aesl-out")
}

fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub protocol: ProtocolConfig,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub hyper: HyperParams,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| AeslError::MissingFile(path.display().to_string()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| AeslError::Config(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(AeslError::Config("methods: at least one required".into()));
        }
        let mut sorted = self.methods.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.methods.len() {
            return Err(AeslError::Config("methods: duplicates are not allowed".into()));
        }
        if self.seeds.is_empty() {
            return Err(AeslError::Config("seeds: at least one required".into()));
        }
        if self.jobs == 0 {
            return Err(AeslError::Config("jobs: must be at least 1".into()));
        }
        if self.protocol.increment == 0 {
            return Err(AeslError::Config("protocol.increment: must be positive".into()));
        }
        let h = &self.hyper;
        for (name, v) in [
            ("hyper.lambda1", h.lambda1),
            ("hyper.lambda2", h.lambda2),
            ("hyper.lambda3", h.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(AeslError::Config(format!("{name}: must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&h.beta) {
            return Err(AeslError::Config("hyper.beta: must lie in [0, 1]".into()));
        }
        if h.learning_rate <= 0.0 {
            return Err(AeslError::Config("hyper.learning_rate: must be positive".into()));
        }
        if h.batch_size < 3 {
            return Err(AeslError::Config(
                "hyper.batch_size: must be at least 3 (similarity matrices need 3 rows)".into(),
            ));
        }
        match h.sigma {
            SigmaPolicy::Fixed(v) if v <= 0.0 => {
                return Err(AeslError::Config("hyper.sigma: fixed value must be positive".into()));
            }
            SigmaPolicy::MedianScaled(f) if f <= 0.0 => {
                return Err(AeslError::Config(
                    "hyper.sigma: median scale factor must be positive".into(),
                ));
            }
            _ => {}
        }
        if let DatasetSource::Generate(g) = &self.dataset {
            g.validate()
                .map_err(|e| AeslError::Config(format!("dataset.generate: {e}")))?;
        }
        Ok(())
    }

    /// Short hash over the fields that define the experiment (dataset,
    /// protocol, methods, seeds, hyperparameters); embedded in every output
    /// file so mixed outputs are detectable. Where results land and how many
    /// workers ran are execution details and stay out of the hash.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Identity<'a> {
            dataset: &'a DatasetSource,
            protocol: &'a ProtocolConfig,
            methods: &'a [Method],
            seeds: &'a [u64],
            hyper: &'a HyperParams,
        }
        let identity = Identity {
            dataset: &self.dataset,
            protocol: &self.protocol,
            methods: &self.methods,
            seeds: &self.seeds,
            hyper: &self.hyper,
        };
        let canonical = serde_json::to_string(&identity).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
