//! Top-level configuration shared by the CLI and the service.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ann::{PqConfig, DEFAULT_K};
use crate::error::{Error, Result};
use crate::eval::PerturbBenchConfig;
use crate::intent::IntentConfig;
use crate::perturb::BackpropConfig;
use crate::pipeline::PipelineConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    /// Results per search when the request leaves `k` out.
    pub k: usize,
    /// Clusters per search when the request leaves `m` out.
    pub m: usize,
    /// Upper bound on a requested `k`.
    pub max_k: usize,
    /// Idle sessions are dropped after this long.
    pub session_ttl_secs: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            k: DEFAULT_K,
            m: 3,
            max_k: DEFAULT_K,
            session_ttl_secs: 30 * 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub ann: PqConfig,
    pub intent: IntentConfig,
    pub perturb: BackpropConfig,
    pub service: ServiceConfig,
    pub bench: PerturbBenchConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pipeline: PipelineConfig::default(),
            ann: PqConfig {
                rerank: DEFAULT_K,
                ..PqConfig::default()
            },
            intent: IntentConfig::default(),
            perturb: BackpropConfig::default(),
            service: ServiceConfig::default(),
            bench: PerturbBenchConfig::default(),
        }
    }
}

impl AppConfig {
    /// Defaults with the reduced training pipeline.
    pub fn quick() -> Self {
        Self {
            pipeline: PipelineConfig::quick(),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(format!("config {}", path.display())));
        }
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("config {}: {e}", path.display())))
    }

    /// Propagates one seed into every component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pipeline = self.pipeline.with_seed(seed);
        self.ann.seed = seed;
        self.intent.seed = seed;
        self.bench.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.service;
        if s.m == 0 || s.k < s.m || s.max_k < s.k {
            return Err(Error::invalid(format!(
                "service needs max_k ≥ k ≥ m ≥ 1, got max_k {} k {} m {}",
                s.max_k, s.k, s.m
            )));
        }
        Ok(())
    }
}
