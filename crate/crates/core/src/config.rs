//! Run configuration: a flat TOML table whose defaults reproduce the
//! reference experiment (784-400-10, tau_I = 0.8, 100 epochs, batch 100).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::EngineConfig;
use crate::loss::{CountCondition, LossConfig};
use crate::neuron::NeuronParams;
use crate::optim::InitSpread;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Layer widths, input first.
    pub sizes: Vec<usize>,
    pub tau_i: f64,
    /// Leaky factor tau_I / tau_V; only 2 is supported.
    pub p: f64,
    pub t_out: f64,
    /// Earliest input spike time (full-intensity pixels).
    pub t_min: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub dead_fraction: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub n1: usize,
    pub n2: usize,
    pub single_spike: bool,
    pub init_spread: InitSpread,
    /// Use only the first `n` training samples; 0 means all.
    pub train_samples: usize,
    /// Use only the first `n` test samples; 0 means all.
    pub test_samples: usize,
    /// Evaluate on the test split every `n` epochs (0 disables; the last epoch is always evaluated).
    pub eval_every: usize,
    /// Rayon worker threads; 0 uses the global pool. Results do not depend on it.
    pub workers: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sizes: vec![784, 400, 10],
            tau_i: 0.8,
            p: 2.0,
            t_out: 1.0,
            t_min: 0.0,
            lambda: 0.01,
            sigma: 0.0001,
            dead_fraction: 0.1,
            lr: 0.001,
            epochs: 100,
            batch_size: 100,
            seed: 0,
            n1: EngineConfig::DEFAULT_N1,
            n2: EngineConfig::DEFAULT_N2,
            single_spike: false,
            init_spread: InitSpread::StdDev,
            train_samples: 0,
            test_samples: 0,
            eval_every: 1,
            workers: 0,
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn params(&self) -> Result<NeuronParams> {
        NeuronParams::new(self.tau_i, self.p)
    }

    pub fn engine(&self) -> Result<EngineConfig> {
        EngineConfig::from_t_out(self.n1, self.n2, self.t_out, self.single_spike, &self.params()?)
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            sigma: self.sigma,
            dead_fraction: self.dead_fraction,
            count_condition: CountCondition::FiredOnFewSamples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 || self.sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {:?}", self.sizes)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if !(self.t_min >= 0.0 && self.t_min < self.t_out) {
            return Err(Error::Config(format!("need 0 <= t_min < t_out, got {} and {}", self.t_min, self.t_out)));
        }
        self.loss().validate()?;
        self.engine()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig always serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }
}
