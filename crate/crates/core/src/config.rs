//! JSON run configuration.
//!
//! ```json
//! { "scenario": "cjs", "K": 10, "T": 100, "p": 0.14, "alpha": 0.5,
//!   "beta": 0.3, "gamma": 10, "b_low": 0.05, "b_high": 0.1 }
//! ```
//!
//! Model keys are required; solver keys (`Gamma`, `eta1`, ...) default to the
//! values below. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{tol, CostModel, Scenario, SystemParams};
use crate::saddle::{KernelMode, SaddleConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub scenario: Scenario,
    #[serde(rename = "K")]
    pub buffer: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub p: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub b_low: f64,
    pub b_high: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m0: Option<Vec<f64>>,
    #[serde(rename = "Gamma", default)]
    pub gamma_reg: f64,
    #[serde(default = "default_eta1")]
    pub eta1: f64,
    #[serde(default = "default_eta2")]
    pub eta2: f64,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(rename = "minibatch_I", default = "default_minibatch")]
    pub minibatch: usize,
    #[serde(default = "default_tail_eps")]
    pub tail_eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "N", default = "default_n")]
    pub n: usize,
    /// Overrides `C_s`, one entry per state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage_cost: Option<Vec<f64>>,
    /// Overrides `C_p` for the low and high rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub processing_cost: Option<[f64; 2]>,
    #[serde(default)]
    pub kernel_mode: KernelMode,
    #[serde(default)]
    pub clamp_nonnegative: bool,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

fn default_eta1() -> f64 {
    0.1
}
fn default_eta2() -> f64 {
    0.01
}
fn default_iters() -> usize {
    50_000
}
fn default_minibatch() -> usize {
    10
}
fn default_tail_eps() -> f64 {
    tol::TAIL_EPS
}
fn default_n() -> usize {
    1000
}
fn default_record_every() -> usize {
    100
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Config reproducing a [`SystemParams`] with default solver settings.
    pub fn from_params(params: &SystemParams) -> Self {
        Config {
            scenario: params.scenario,
            buffer: params.buffer,
            horizon: params.horizon,
            p: params.p,
            alpha: params.alpha,
            beta: params.beta,
            gamma: params.gamma,
            b_low: params.b_low,
            b_high: params.b_high,
            m0: Some(params.m0.clone()),
            gamma_reg: 0.0,
            eta1: default_eta1(),
            eta2: default_eta2(),
            iters: default_iters(),
            minibatch: default_minibatch(),
            tail_eps: default_tail_eps(),
            seed: 0,
            n: default_n(),
            storage_cost: None,
            processing_cost: None,
            kernel_mode: KernelMode::Fresh,
            clamp_nonnegative: false,
            record_every: default_record_every(),
        }
    }

    /// Validated model parameters.
    pub fn params(&self) -> Result<SystemParams> {
        SystemParams {
            buffer: self.buffer,
            horizon: self.horizon,
            p: self.p,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            b_low: self.b_low,
            b_high: self.b_high,
            scenario: self.scenario,
            m0: self.m0.clone().unwrap_or_else(|| SystemParams::empty_start(self.buffer)),
        }
        .validate()
    }

    /// Default costs with any table overrides applied.
    pub fn costs(&self, params: &SystemParams) -> Result<CostModel> {
        let mut costs = CostModel::default_for(params);
        if let Some(storage) = &self.storage_cost {
            costs.storage = storage.clone();
        }
        if let Some(processing) = self.processing_cost {
            costs.processing = processing;
        }
        costs.validate(params)?;
        Ok(costs)
    }

    pub fn saddle(&self) -> SaddleConfig {
        SaddleConfig {
            gamma_reg: self.gamma_reg,
            eta1: self.eta1,
            eta2: self.eta2,
            iters: self.iters,
            minibatch: self.minibatch,
            seed: self.seed,
            record_every: self.record_every,
            reference: None,
            kernel_mode: self.kernel_mode,
            clamp_nonnegative: self.clamp_nonnegative,
        }
    }
}
