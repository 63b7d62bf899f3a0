//! Flat run configuration: presets, TOML files, and `key=value` overrides.
//!
//! Resolution order is preset defaults, then the config file, then each
//! `--set` override in command-line order. The resolved configuration is
//! hashed (SHA-256 of its canonical JSON) for the run manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use skybid_core::env::ScenarioConfig;
use skybid_core::estimator::EstimatorConfig;
use skybid_core::fedtrain::TrainConfig;
use skybid_core::filter::FilterConfig;

use crate::CliError;

pub const DEFAULT_PRESET: &str = "desk";

/// Action dimension `2·K·H` of the reference setting (`K = 4`, `H = 6`).
const REFERENCE_ACTION_DIM: i64 = 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub n_sps: usize,
    pub n_hotspots: usize,
    pub n_services: usize,
    pub horizon: usize,
    pub compute_budget_hz: f64,
    pub bandwidth_budget_hz: f64,
    pub unit_cost_w: f64,
    pub winner_bonus_j: f64,
    /// `0` derives the penalty delay from the scenario.
    pub penalty_delay_s: f64,
    pub epochs: usize,
    pub batch_min: usize,
    pub batch_max: usize,
    pub mini_batch: usize,
    pub learning_rate: f64,
    pub optimizer: String,
    pub byz_ids: Vec<usize>,
    pub byz_noise_scale: f64,
    pub byz_fraction_bound: f64,
    pub filter_mode: String,
    pub discount: f64,
    pub advantage_eps: f64,
    pub delta: f64,
    pub omega_eps: f64,
    pub ratio: String,
    pub weight_clip: f64,
    pub hidden_dim: usize,
    /// Write `params_epochNNNN.bin` every this many epochs (0 = final only).
    pub snapshot_every: usize,
}

impl RunConfig {
    fn base(preset: &str) -> Self {
        Self {
            preset: preset.to_string(),
            seed: 0,
            n_sps: 5,
            n_hotspots: 6,
            n_services: 4,
            horizon: 30,
            compute_budget_hz: 800e9,
            bandwidth_budget_hz: 800e6,
            unit_cost_w: 381.0,
            winner_bonus_j: 3000.0,
            penalty_delay_s: 0.0,
            epochs: 68,
            batch_min: 120,
            batch_max: 130,
            mini_batch: 64,
            learning_rate: 9e-5,
            optimizer: "adam".into(),
            byz_ids: vec![3, 4],
            byz_noise_scale: 10.0,
            byz_fraction_bound: 0.4,
            filter_mode: "dtbf".into(),
            discount: 0.9,
            advantage_eps: 1e-8,
            delta: 0.5,
            omega_eps: 1.0,
            ratio: "unbiased".into(),
            weight_clip: 10.0,
            hidden_dim: 64,
            snapshot_every: 0,
        }
    }

    /// Built-in settings by name.
    pub fn preset(name: &str) -> Result<Self, CliError> {
        let mut c = Self::base(name);
        let last_two = |n: usize| vec![n - 2, n - 1];
        match name {
            "table1-suburban" | "5sp-2byz" => {}
            "5sp-1byz" => {
                c.byz_ids = vec![4];
                c.byz_fraction_bound = 0.2;
            }
            "5sp-0byz" => {
                c.byz_ids = vec![];
                c.byz_fraction_bound = 0.0;
            }
            "6sp-2byz" => {
                c.n_sps = 6;
                c.byz_ids = last_two(6);
                c.byz_fraction_bound = 2.0 / 6.0;
            }
            "7sp-2byz" => {
                c.n_sps = 7;
                c.byz_ids = last_two(7);
                c.byz_fraction_bound = 2.0 / 7.0;
            }
            "5sp-6svc" => c.n_services = 6,
            "5sp-8svc" => c.n_services = 8,
            "5sp-8hot" => c.n_hotspots = 8,
            "5sp-10hot" => c.n_hotspots = 10,
            "desk" => {
                c.n_sps = 3;
                c.n_hotspots = 2;
                c.n_services = 2;
                c.horizon = 10;
                c.epochs = 100;
                c.batch_min = 16;
                c.batch_max = 16;
                c.mini_batch = 8;
                c.learning_rate = 1e-3;
                c.byz_ids = vec![];
                c.byz_fraction_bound = 0.0;
            }
            "desk-byz" => {
                c.n_hotspots = 2;
                c.n_services = 2;
                c.horizon = 10;
                c.epochs = 100;
                c.batch_min = 128;
                c.batch_max = 128;
                c.mini_batch = 8;
                c.learning_rate = 1e-3;
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown preset `{other}`; known presets: {}",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(c)
    }

    /// Extra action dimensions relative to the reference `H = 6, K = 4`.
    pub fn action_dim_delta(&self) -> i64 {
        2 * (self.n_services * self.n_hotspots) as i64 - REFERENCE_ACTION_DIM
    }

    /// Preset, then `file`, then `overrides` (`key=value`, value parsed as a
    /// TOML value and falling back to a bare string).
    pub fn resolve(
        preset: Option<&str>,
        file: Option<&Path>,
        overrides: &[String],
    ) -> Result<Self, CliError> {
        let mut table = toml::Table::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
            table = text
                .parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("parsing {}: {e}", path.display())))?;
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{item}` is not key=value")))?;
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.trim().to_string(), value);
        }
        let name = match (preset, table.get("preset")) {
            (Some(p), _) => p.to_string(),
            (None, Some(toml::Value::String(p))) => p.clone(),
            (None, Some(_)) => return Err(CliError::Config("`preset` must be a string".into())),
            (None, None) => DEFAULT_PRESET.to_string(),
        };
        table.insert("preset".into(), toml::Value::String(name.clone()));
        let base = Self::preset(&name)?;
        let mut merged = toml::Table::try_from(&base)
            .map_err(|e| CliError::Config(format!("encoding preset: {e}")))?;
        for (k, v) in table {
            merged.insert(k, v);
        }
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        cfg.to_core()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always encodes")
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config encodes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn scenario(&self) -> ScenarioConfig {
        let mut s = ScenarioConfig::reference(
            self.n_sps,
            self.n_hotspots,
            self.n_services,
            self.horizon,
            self.seed,
        );
        s.budgets_compute_hz = vec![vec![self.compute_budget_hz; self.n_services]; self.n_sps];
        s.budgets_bandwidth_hz = vec![vec![self.bandwidth_budget_hz; self.n_services]; self.n_sps];
        s.utility.unit_cost_w = vec![vec![self.unit_cost_w; self.n_services]; self.n_sps];
        s.utility.winner_bonus_j = vec![vec![self.winner_bonus_j; self.n_services]; self.n_sps];
        s.utility.penalty_delay_s = if self.penalty_delay_s > 0.0 {
            self.penalty_delay_s
        } else {
            s.default_penalty_delay()
        };
        s
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let parse_err = |e: skybid_core::Error| CliError::Config(e.to_string());
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_range: (self.batch_min, self.batch_max),
            mini_batch: self.mini_batch,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer.parse().map_err(parse_err)?,
            byz_node_ids: self.byz_ids.clone(),
            byz_noise_scale: self.byz_noise_scale,
            filter_mode: self.filter_mode.parse().map_err(parse_err)?,
            estimator: EstimatorConfig {
                discount: self.discount,
                advantage_eps: self.advantage_eps,
            },
            filter: FilterConfig {
                delta: self.delta,
                omega_eps: self.omega_eps,
                byz_fraction_bound: self.byz_fraction_bound,
            },
            ratio: self.ratio.parse().map_err(parse_err)?,
            weight_clip: self.weight_clip,
            hidden_dim: self.hidden_dim,
            seed: self.seed,
        })
    }

    /// Validated core configurations.
    pub fn to_core(&self) -> Result<(ScenarioConfig, TrainConfig), CliError> {
        let scenario = self.scenario();
        scenario
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let train = self.train_config()?;
        train
            .validate(self.n_sps)
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok((scenario, train))
    }
}

pub const PRESETS: &[&str] = &[
    "table1-suburban",
    "5sp-2byz",
    "5sp-1byz",
    "5sp-0byz",
    "6sp-2byz",
    "7sp-2byz",
    "5sp-6svc",
    "5sp-8svc",
    "5sp-8hot",
    "5sp-10hot",
    "desk",
    "desk-byz",
];
