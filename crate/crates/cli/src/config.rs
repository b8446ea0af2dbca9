//! Experiment configuration: a flat JSON file plus `--set key=value`
//! overrides, with `MACAW_OUT` taking final precedence over the output
//! directory.

use std::path::Path;

use anyhow::{Context, Result};
use macaw_core::baselines::Method;
use macaw_core::envs::EnvKind;
use macaw_core::losses::LossConfig;
use macaw_core::meta::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::invalid;

/// Everything a run needs. One struct for all subcommands; each command
/// reads the fields it cares about.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Task family: velocity | direction | gain.
    pub env: String,
    /// Training method: macaw | meta-bc | mt-awr-ft | macaw-no-enriched |
    /// macaw-no-wt.
    pub method: String,
    pub train_tasks: usize,
    pub test_tasks: usize,
    pub episodes_per_task: usize,
    pub gamma: f64,
    /// Seed for task sampling and dataset generation.
    pub data_seed: u64,
    /// Seed for initialization, batch sampling, and evaluation.
    pub seed: u64,
    pub iterations: usize,
    pub task_batch: usize,
    pub batch_size: usize,
    pub n_inner: usize,
    pub outer_policy_lr: f64,
    pub outer_value_lr: f64,
    pub lr_lr: f64,
    pub outer_tail_frac: f64,
    pub temperature: f64,
    pub lambda: f64,
    pub adv_clip: f64,
    pub hidden: Vec<usize>,
    pub latent: usize,
    /// Evaluate on held-out tasks every this many iterations (0 = never).
    pub eval_every: usize,
    pub eval_rollouts: usize,
    /// Adaptation steps taken before post-adaptation evaluation.
    pub eval_adapt_steps: usize,
    /// Test-time optimizer steps for the multi-task baseline.
    pub finetune_steps: usize,
    /// Where datasets live (manifest plus one file per task).
    pub data_dir: String,
    /// Where run artifacts go (metrics, checkpoints, reports).
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let tc = TrainConfig::default();
        let lc = LossConfig::default();
        ExperimentConfig {
            env: "velocity".into(),
            method: "macaw".into(),
            train_tasks: 20,
            test_tasks: 5,
            episodes_per_task: 30,
            gamma: lc.gamma,
            data_seed: 42,
            seed: 0,
            iterations: tc.iterations,
            task_batch: tc.task_batch,
            batch_size: tc.batch_size,
            n_inner: tc.n_inner,
            outer_policy_lr: tc.outer_policy_lr,
            outer_value_lr: tc.outer_value_lr,
            lr_lr: tc.lr_lr,
            outer_tail_frac: tc.outer_tail_frac,
            temperature: lc.temperature,
            lambda: lc.lambda,
            adv_clip: lc.adv_clip,
            hidden: vec![100, 100, 100],
            latent: 32,
            eval_every: 0,
            eval_rollouts: 10,
            eval_adapt_steps: 1,
            finetune_steps: 20,
            data_dir: "data".into(),
            out_dir: "out".into(),
        }
    }
}

impl ExperimentConfig {
    /// Load a config: defaults, then the JSON file (if given), then `--set`
    /// overrides in order, then the `MACAW_OUT` environment variable.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<ExperimentConfig> {
        let mut value = serde_json::to_value(ExperimentConfig::default()).expect("default config");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            let file: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| crate::ValidationError(format!("config {}: {e}", p.display())))?;
            let serde_json::Value::Object(map) = file else {
                invalid!("config {} must be a JSON object", p.display());
            };
            let obj = value.as_object_mut().expect("default config is an object");
            for (k, v) in map {
                if !obj.contains_key(&k) {
                    invalid!("config {}: unknown field `{k}`", p.display());
                }
                obj.insert(k, v);
            }
        }
        for s in sets {
            apply_override(&mut value, s)?;
        }
        let mut cfg: ExperimentConfig = serde_json::from_value(value)
            .map_err(|e| crate::ValidationError(format!("config: {e}")))?;
        if let Ok(out) = std::env::var("MACAW_OUT") {
            if !out.is_empty() {
                cfg.out_dir = out;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind().is_none() {
            invalid!("unknown env `{}` (expected velocity | direction | gain)", self.env);
        }
        if self.method_tag().is_none() {
            invalid!(
                "unknown method `{}` (expected one of {})",
                self.method,
                Method::ALL.map(|m| m.tag()).join(" | ")
            );
        }
        if self.train_tasks == 0 || self.test_tasks == 0 {
            invalid!("train_tasks and test_tasks must be at least 1");
        }
        if self.episodes_per_task == 0 {
            invalid!("episodes_per_task must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            invalid!("gamma must lie in (0, 1], got {}", self.gamma);
        }
        if self.batch_size == 0 || self.task_batch == 0 || self.n_inner == 0 {
            invalid!("batch_size, task_batch, and n_inner must be at least 1");
        }
        if !(self.outer_tail_frac > 0.0 && self.outer_tail_frac <= 1.0) {
            invalid!("outer_tail_frac must lie in (0, 1], got {}", self.outer_tail_frac);
        }
        if !(self.temperature > 0.0) || !(self.adv_clip > 0.0) || self.lambda < 0.0 {
            invalid!("temperature and adv_clip must be positive, lambda non-negative");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.latent == 0 {
            invalid!("hidden layers and latent dimension must be non-empty and positive");
        }
        if self.eval_rollouts == 0 {
            invalid!("eval_rollouts must be at least 1");
        }
        Ok(())
    }

    pub fn kind(&self) -> Option<EnvKind> {
        EnvKind::from_tag(&self.env)
    }

    pub fn method_tag(&self) -> Option<Method> {
        Method::from_tag(&self.method)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            task_batch: self.task_batch,
            batch_size: self.batch_size,
            n_inner: self.n_inner,
            outer_policy_lr: self.outer_policy_lr,
            outer_value_lr: self.outer_value_lr,
            lr_lr: self.lr_lr,
            outer_tail_frac: self.outer_tail_frac,
            seed: self.seed,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            lambda: self.lambda,
            adv_clip: self.adv_clip,
            gamma: self.gamma,
            norm_eps: LossConfig::default().norm_eps,
        }
    }

    /// Task ids used for meta-training: `[0, train_tasks)`.
    pub fn train_ids(&self) -> Vec<usize> {
        (0..self.train_tasks).collect()
    }

    /// Held-out task ids: `[train_tasks, train_tasks + test_tasks)` —
    /// disjoint from the training ids by construction.
    pub fn test_ids(&self) -> Vec<usize> {
        (self.train_tasks..self.train_tasks + self.test_tasks).collect()
    }
}

/// Apply one `key=value` override; the value is parsed as JSON, falling
/// back to a bare string (so `--set env=velocity` works unquoted).
fn apply_override(value: &mut serde_json::Value, s: &str) -> Result<()> {
    let Some((key, raw)) = s.split_once('=') else {
        invalid!("--set expects key=value, got `{s}`");
    };
    let obj = value.as_object_mut().expect("config is an object");
    if !obj.contains_key(key) {
        invalid!("--set: unknown config field `{key}`");
    }
    let parsed = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    obj.insert(key.to_string(), parsed);
    Ok(())
}
