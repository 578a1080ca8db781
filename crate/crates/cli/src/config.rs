//! Training configuration: built-in defaults, overlaid by an optional JSON
//! file, overlaid by command-line flags.

use clap::Args;
use prism_core::trainer::TrainConfig;
use serde_json::{json, Map, Value};

use crate::failure::Failure;

pub const DEFAULT_CONTEXT: usize = 48;
pub const DEFAULT_HORIZON: usize = 12;

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    /// JSON file with any subset of the training configuration [default: built-in defaults]
    #[arg(long)]
    pub config: Option<String>,
    /// Seed for the model and the denoiser [default: config value, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Context length L [default: config value, else 48]
    #[arg(long)]
    pub context: Option<usize>,
    /// Forecast horizon H [default: config value, else 12]
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Maximum training epochs [default: config value, else 10]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Early-stopping patience in epochs [default: config value, else 5]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Adam learning rate [default: config value, else 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Final rows held out for testing [default: config value, else H]
    #[arg(long)]
    pub holdout: Option<usize>,
    /// Step between consecutive training windows [default: config value, else 1]
    #[arg(long)]
    pub stride: Option<usize>,
    /// Diffusion denoiser training steps [default: config value, else 2000]
    #[arg(long)]
    pub denoiser_steps: Option<usize>,
    /// Train on the raw prefix without denoising [default: off]
    #[arg(long)]
    pub no_denoise: bool,
    /// Freeze one graph built from the whole training prefix [default: off]
    #[arg(long)]
    pub static_graph: bool,
}

fn read_json(path: &str) -> Result<Value, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::data(format!("{path}: {e}")))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{path}: invalid JSON: {e}")))?;
    if !value.is_object() {
        return Err(Failure::usage(format!(
            "{path}: expected a JSON object at the top level"
        )));
    }
    Ok(value)
}

/// Recursively copy `overlay` into `base`, rejecting keys the base lacks.
fn merge(base: &mut Value, overlay: &Value, at: &str) -> Result<(), Failure> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                let slot = b
                    .get_mut(k)
                    .ok_or_else(|| Failure::usage(format!("unknown config key '{path}'")))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (b, o) => {
            *b = o.clone();
            Ok(())
        }
    }
}

fn lookup<'a>(v: &'a Value, path: &[&str]) -> Option<&'a Value> {
    path.iter().try_fold(v, |v, k| v.get(k))
}

fn dim(file: &Value, key: &str, flag: Option<usize>, default: usize) -> Result<usize, Failure> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match lookup(file, &["model", key]) {
        Some(v) => v
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| Failure::usage(format!("config key 'model.{key}' must be a non-negative integer"))),
        None => Ok(default),
    }
}

impl TrainFlags {
    pub fn resolve(&self, channels: usize) -> Result<TrainConfig, Failure> {
        let file = match &self.config {
            Some(p) => read_json(p)?,
            None => Value::Object(Map::new()),
        };
        if let Some(c) = lookup(&file, &["model", "channels"]) {
            if c.as_u64() != Some(channels as u64) {
                return Err(Failure::data(format!(
                    "config sets model.channels = {c} but the data has {channels} columns"
                )));
            }
        }
        let context = dim(&file, "context", self.context, DEFAULT_CONTEXT)?;
        let horizon = dim(&file, "horizon", self.horizon, DEFAULT_HORIZON)?;
        let mut value = serde_json::to_value(TrainConfig::desk(context, horizon, channels))
            .map_err(|e| Failure::usage(e.to_string()))?;
        merge(&mut value, &file, "")?;
        let mut flags = json!({ "model": { "context": context, "horizon": horizon } });
        if let Some(v) = self.seed {
            flags["seed"] = json!(v);
        }
        if let Some(v) = self.max_epochs {
            flags["max_epochs"] = json!(v);
        }
        if let Some(v) = self.patience {
            flags["patience"] = json!(v);
        }
        if let Some(v) = self.lr {
            flags["lr"] = json!(v);
        }
        if let Some(v) = self.holdout {
            flags["holdout"] = json!(v);
        }
        if let Some(v) = self.stride {
            flags["window_stride"] = json!(v);
        }
        if let Some(v) = self.denoiser_steps {
            flags["denoiser"] = json!({ "steps": v });
        }
        if self.no_denoise {
            flags["denoise_enabled"] = json!(false);
        }
        if self.static_graph {
            flags["static_graph"] = json!(true);
        }
        merge(&mut value, &flags, "")?;
        let config: TrainConfig =
            serde_json::from_value(value).map_err(|e| Failure::usage(format!("configuration: {e}")))?;
        config.validate()?;
        Ok(config)
    }
}
