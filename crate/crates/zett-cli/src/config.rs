use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use zett_core::model::{ModelConfig, TrainConfig};
use zett_core::pipeline::{Mode, PredictionConfig};

/// Every tunable the CLI exposes, merged from defaults, an optional JSON
/// config file with flat dotted keys, and flag overrides (in that order).
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub predict: PredictionConfig,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            predict: PredictionConfig::default(),
            embed_dim: 256,
            seed: 0,
        }
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64().with_context(|| format!("config key {key} expects a number, got {v}"))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|n| n as usize)
        .with_context(|| format!("config key {key} expects a non-negative integer, got {v}"))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().with_context(|| format!("config key {key} expects a boolean, got {v}"))
}

impl RunConfig {
    /// Applies one flat dotted key from a config file.
    pub fn apply(&mut self, key: &str, value: &Value) -> Result<()> {
        match key {
            "model.d_model" => self.model.d_model = as_usize(key, value)?,
            "model.heads" => self.model.heads = as_usize(key, value)?,
            "model.encoder_layers" => self.model.encoder_layers = as_usize(key, value)?,
            "model.decoder_layers" => self.model.decoder_layers = as_usize(key, value)?,
            "model.ffn_dim" => self.model.ffn_dim = as_usize(key, value)?,
            "model.max_input_len" => self.model.max_input_len = as_usize(key, value)?,
            "model.max_output_len" => self.model.max_output_len = as_usize(key, value)?,
            "model.dropout" => self.model.dropout = as_f64(key, value)?,
            "train.epochs" => self.train.epochs = as_usize(key, value)?,
            "train.batch_size" => self.train.batch_size = as_usize(key, value)?,
            "train.learning_rate" => self.train.learning_rate = as_f64(key, value)?,
            "train.warmup_ratio" => self.train.warmup_ratio = as_f64(key, value)?,
            "train.weight_decay" => self.train.weight_decay = as_f64(key, value)?,
            "decode.beam_size" => self.predict.decode.beam_size = as_usize(key, value)?,
            "decode.max_output_len" => self.predict.decode.max_output_len = as_usize(key, value)?,
            "decode.constrain_vocab" => self.predict.decode.constrain_vocab = as_bool(key, value)?,
            "decode.greedy" => self.predict.decode.greedy = as_bool(key, value)?,
            "decode.max_candidates" => self.predict.decode.max_candidates = as_usize(key, value)?,
            "decode.score_excludes_sentinels" => {
                self.predict.decode.score_excludes_sentinels = as_bool(key, value)?
            }
            "filter.delta" => self.predict.filter.delta = as_f64(key, value)?,
            "filter.fallback_top1" => self.predict.filter.fallback_top1 = as_bool(key, value)?,
            "predict.mode" => {
                self.predict.mode = match value.as_str() {
                    Some("single") => Mode::Single,
                    Some("multi") => Mode::Multi,
                    _ => bail!("config key predict.mode expects \"single\" or \"multi\", got {value}"),
                }
            }
            "predict.multi_threshold" => self.predict.multi_threshold = as_f64(key, value)?,
            "embedder.dim" => self.embed_dim = as_usize(key, value)?,
            "seed" => {
                self.seed = value
                    .as_u64()
                    .with_context(|| format!("config key seed expects an integer, got {value}"))?
            }
            other => bail!("unknown config key {other}"),
        }
        Ok(())
    }

    /// Loads a flat dotted-key JSON config file over the defaults.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let map: Map<String, Value> = serde_json::from_str(&text)
            .with_context(|| format!("config file {} must be a JSON object", path.display()))?;
        let mut cfg = RunConfig::default();
        for (key, value) in &map {
            cfg.apply(key, value)?;
        }
        Ok(cfg)
    }

    /// The same flat dotted-key shape the config file uses, fully resolved.
    pub fn to_flat_json(&self) -> Value {
        json!({
            "model.d_model": self.model.d_model,
            "model.heads": self.model.heads,
            "model.encoder_layers": self.model.encoder_layers,
            "model.decoder_layers": self.model.decoder_layers,
            "model.ffn_dim": self.model.ffn_dim,
            "model.max_input_len": self.model.max_input_len,
            "model.max_output_len": self.model.max_output_len,
            "model.dropout": self.model.dropout,
            "train.epochs": self.train.epochs,
            "train.batch_size": self.train.batch_size,
            "train.learning_rate": self.train.learning_rate,
            "train.warmup_ratio": self.train.warmup_ratio,
            "train.weight_decay": self.train.weight_decay,
            "decode.beam_size": self.predict.decode.beam_size,
            "decode.max_output_len": self.predict.decode.max_output_len,
            "decode.constrain_vocab": self.predict.decode.constrain_vocab,
            "decode.greedy": self.predict.decode.greedy,
            "decode.max_candidates": self.predict.decode.max_candidates,
            "decode.score_excludes_sentinels": self.predict.decode.score_excludes_sentinels,
            "filter.delta": self.predict.filter.delta,
            "filter.fallback_top1": self.predict.filter.fallback_top1,
            "predict.mode": match self.predict.mode { Mode::Single => "single", Mode::Multi => "multi" },
            "predict.multi_threshold": self.predict.multi_threshold,
            "embedder.dim": self.embed_dim,
            "seed": self.seed,
        })
    }
}

/// Per-run bookkeeping: which files went in, which came out, and any
/// headline numbers. Flushed to `--run-dir` as `resolved_config.json` plus
/// `manifest.json` so a run can be reproduced byte-for-byte.
pub struct RunContext {
    command: String,
    run_dir: Option<PathBuf>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    results: Map<String, Value>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing input {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

impl RunContext {
    pub fn new(command: &str, run_dir: Option<PathBuf>) -> Result<RunContext> {
        if let Some(dir) = &run_dir {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("creating run dir {}", dir.display()))?;
        }
        Ok(RunContext {
            command: command.to_string(),
            run_dir,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            results: Map::new(),
        })
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Outputs are hashed after they are written.
    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn record_result(&mut self, key: &str, value: Value) {
        self.results.insert(key.to_string(), value);
    }

    /// Writes `resolved_config.json` and `manifest.json` when a run dir was
    /// requested. A no-op otherwise.
    pub fn finish(self, resolved: &RunConfig) -> Result<()> {
        let Some(dir) = &self.run_dir else { return Ok(()) };
        let config_path = dir.join("resolved_config.json");
        std::fs::write(&config_path, format!("{:#}\n", resolved.to_flat_json()))
            .with_context(|| format!("writing {}", config_path.display()))?;
        let manifest = json!({
            "command": self.command,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "results": Value::Object(self.results),
        });
        let manifest_path = dir.join("manifest.json");
        std::fs::write(&manifest_path, format!("{manifest:#}\n"))
            .with_context(|| format!("writing {}", manifest_path.display()))?;
        Ok(())
    }
}
