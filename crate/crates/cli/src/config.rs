//! Flat `key=value` run configuration over the typed library configs.
//!
//! Keys are dotted paths into [`RunConfig`], e.g. `scene_train.epochs=5` or
//! `synth.modality_dims=12,8`. Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use cinefuse::alignfuse::ModelConfig;
use cinefuse::dataio::SynthConfig;
use cinefuse::metrics::config_digest;
use cinefuse::sync::SyncConfig;
use cinefuse::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Movies synthesized when no `--data` directory is given.
    pub movies: usize,
    /// The last `held_out` movies (by manifest name) are evaluation data.
    pub held_out: usize,
    pub synth: SynthConfig,
    pub scene_model: ModelConfig,
    pub shot_model: ModelConfig,
    pub synopsis_model: ModelConfig,
    pub sync: SyncConfig,
    pub scene_train: TrainConfig,
    pub act_train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let dims = synth.modality_dims.clone();
        let text = *dims.last().expect("default has modalities");
        RunConfig {
            seed: 0,
            movies: 8,
            held_out: 2,
            scene_model: ModelConfig::scene_desk(dims.clone()),
            shot_model: ModelConfig::act_shot_desk(dims.clone()),
            synopsis_model: ModelConfig::synopsis_desk(text, dims.len()),
            sync: SyncConfig {
                proj_dim: 32,
                ..SyncConfig::default()
            },
            scene_train: TrainConfig::scene_desk(),
            act_train: TrainConfig::act_desk(),
            synth,
        }
    }
}

/// Keys filled in from the data or from `seed`; setting them is an error.
fn is_derived(key: &str) -> bool {
    key.ends_with(".modality_dims") && !key.starts_with("synth.") || key.ends_with("_train.seed")
}

impl RunConfig {
    /// Defaults, then the file at `path`, then `overrides` in order.
    pub fn resolve(
        path: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
    ) -> Result<Self, CliError> {
        let mut pairs = Vec::new();
        if let Some(p) = path {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", p.display())))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                pairs
                    .push(split_pair(line).map_err(|e| {
                        CliError::Config(format!("{}:{}: {e}", p.display(), n + 1))
                    })?);
            }
        }
        for o in overrides {
            pairs.push(split_pair(o).map_err(|e| CliError::Config(format!("--set {o}: {e}")))?);
        }
        let mut tree = serde_json::to_value(RunConfig::default()).expect("serializable");
        for (k, v) in &pairs {
            if is_derived(k) {
                return Err(CliError::Config(format!(
                    "`{k}` is derived and cannot be set"
                )));
            }
            set_path(&mut tree, k, v)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(tree).map_err(|e| CliError::Config(format!("config: {e}")))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.scene_train.seed = cfg.seed;
        cfg.act_train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate()?;
        self.sync.validate()?;
        self.scene_train.validate()?;
        self.act_train.validate()?;
        if self.movies == 0 {
            return Err(CliError::Config("movies must be positive".into()));
        }
        Ok(())
    }

    /// Sorted `key=value` lines, one per settable leaf; loads back unchanged.
    pub fn render(&self) -> String {
        let mut flat = BTreeMap::new();
        flatten(
            "",
            &serde_json::to_value(self).expect("serializable"),
            &mut flat,
        );
        flat.into_iter()
            .filter(|(k, _)| !is_derived(k))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn digest(&self) -> String {
        config_digest(&self.render())
    }
}

fn split_pair(line: &str) -> Result<(String, String), String> {
    let (k, v) = line.split_once('=').ok_or("expected key=value")?;
    let k = k.trim();
    if k.is_empty() {
        return Err("empty key".into());
    }
    Ok((k.to_string(), v.trim().to_string()))
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(scalar_text).collect();
            out.insert(prefix.to_string(), parts.join(","));
        }
        other => {
            out.insert(prefix.to_string(), scalar_text(other));
        }
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn set_path(tree: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let unknown = || CliError::Config(format!("unknown key `{key}`"));
    let mut node = tree;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(unknown)?;
    }
    let parsed = match &*node {
        Value::Object(_) => {
            return Err(CliError::Config(format!(
                "`{key}` is a section, not a value"
            )))
        }
        Value::Array(items) => {
            let like = items.first().cloned().unwrap_or(Value::Number(0u64.into()));
            let parts = if raw.is_empty() {
                Vec::new()
            } else {
                raw.split(',').collect()
            };
            Value::Array(
                parts
                    .iter()
                    .map(|p| parse_like(&like, p.trim(), key))
                    .collect::<Result<_, _>>()?,
            )
        }
        other => parse_like(other, raw, key)?,
    };
    *node = parsed;
    Ok(())
}

fn parse_like(like: &Value, raw: &str, key: &str) -> Result<Value, CliError> {
    let bad = |what: &str| CliError::Config(format!("`{key}`: `{raw}` is not {what}"));
    Ok(match like {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Number(n) if n.is_u64() => Value::Number(
            raw.parse::<u64>()
                .map_err(|_| bad("a non-negative integer"))?
                .into(),
        ),
        Value::Number(_) => {
            let f: f64 = raw.parse().map_err(|_| bad("a number"))?;
            Value::Number(Number::from_f64(f).ok_or_else(|| bad("a finite number"))?)
        }
        _ => Value::String(raw.to_string()),
    })
}
