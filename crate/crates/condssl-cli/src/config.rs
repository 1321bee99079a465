//! Run configuration: a TOML file with one section per module, merged over
//! library defaults, with dotted-path command-line overrides on top.
//! Precedence is CLI > file > defaults; unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use condssl::augpipe::AugmentationPolicy;
use condssl::condproj::ConditioningSpec;
use condssl::datahub::DatasetRef;
use condssl::nn::BackboneSpec;
use condssl::sslcore::{Method, MethodConfig};
use condssl::trainer::{PretrainSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::CliError;

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

/// Fully resolved configuration; this exact struct is what run snapshots
/// serialize, so a snapshot is always a complete, rerunnable config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetRef,
    pub method: MethodConfig,
    pub conditioning: ConditioningSpec,
    pub backbone: BackboneSpec,
    pub augment: AugmentationPolicy,
    pub train: TrainConfig,
    /// Parent directory for per-run output directories.
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

impl RunConfig {
    pub fn pretrain_spec(&self) -> PretrainSpec {
        PretrainSpec {
            method: self.method.clone(),
            conditioning: self.conditioning.clone(),
            backbone: self.backbone.clone(),
            augment: self.augment.clone(),
            train: self.train.clone(),
        }
    }

    /// First 8 hex chars of the SHA-256 of the canonical snapshot text.
    pub fn short_hash(&self) -> Result<String, CliError> {
        let text = self.snapshot_toml()?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(digest[..4].iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn snapshot_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self)
            .map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))
    }
}

/// A `--section.key=value` argument. Values parse as TOML when possible and
/// fall back to strings, so `--train.epochs=5`, `--conditioning.mode=none`,
/// and `--augment.crop_scale=[0.5,1.0]` all work.
#[derive(Debug, Clone)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

/// Splits dotted-path overrides out of raw arguments, leaving everything
/// else for the regular flag parser. Only `--a.b...=v` shapes qualify: an
/// override needs at least one dot before the equals sign.
pub fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<Override>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for arg in args {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let Some((key, raw)) = body.split_once('=') else {
            rest.push(arg);
            continue;
        };
        let is_path = key.contains('.')
            && key
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.')
            && !key.starts_with('.')
            && !key.ends_with('.');
        if !is_path {
            rest.push(format!("--{key}={raw}"));
            continue;
        }
        let value = toml::from_str::<Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        overrides.push(Override { path: key.split('.').map(str::to_string).collect(), value });
    }
    (rest, overrides)
}

/// Inserts an override into a TOML table, creating intermediate tables.
fn apply_override(table: &mut Table, ov: &Override) -> Result<(), CliError> {
    let mut cur = table;
    for seg in &ov.path[..ov.path.len() - 1] {
        let entry = cur.entry(seg.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            CliError::Usage(format!(
                "override path {} crosses the non-table key {seg}",
                ov.path.join(".")
            ))
        })?;
    }
    cur.insert(ov.path.last().expect("nonempty path").clone(), ov.value.clone());
    Ok(())
}

/// Recursive merge: `over` wins, tables merge key-by-key, everything else
/// replaces wholesale.
fn deep_merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => deep_merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    Value::try_from(v).expect("library configs serialize to TOML")
}

/// Library defaults for every section except `data`, which has no default
/// and must come from the file. Method defaults depend on the method name.
fn default_table(method: Method) -> Table {
    let mut t = Table::new();
    t.insert("method".into(), to_value(&MethodConfig::defaults(method)));
    t.insert("conditioning".into(), to_value(&ConditioningSpec::default()));
    t.insert("backbone".into(), to_value(&BackboneSpec::default()));
    t.insert("augment".into(), to_value(&AugmentationPolicy::default()));
    t.insert("train".into(), to_value(&TrainConfig::default()));
    t.insert("out".into(), Value::String("runs".into()));
    t
}

/// Reads, overrides, merges, and strictly deserializes a run config.
pub fn load_config(path: &Path, overrides: &[Override]) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut user: Table = toml::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid TOML in {}: {e}", path.display())))?;
    for ov in overrides {
        apply_override(&mut user, ov)?;
    }
    let method = match user.get("method").and_then(|m| m.get("method")) {
        Some(v) => v
            .clone()
            .try_into::<Method>()
            .map_err(|e| CliError::Usage(format!("invalid method.method: {e}")))?,
        None => Method::Simclr,
    };
    let mut merged = default_table(method);
    deep_merge(&mut merged, user);
    Value::Table(merged)
        .try_into::<RunConfig>()
        .map_err(|e| CliError::Usage(format!("invalid config: {e}")))
}
