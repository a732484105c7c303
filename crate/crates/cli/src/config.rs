//! Run configuration: flags override the `--config` file, which overrides the
//! per-generator defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Contents of a `--config` file. Every section is optional and may be
/// partial; missing keys fall back to the defaults.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub dataset: Option<Value>,
    pub seqnmf: Option<Value>,
    pub ci: Option<Value>,
    pub eval: Option<Value>,
    pub execution: Option<Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flag values that were actually given, keyed by config field name.
#[derive(Debug, Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0
                .insert(key.to_string(), serde_json::to_value(v).expect("flag values serialize"));
        }
        self
    }
}

/// `defaults`, then the keys of `file`, then `flags`.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: T, file: Option<&Value>, flags: &Overrides) -> Result<T> {
    let mut merged = match serde_json::to_value(defaults)? {
        Value::Object(m) => m,
        other => bail!("configuration defaults must be an object, got {other}"),
    };
    if let Some(file) = file {
        let Value::Object(patch) = file else {
            bail!("configuration section must be a JSON object, got {file}");
        };
        for (k, v) in patch {
            if !merged.contains_key(k) {
                bail!("unknown configuration key `{k}`");
            }
            merged.insert(k.clone(), v.clone());
        }
    }
    for (k, v) in &flags.0 {
        merged.insert(k.clone(), v.clone());
    }
    Ok(serde_json::from_value(Value::Object(merged))?)
}

/// Written as `run_manifest.json` by every command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub config: Value,
    pub outputs: Vec<String>,
}

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

impl RunManifest {
    pub fn new(command: &'static str, seed: u64, config: Value) -> Self {
        RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            inputs: Vec::new(),
            config,
            outputs: Vec::new(),
        }
    }

    pub fn write(&mut self, out: &Path) -> Result<PathBuf> {
        self.outputs.sort();
        self.outputs.dedup();
        let path = out.join(RUN_MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}
