//! Layered run configuration: built-in defaults, then `--config` file, then
//! flags. The merged result is echoed into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{Error, Result};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_VAR: &str = "DISPARITY_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const RUN_CONFIG_FILE: &str = "run_config.toml";

/// `$DISPARITY_OUTPUT_ROOT/<command>`, or `runs/<command>`.
pub fn default_out(command: &str) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_VAR)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
    root.join(command)
}

/// Flag values keyed by dotted paths into the config document.
#[derive(Debug, Default)]
pub struct Overrides(Table);

impl Overrides {
    pub fn set(&mut self, path: &str, value: impl Into<Value>) {
        let mut parts: Vec<&str> = path.split('.').collect();
        let leaf = parts.pop().expect("non-empty path");
        let mut table = &mut self.0;
        for p in parts {
            table = table
                .entry(p)
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("override paths never cross a scalar");
        }
        table.insert(leaf.to_string(), value.into());
    }

    pub fn opt(&mut self, path: &str, value: Option<impl Into<Value>>) {
        if let Some(v) = value {
            self.set(path, v);
        }
    }

    pub fn path(&mut self, key: &str, value: &Option<PathBuf>) {
        if let Some(p) = value {
            self.set(key, p.display().to_string());
        }
    }

    pub fn list<T: Clone + Into<Value>>(&mut self, key: &str, values: &[T]) {
        if !values.is_empty() {
            self.set(key, Value::Array(values.iter().cloned().map(Into::into).collect()));
        }
    }
}

fn deep_merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => deep_merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn load_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.parse::<Table>()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Merges `defaults < file < flags` and deserializes the result.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Path>, flags: Overrides) -> Result<T> {
    let mut table = Table::try_from(defaults).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = file {
        deep_merge(&mut table, load_table(path)?);
    }
    deep_merge(&mut table, flags.0);
    T::deserialize(Value::Table(table)).map_err(|e| Error::Config(e.to_string()))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    write_text(path, &text)
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Writes the resolved config next to the outputs it produced.
pub fn echo<T: Serialize>(dir: &Path, config: &T) -> Result<()> {
    write_toml(&dir.join(RUN_CONFIG_FILE), config)
}
