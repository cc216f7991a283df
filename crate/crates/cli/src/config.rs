//! Run configuration: a flat TOML table merged with command-line overrides.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use toml::Value;

use crate::CliError;

pub const CONFIG_ECHO: &str = "config.toml";

/// Fully resolved configuration of one run, written to `config.toml` in the
/// output directory. Running the same command with `--config` pointing at
/// an echo reproduces the run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub output: PathBuf,
    pub values: BTreeMap<String, Value>,
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::new();
        table.insert("command".into(), Value::String(self.command.clone()));
        table.insert("seed".into(), Value::Integer(self.seed as i64));
        table.insert(
            "output".into(),
            Value::String(self.output.display().to_string()),
        );
        for (k, v) in &self.values {
            table.insert(k.clone(), v.clone());
        }
        toml::to_string(&table).expect("flat tables always serialize")
    }
}

/// Reads a flat key/value config file. Nested tables are rejected.
pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, Value>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        CliError::Config(format!("{}: {}", path.display(), e.message()))
    })?;
    let mut out = BTreeMap::new();
    for (k, v) in table {
        if v.is_table() {
            return Err(CliError::Config(format!(
                "{}: key {k} is a table, config must be flat",
                path.display()
            )));
        }
        out.insert(k, v);
    }
    Ok(out)
}

/// Hands out typed values, filling defaults, and remembers everything it
/// resolved so the echo is complete.
pub struct Params {
    raw: BTreeMap<String, Value>,
    resolved: BTreeMap<String, Value>,
}

fn type_error(key: &str, want: &str, got: &Value) -> CliError {
    CliError::Config(format!("key {key}: expected {want}, got {got}"))
}

impl Params {
    pub fn new(raw: BTreeMap<String, Value>) -> Self {
        Self {
            raw,
            resolved: BTreeMap::new(),
        }
    }

    fn take(&mut self, key: &str) -> Option<Value> {
        self.raw.remove(key)
    }

    fn record(&mut self, key: &str, v: Value) {
        self.resolved.insert(key.to_string(), v);
    }

    pub fn u64(&mut self, key: &str, default: u64) -> Result<u64, CliError> {
        let v = match self.take(key) {
            None => default,
            Some(Value::Integer(i)) if i >= 0 => i as u64,
            Some(other) => return Err(type_error(key, "a non-negative integer", &other)),
        };
        self.record(key, Value::Integer(v as i64));
        Ok(v)
    }

    pub fn usize(&mut self, key: &str, default: usize) -> Result<usize, CliError> {
        Ok(self.u64(key, default as u64)? as usize)
    }

    pub fn f64(&mut self, key: &str, default: f64) -> Result<f64, CliError> {
        let v = match self.take(key) {
            None => default,
            Some(Value::Float(f)) => f,
            Some(Value::Integer(i)) => i as f64,
            Some(other) => return Err(type_error(key, "a number", &other)),
        };
        self.record(key, Value::Float(v));
        Ok(v)
    }

    pub fn bool(&mut self, key: &str, default: bool) -> Result<bool, CliError> {
        let v = match self.take(key) {
            None => default,
            Some(Value::Boolean(b)) => b,
            Some(other) => return Err(type_error(key, "true or false", &other)),
        };
        self.record(key, Value::Boolean(v));
        Ok(v)
    }

    pub fn string(&mut self, key: &str, default: &str) -> Result<String, CliError> {
        let v = self.opt_string(key)?.unwrap_or_else(|| default.to_string());
        self.record(key, Value::String(v.clone()));
        Ok(v)
    }

    pub fn opt_string(&mut self, key: &str) -> Result<Option<String>, CliError> {
        let v = match self.take(key) {
            None => None,
            Some(Value::String(s)) => Some(s),
            Some(other) => return Err(type_error(key, "a string", &other)),
        };
        if let Some(s) = &v {
            self.record(key, Value::String(s.clone()));
        }
        Ok(v)
    }

    pub fn required_string(&mut self, key: &str) -> Result<String, CliError> {
        self.opt_string(key)?
            .ok_or_else(|| CliError::Config(format!("missing required key {key}")))
    }

    pub fn required_path(&mut self, key: &str) -> Result<PathBuf, CliError> {
        let p = PathBuf::from(self.required_string(key)?);
        if !p.exists() {
            return Err(CliError::Config(format!(
                "{key}: {} does not exist",
                p.display()
            )));
        }
        Ok(p)
    }

    pub fn required_u64(&mut self, key: &str) -> Result<u64, CliError> {
        match self.raw.get(key) {
            None => Err(CliError::Config(format!("missing required key {key}"))),
            Some(_) => self.u64(key, 0),
        }
    }

    /// Accepts a TOML array of strings or a comma-separated string.
    pub fn string_list(&mut self, key: &str) -> Result<Vec<String>, CliError> {
        let v: Vec<String> = match self.take(key) {
            None => Vec::new(),
            Some(Value::String(s)) => s
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect(),
            Some(Value::Array(items)) => items
                .into_iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s),
                    other => Err(type_error(key, "a list of strings", &other)),
                })
                .collect::<Result<_, _>>()?,
            Some(other) => return Err(type_error(key, "a list of strings", &other)),
        };
        self.record(
            key,
            Value::Array(v.iter().cloned().map(Value::String).collect()),
        );
        Ok(v)
    }

    /// Fails on keys nobody asked for, then returns the resolved values.
    pub fn finish(self) -> Result<BTreeMap<String, Value>, CliError> {
        let unknown: BTreeSet<&String> = self.raw.keys().collect();
        if let Some(k) = unknown.into_iter().next() {
            return Err(CliError::Config(format!("unknown config key {k}")));
        }
        Ok(self.resolved)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(text: &str) -> BTreeMap<String, Value> {
        let t: toml::Table = text.parse().unwrap();
        t.into_iter().collect()
    }

    #[test]
    fn defaults_are_recorded() {
        let mut p = Params::new(raw("alpha = 0.5"));
        assert_eq!(p.f64("alpha", 0.1).unwrap(), 0.5);
        assert_eq!(p.u64("batch_size", 16).unwrap(), 16);
        let resolved = p.finish().unwrap();
        assert_eq!(resolved["batch_size"], Value::Integer(16));
        assert_eq!(resolved["alpha"], Value::Float(0.5));
    }

    #[test]
    fn stray_keys_are_rejected() {
        let p = Params::new(raw("alhpa = 0.5"));
        assert!(p.finish().unwrap_err().to_string().contains("alhpa"));
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig {
            command: "train".into(),
            seed: 13,
            output: "runs/a".into(),
            values: raw("alpha = 0.1\nablation = \"full\"\nlist = [\"a\", \"b\"]"),
        };
        let back = raw(&cfg.to_toml());
        assert_eq!(back["seed"], Value::Integer(13));
        assert_eq!(back["alpha"], Value::Float(0.1));
        assert_eq!(back["list"], cfg.values["list"]);
    }

    #[test]
    fn comma_lists_and_arrays_agree() {
        let mut a = Params::new(raw("c = \"x, y\""));
        let mut b = Params::new(raw("c = [\"x\", \"y\"]"));
        assert_eq!(a.string_list("c").unwrap(), b.string_list("c").unwrap());
    }
}
