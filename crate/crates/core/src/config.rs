//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment. Values given later (for
//! example from the command line) override earlier ones. Every key a
//! command reads must be declared in [`KEYS`]; anything else is rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Environment variable naming the directory that relative data paths
/// (`train_dir`, `test_dir`, `lr_dir`, `hr_dir`) are resolved against.
pub const DATA_ROOT_ENV: &str = "DSRNET_DATA_ROOT";

/// Every recognized key with its default (empty means unset).
pub const KEYS: &[(&str, &str)] = &[
    ("batch", "64"),
    ("boundary", "clamp"),
    ("checkpoint", ""),
    ("checkpoint_every", "1000"),
    ("bicubic_only", "false"),
    ("data_root", ""),
    ("eps", "1e-5"),
    ("gate_hidden", "16"),
    ("gate_threshold", "0.75"),
    ("gate_train_mode", "soft_scale"),
    ("hr_dir", ""),
    ("input", ""),
    ("kink_margin", "50"),
    ("log_every", "1"),
    ("lr", "1e-4"),
    ("lr_dir", ""),
    ("lr_half_every", "400000"),
    ("lr_size", "256"),
    ("out_dir", ""),
    ("output", ""),
    ("patch", "64"),
    ("resume", ""),
    ("routing", "both"),
    ("runs", "10"),
    ("scale", "4"),
    ("seed", "0"),
    ("shave", ""),
    ("sizes", "256,512"),
    ("steps", "600000"),
    ("test_dir", ""),
    ("tolerance", "1e-4"),
    ("train_dir", ""),
    ("variant", "full"),
    ("warmup", "2"),
    ("width", "64"),
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if default_of(key).is_none() {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Whether the key was given explicitly rather than defaulted.
    pub fn is_set(&self, key: &str) -> bool {
        self.values.get(key).is_some_and(|v| !v.is_empty())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    /// Raw value, falling back to the default; `None` when unset.
    pub fn raw(&self, key: &str) -> Option<&str> {
        let v = match self.values.get(key) {
            Some(v) => v.as_str(),
            None => default_of(key).unwrap_or_else(|| panic!("undeclared config key {key:?}")),
        };
        (!v.is_empty()).then_some(v)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self
            .raw(key)
            .ok_or_else(|| Error::Config(format!("{key} is required")))?;
        raw.parse()
            .map_err(|e| Error::Config(format!("{key} = {raw:?}: {e}")))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(_) => self.get(key).map(Some),
        }
    }

    /// `true`/`false`, also accepting `1`/`0` and `yes`/`no`.
    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") | None => Ok(false),
            Some(other) => Err(Error::Config(format!("{key} = {other:?} is not a boolean"))),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key).unwrap_or("");
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| Error::Config(format!("{key} item {s:?}: {e}"))))
            .collect()
    }

    /// Path value; relative data directories are joined to `data_root` (or
    /// the environment's data root when that key is unset).
    pub fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        let Some(raw) = self.raw(key) else {
            return Ok(None);
        };
        let p = PathBuf::from(raw);
        let data_key = matches!(key, "train_dir" | "test_dir" | "lr_dir" | "hr_dir");
        if data_key && p.is_relative() {
            if let Some(root) = self.data_root() {
                return Ok(Some(root.join(p)));
            }
        }
        Ok(Some(p))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)?
            .ok_or_else(|| Error::Config(format!("{key} is required")))
    }

    fn data_root(&self) -> Option<PathBuf> {
        self.raw("data_root")
            .map(PathBuf::from)
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
    }

    /// Every key with its effective value, one `key = value` per line.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let v = if *k == "data_root" {
                self.data_root().map(|p| p.display().to_string()).unwrap_or_default()
            } else {
                self.raw(k).unwrap_or("").to_string()
            };
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn write_resolved(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.resolved())?;
        Ok(())
    }
}
