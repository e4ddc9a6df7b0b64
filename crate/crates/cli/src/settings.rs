//! Flat `key = value` config files layered under command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use signspot_core::{Error, Result};

/// Values from a config file; each key must be consumed by the command.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    used: Vec<String>,
    effective: Vec<(String, String)>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut file = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("config line {}: expected `key = value`", n + 1))
            })?;
            if file.insert(normalize(k), v.trim().to_string()).is_some() {
                return Err(Error::InvalidConfig(format!("config line {}: duplicate key `{}`", n + 1, k.trim())));
            }
        }
        Ok(Self {
            file,
            ..Default::default()
        })
    }

    fn lookup<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.used.push(key.to_string());
        match (flag, self.file.get(key)) {
            (Some(v), _) => Ok(Some(v)),
            (None, Some(raw)) => raw
                .parse()
                .map(Some)
                .map_err(|e| Error::InvalidConfig(format!("config key `{key}`: {e}"))),
            (None, None) => Ok(None),
        }
    }

    /// Flag value if given, else the file value, else `default`.
    pub fn pick<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let key = normalize(key);
        let value = self.lookup(&key, flag)?.unwrap_or(default);
        self.effective.push((key, value.to_string()));
        Ok(value)
    }

    /// Like [`Settings::pick`] for settings without a default.
    pub fn require<T>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let key = normalize(key);
        let value = self.lookup(&key, flag)?.ok_or_else(|| {
            Error::InvalidConfig(format!("missing required setting `{}`", key.replace('_', "-")))
        })?;
        self.effective.push((key, value.to_string()));
        Ok(value)
    }

    /// Rejects config keys no setting asked for.
    pub fn finish(&self) -> Result<()> {
        for k in self.file.keys() {
            if !self.used.contains(k) {
                return Err(Error::InvalidConfig(format!("unknown config key `{k}`")));
            }
        }
        Ok(())
    }

    /// Effective settings in `key = value` form, readable back as a config.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.effective {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

/// Comma-separated list for config values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct List(pub Vec<usize>);

impl FromStr for List {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(List(Vec::new()));
        }
        s.split(',')
            .map(|x| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}")))
            .collect::<std::result::Result<_, _>>()
            .map(List)
    }
}

impl Display for List {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|x| x.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// `lo..hi` or a single value, for synth ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Range(pub usize, pub usize);

impl FromStr for Range {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let p = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}"));
        match s.split_once("..") {
            Some((a, b)) => Ok(Range(p(a)?, p(b)?)),
            None => {
                let v = p(s)?;
                Ok(Range(v, v))
            }
        }
    }
}

impl Display for Range {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}..{}", self.0, self.1)
    }
}
