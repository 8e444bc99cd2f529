//! Flat `key = value` run configuration merged under command-line flags.
//!
//! A key applies to every subcommand; `subcommand.key` applies to one and
//! wins over the bare key. Flags win over both.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;

pub const CONFIG_ENV: &str = "ASMALIGN_CONFIG";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("config line {}: expected key = value", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(CliError::Config(format!("config line {}: empty key", i + 1)));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(CliError::Config(format!("config line {}: duplicate key {k:?}", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }
}

/// Resolves parameters for one subcommand and records every resolved value.
#[derive(Debug)]
pub struct Resolver<'a> {
    file: &'a ConfigFile,
    subcommand: &'static str,
    pub record: BTreeMap<String, Value>,
}

impl<'a> Resolver<'a> {
    pub fn new(file: &'a ConfigFile, subcommand: &'static str) -> Self {
        Self {
            file,
            subcommand,
            record: BTreeMap::new(),
        }
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        let scoped = format!("{}.{key}", self.subcommand);
        let Some(raw) = self.file.entries.get(&scoped).or_else(|| self.file.entries.get(key)) else {
            return Ok(None);
        };
        raw.parse()
            .map(Some)
            .map_err(|e| CliError::Config(format!("config key {key:?}: {e}")))
    }

    pub fn opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        let json = v
            .as_ref()
            .map_or(Value::Null, |v| serde_json::to_value(v).expect("scalar serializes"));
        self.record.insert(key.to_string(), json);
        Ok(v)
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        let v = self.opt(key, flag)?.unwrap_or(default);
        self.record
            .insert(key.to_string(), serde_json::to_value(&v).expect("scalar serializes"));
        Ok(v)
    }

    pub fn req<T>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        self.opt(key, flag)?.ok_or_else(|| {
            CliError::Config(format!(
                "{} needs --{key} (or `{key}` in the config file)",
                self.subcommand
            ))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_scoped_over_bare() {
        let f = ConfigFile::parse("# c\nsteps = 5\npretrain.steps = 7\nlr=0.5\n").unwrap();
        let mut r = Resolver::new(&f, "pretrain");
        assert_eq!(r.get("steps", None, 1usize).unwrap(), 7);
        assert_eq!(r.get("steps", Some(9usize), 1).unwrap(), 9);
        assert_eq!(r.get("lr", None, 0.1f64).unwrap(), 0.5);
        assert_eq!(r.get("heads", None, 4usize).unwrap(), 4);
        let mut a = Resolver::new(&f, "align");
        assert_eq!(a.get("steps", None, 1usize).unwrap(), 5);
        assert!(a.req::<u64>("seed", None).is_err());
        assert_eq!(a.record["steps"], 5);
    }

    #[test]
    fn bad_lines_and_values() {
        assert!(ConfigFile::parse("novalue").is_err());
        assert!(ConfigFile::parse("a=1\na=2").is_err());
        let f = ConfigFile::parse("steps = many").unwrap();
        assert!(Resolver::new(&f, "x").get("steps", None, 1usize).is_err());
    }
}
