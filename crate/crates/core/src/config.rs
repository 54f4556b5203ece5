//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may repeat only
//! across different files; within one file a repeated key is an error, as is
//! any key the target does not know. List values are comma-separated.

use std::collections::HashSet;
use std::str::FromStr;

use crate::corpus::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if !seen.insert(key.to_owned()) {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", i + 1)));
        }
        out.push(Entry {
            line: i + 1,
            key: key.to_owned(),
            value: value.trim().to_owned(),
        });
    }
    Ok(out)
}

/// A configuration that accepts individual `key = value` assignments.
pub trait KeyValue {
    /// Applies one assignment; unknown keys are errors.
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Applies every entry of a configuration text.
    fn apply_text(&mut self, text: &str) -> Result<()> {
        for e in parse_entries(text)? {
            self.set(&e.key, &e.value)
                .map_err(|err| Error::Config(format!("line {}: {}", e.line, strip(err))))?;
        }
        Ok(())
    }
}

fn strip(err: Error) -> String {
    match err {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

pub fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn unknown_key(key: &str) -> Error {
    Error::Config(format!("unknown key {key:?}"))
}

impl KeyValue for SynthConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_dialogs" => self.n_dialogs = parse_value(key, value)?,
            "scenario_mix" => {
                let parts = parse_list(value)
                    .iter()
                    .map(|p| parse_value::<f64>(key, p))
                    .collect::<Result<Vec<_>>>()?;
                self.scenario_mix = parts
                    .try_into()
                    .map_err(|_| Error::Config("scenario_mix needs three proportions".into()))?;
            }
            "ambiguity_rate" => self.ambiguity_rate = parse_value(key, value)?,
            "topics" => self.topics = parse_list(value),
            "attributes" => self.attributes = parse_list(value),
            "times" => self.times = parse_list(value),
            "qualities" => self.qualities = parse_list(value),
            "openers" => self.openers = parse_list(value),
            "capitals" => {
                self.capitals = parse_list(value)
                    .iter()
                    .map(|p| {
                        p.split_once(':')
                            .map(|(a, b)| (a.trim().to_owned(), b.trim().to_owned()))
                            .ok_or_else(|| Error::Config(format!("capital entry {p:?} is not country:capital")))
                    })
                    .collect::<Result<_>>()?;
            }
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }
}

impl KeyValue for ModelConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "d_model" => self.d_model = parse_value(key, value)?,
            "n_layers" => self.n_layers = parse_value(key, value)?,
            "n_heads" => self.n_heads = parse_value(key, value)?,
            "d_ff" => self.d_ff = parse_value(key, value)?,
            "max_seq_len" => self.max_seq_len = parse_value(key, value)?,
            "dropout_rate" => self.dropout_rate = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }
}
