//! Flat key=value run-configuration files.
//!
//! A config file is line-oriented text: blank lines and `#` comments are
//! skipped, everything else must be `key=value`. Keys are lowercase
//! `[a-z0-9_]+`; values are arbitrary printable text (trimmed). Each run
//! resolves its settings as defaults < config file < command-line flags,
//! then writes the fully-resolved set next to its outputs so any run can
//! be reproduced from that one artifact.
//!
//! The parser is deliberately strict — duplicate keys, oversized input,
//! control characters, and malformed lines are errors, and every key
//! must be consumed by the command that loaded it (a typo'd key never
//! silently disappears).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Caps accepted input sizes so hostile files fail fast.
const MAX_CONFIG_BYTES: usize = 1 << 20;
const MAX_LINE_BYTES: usize = 4096;

fn bad(line_no: usize, detail: impl Into<String>) -> Error {
    Error::format("config", format!("line {line_no}: {}", detail.into()))
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

/// Parses config text into ordered key/value pairs.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    if text.len() > MAX_CONFIG_BYTES {
        return Err(Error::format(
            "config",
            format!("{} bytes exceeds the {MAX_CONFIG_BYTES}-byte cap", text.len()),
        ));
    }
    let mut pairs = Vec::new();
    let mut seen = BTreeMap::new();
    for (ix, raw) in text.lines().enumerate() {
        let line_no = ix + 1;
        if raw.len() > MAX_LINE_BYTES {
            return Err(bad(line_no, format!("{} bytes exceeds the line cap", raw.len())));
        }
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(bad(line_no, format!("expected key=value, got {line:?}")));
        };
        let key = key.trim();
        let value = value.trim();
        if !valid_key(key) {
            return Err(bad(
                line_no,
                format!("key {key:?} must be lowercase [a-z0-9_]+"),
            ));
        }
        if value.chars().any(char::is_control) {
            return Err(bad(line_no, format!("value for {key:?} contains control characters")));
        }
        if let Some(first) = seen.insert(key.to_string(), line_no) {
            return Err(bad(
                line_no,
                format!("duplicate key {key:?} (first set on line {first})"),
            ));
        }
        pairs.push((key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

/// Byte-input convenience for callers holding raw file contents.
pub fn parse_config_bytes(bytes: &[u8]) -> Result<Vec<(String, String)>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::format("config", format!("not UTF-8: {e}")))?;
    parse_config(text)
}

/// A parsed config file being consumed key by key.
///
/// Commands `take` the keys they understand; `finish` rejects leftovers.
#[derive(Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn empty() -> FileConfig {
        FileConfig::default()
    }

    pub fn parse(text: &str) -> Result<FileConfig> {
        let values = parse_config(text)?.into_iter().collect();
        Ok(FileConfig { values })
    }

    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path)?;
        FileConfig::parse(&text)
    }

    /// Removes and returns the raw value for `key`.
    pub fn take(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    /// Removes and parses the value for `key`; a present-but-unparsable
    /// value is an error naming the key.
    pub fn take_parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.values.remove(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::config(format!("config key {key} has unusable value {raw:?}"))
            }),
        }
    }

    /// Errors if any key was never consumed.
    pub fn finish(self) -> Result<()> {
        if self.values.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = self.values.keys().map(String::as_str).collect();
        Err(Error::config(format!(
            "unknown config keys: {}",
            keys.join(", ")
        )))
    }
}

/// Renders resolved settings as a reloadable config file. Keys are
/// sorted, so the output is byte-stable for a given setting set.
pub fn render_config(pairs: &[(String, String)]) -> String {
    let mut sorted: Vec<&(String, String)> = pairs.iter().collect();
    sorted.sort();
    let mut out = String::from("# resolved run configuration\n");
    for (k, v) in sorted {
        writeln!(out, "{k}={v}").expect("string write");
    }
    out
}
