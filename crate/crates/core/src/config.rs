//! Flat `key = value` configuration text.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Keys are dotted paths. Canonical text lists keys in sorted order.

use std::fmt::Display;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value '{value}' for key '{key}': {message}")]
    BadValue {
        key: String,
        value: String,
        message: String,
    },
    #[error("invalid setting '{key}': {message}")]
    Invalid { key: String, message: String },
}

/// Assignments of a config text in file order.
pub fn parse_assignments(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            message: format!("expected 'key = value', found '{line}'"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Splits a command-line `KEY=VALUE` override.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(ConfigError::Syntax {
            line: 0,
            message: format!("override '{s}' is not KEY=VALUE"),
        }),
    }
}

/// Renders sorted `key = value` lines.
pub fn render(mut entries: Vec<(String, String)>) -> String {
    entries.sort();
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(&k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    }
    out
}

pub(crate) fn value<T>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T: FromStr,
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        value: v.to_string(),
        message: e.to_string(),
    })
}

pub(crate) fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}
