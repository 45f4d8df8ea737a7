//! Versioned key-value settings files whose entries act as default flags.
//!
//! ```toml
//! version = 1
//! alpha = 0.7
//! workers = 4
//! exact = true
//! alphas = [0.6, 0.7]
//! ```
//!
//! Keys are long flag names (underscores and hyphens are interchangeable).
//! Entries the chosen subcommand does not accept are ignored so one file can
//! serve several subcommands.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Command;
use toml::Value;

pub const SETTINGS_VERSION: i64 = 1;

/// Removes `--settings F` (or `--settings=F`) from `args`.
pub fn take_settings_flag(args: &mut Vec<OsString>) -> Result<Option<OsString>> {
    let mut found = None;
    let mut i = 1;
    while i < args.len() {
        let arg = args[i].to_string_lossy().into_owned();
        if arg == "--" {
            break;
        }
        if arg == "--settings" {
            if i + 1 >= args.len() {
                bail!(UsageError("--settings requires a file".into()));
            }
            found = Some(args.remove(i + 1));
            args.remove(i);
        } else if let Some(path) = arg.strip_prefix("--settings=") {
            found = Some(OsString::from(path));
            args.remove(i);
        } else {
            i += 1;
        }
    }
    Ok(found)
}

/// A malformed command line.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// A settings file that parsed but is not acceptable.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct SettingsError(pub String);

fn render(value: &Value) -> Result<String> {
    Ok(match value {
        Value::String(s) => s.clone(),
        Value::Integer(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Array(items) => items.iter().map(render).collect::<Result<Vec<_>>>()?.join(","),
        other => bail!(SettingsError(format!("unsupported value {other}"))),
    })
}

/// Flag tokens for the entries of `path` that `command` accepts.
pub fn settings_args(path: &Path, command: &Command) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    match table.get("version") {
        Some(Value::Integer(SETTINGS_VERSION)) => {}
        Some(v) => bail!(SettingsError(format!("unsupported settings version {v}"))),
        None => bail!(SettingsError("settings file lacks a version".into())),
    }
    let accepted: Vec<&str> = command.get_arguments().filter_map(|a| a.get_long()).collect();
    let mut out = Vec::new();
    for (key, value) in &table {
        if key == "version" {
            continue;
        }
        let flag = key.replace('_', "-");
        if !accepted.contains(&flag.as_str()) {
            continue;
        }
        match value {
            Value::Boolean(true) => out.push(OsString::from(format!("--{flag}"))),
            Value::Boolean(false) => {}
            v => {
                out.push(OsString::from(format!("--{flag}")));
                out.push(OsString::from(render(v)?));
            }
        }
    }
    Ok(out)
}

/// Index of the subcommand token in `args`, if any.
pub fn subcommand_position(args: &[OsString]) -> Option<usize> {
    args.iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|p| p + 1)
}
