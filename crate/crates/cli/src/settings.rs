//! Layered configuration: built-in defaults, then a TOML file, then
//! environment overrides, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

pub const OUTPUT_DIR_ENV: &str = "NVAR_OUTPUT_DIR";
pub const JOBS_ENV: &str = "NVAR_JOBS";

/// Keys a config file may carry besides the command's own settings.
const RUN_KEYS: [&str; 2] = ["output_dir", "jobs"];

/// A parsed config file split into run-level keys and command settings.
#[derive(Debug, Default)]
pub struct ConfigFile {
    pub output_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub settings: Table,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut settings: Table = text
            .parse()
            .with_context(|| format!("cannot parse config {}", path.display()))?;
        let output_dir = match settings.remove(RUN_KEYS[0]) {
            Some(Value::String(s)) => Some(PathBuf::from(s)),
            Some(other) => bail!("output_dir must be a string, got {other}"),
            None => None,
        };
        let jobs = match settings.remove(RUN_KEYS[1]) {
            Some(Value::Integer(n)) if n >= 1 => Some(n as usize),
            Some(other) => bail!("jobs must be a positive integer, got {other}"),
            None => None,
        };
        Ok(ConfigFile {
            output_dir,
            jobs,
            settings,
        })
    }
}

/// Output directory: flag, then environment, then file, then `default`.
pub fn output_dir(flag: Option<&Path>, file: &ConfigFile, default: &str) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| file.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(default))
}

/// Worker count: flag, then environment, then file; `None` means one per core.
pub fn jobs(flag: Option<usize>, file: &ConfigFile) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    if let Ok(s) = std::env::var(JOBS_ENV) {
        let n: usize = s
            .trim()
            .parse()
            .with_context(|| format!("{JOBS_ENV}={s} is not a count"))?;
        return Ok(Some(n));
    }
    Ok(file.jobs)
}

/// Recursively overlays `top` onto `base`; tables merge, everything else
/// is replaced. Integers replacing floats are widened so `h = 1` works.
pub fn deep_merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => deep_merge(b, t),
            (Some(old), v) => {
                let v = widen_like(old, v);
                *old = v;
            }
            (None, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn widen_like(old: &Value, new: Value) -> Value {
    match (old, new) {
        (Value::Float(_), Value::Integer(n)) => Value::Float(n as f64),
        (Value::Array(a), Value::Array(items)) if a.first().is_some_and(Value::is_float) => {
            Value::Array(
                items
                    .into_iter()
                    .map(|v| match v {
                        Value::Integer(n) => Value::Float(n as f64),
                        v => v,
                    })
                    .collect(),
            )
        }
        (_, new) => new,
    }
}

/// Parses `a.b.c=value`. The value is read as a TOML literal when possible
/// and as a bare string otherwise.
pub fn parse_assignment(s: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = s
        .split_once('=')
        .with_context(|| format!("override `{s}` is not of the form key=value"))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        bail!("override `{s}` has an empty key segment");
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

pub fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            other => bail!(
                "cannot set `{}`: `{p}` is {}, not a table",
                path.join("."),
                other.type_str()
            ),
        };
    }
    let mut top = Table::new();
    top.insert(last.clone(), value);
    deep_merge(cur, top);
    Ok(())
}

fn has_path(table: &Table, path: &[String]) -> bool {
    let mut cur = table;
    for (i, p) in path.iter().enumerate() {
        match cur.get(p) {
            Some(Value::Table(t)) if i + 1 < path.len() => cur = t,
            Some(_) => return i + 1 == path.len(),
            None => return false,
        }
    }
    true
}

fn leaf_paths(table: &Table, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    for (k, v) in table {
        prefix.push(k.clone());
        match v {
            Value::Table(t) if !t.is_empty() => leaf_paths(t, prefix, out),
            _ => out.push(prefix.clone()),
        }
        prefix.pop();
    }
}

fn to_table<T: Serialize>(value: &T) -> Result<Table> {
    match Value::try_from(value)? {
        Value::Table(t) => Ok(t),
        other => bail!("expected a table, got {}", other.type_str()),
    }
}

/// Resolves `defaults` overlaid by the file settings and then by `--set`
/// overrides. Keys that do not survive the round trip are rejected so that
/// typos fail loudly.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Table,
    overrides: &[String],
) -> Result<T> {
    let mut merged = to_table(defaults).context("defaults do not serialize")?;
    let mut requested = Vec::new();
    leaf_paths(&file, &mut Vec::new(), &mut requested);
    deep_merge(&mut merged, file);
    for s in overrides {
        let (path, value) = parse_assignment(s)?;
        set_path(&mut merged, &path, value)?;
        requested.push(path);
    }
    let resolved: T = Value::Table(merged)
        .try_into()
        .context("invalid configuration")?;
    let back = to_table(&resolved).context("configuration does not serialize")?;
    if let Some(path) = requested.iter().find(|p| !has_path(&back, p)) {
        bail!("unknown configuration key `{}`", path.join("."));
    }
    Ok(resolved)
}
