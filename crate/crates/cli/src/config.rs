//! Run configuration: an optional TOML document per command, with any key
//! overridable on the command line as `--key value` (dotted keys reach
//! nested tables, `-` and `_` are interchangeable).

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use toml::{Table, Value};

pub const SEED_ENV: &str = "PHENOM_SEED";

/// Split `args` into those clap knows (`known` long flags, with `flags`
/// being the value-less ones) and `--key value` overrides.
pub fn split_overrides(
    args: &[String],
    known: &[String],
    flags: &[String],
) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut kept = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.iter().peekable();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--").filter(|b| !b.is_empty()) else {
            kept.push(arg.clone());
            continue;
        };
        let (name, inline) = match body.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (body, None),
        };
        if known.iter().any(|k| k == name) {
            kept.push(arg.clone());
            if inline.is_none() && !flags.iter().any(|f| f == name) {
                if let Some(v) = it.next() {
                    kept.push(v.clone());
                }
            }
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => match it.next() {
                Some(v) => v.clone(),
                None => bail!("override --{name} needs a value"),
            },
        };
        overrides.push((name.replace('-', "_"), value));
    }
    Ok((kept, overrides))
}

/// A literal parsed as TOML (numbers, booleans, arrays), else a plain string.
fn parse_literal(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("override {key}: {p} is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Config document after file, overrides and the seed fallback are applied.
pub struct Resolved {
    pub table: Table,
}

pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Resolved> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Table::new(),
    };
    for (k, v) in overrides {
        set_dotted(&mut table, k, parse_literal(v))?;
    }
    if !table.contains_key("seed") {
        if let Ok(s) = std::env::var(SEED_ENV) {
            let seed: u64 = s.trim().parse().with_context(|| format!("{SEED_ENV}={s:?} is not an integer"))?;
            table.insert("seed".into(), Value::Integer(seed as i64));
        }
    }
    Ok(Resolved { table })
}

impl Resolved {
    /// Remove a sub-table (e.g. `model`) and deserialize it separately.
    pub fn take<T: DeserializeOwned + Default>(&mut self, key: &str) -> Result<T> {
        match self.table.remove(key) {
            Some(v) => v.try_into().with_context(|| format!("invalid [{key}] section")),
            None => Ok(T::default()),
        }
    }

    pub fn into_config<T: DeserializeOwned>(self) -> Result<T> {
        Value::Table(self.table).try_into().context("invalid configuration")
    }
}
