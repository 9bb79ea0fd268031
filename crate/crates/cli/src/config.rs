//! Run configuration: built-in defaults, an optional TOML file and
//! `--set key=value` overrides.
//!
//! The file has two tables whose keys mirror the library structs:
//!
//! ```toml
//! [world]        # WorldConfig
//! scene_noise = 0.5
//!
//! [train]        # TrainConfig
//! d_model = 64
//! batch_size = 16
//! ```
//!
//! A `--set` key may omit its table when the name is unique to one of them
//! (`seed` is not). A run manifest (`manifest.json`) is accepted in place of
//! a TOML file and restores the configuration it recorded.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use stgraph::synth::WorldConfig;
use stgraph::trainer::TrainConfig;
use toml::{Table, Value};

use crate::Usage;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub train: TrainConfig,
}

const SECTIONS: [&str; 2] = ["world", "train"];

fn defaults() -> Table {
    match Value::try_from(RunConfig::default()).expect("defaults serialize") {
        Value::Table(t) => t,
        _ => unreachable!("config serializes to a table"),
    }
}

fn merge(base: &mut Table, overlay: Table) -> Result<()> {
    for (section, value) in overlay {
        let Some(Value::Table(target)) = base.get_mut(&section) else {
            bail!(Usage(format!("unknown config table [{section}]; expected [world] or [train]")));
        };
        let Value::Table(entries) = value else {
            bail!(Usage(format!("config entry {section} must be a table")));
        };
        for (k, v) in entries {
            if !target.contains_key(&k) {
                bail!(Usage(format!("unknown config key {section}.{k}")));
            }
            target.insert(k, v);
        }
    }
    Ok(())
}

fn parse_value(text: &str) -> Value {
    // Bare words such as variant names are taken as strings.
    format!("v = {text}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

fn apply_set(base: &mut Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!(Usage(format!("--set expects key=value, got {assignment:?}"))))?;
    let key = key.trim();
    let (section, field) = match key.split_once('.') {
        Some((s, f)) => (s.to_string(), f.to_string()),
        None => {
            let owners: Vec<&str> = SECTIONS
                .iter()
                .copied()
                .filter(|s| base[*s].as_table().is_some_and(|t| t.contains_key(key)))
                .collect();
            match owners.as_slice() {
                [one] => (one.to_string(), key.to_string()),
                [] => bail!(Usage(format!("unknown config key {key}"))),
                _ => bail!(Usage(format!("config key {key} is ambiguous; write world.{key} or train.{key}"))),
            }
        }
    };
    let mut entry = Table::new();
    entry.insert(field, parse_value(value.trim()));
    let mut overlay = Table::new();
    overlay.insert(section, Value::Table(entry));
    merge(base, overlay)
}

fn read_file(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        #[derive(Deserialize)]
        struct Recorded {
            config: RunConfig,
        }
        let recorded: Recorded = serde_json::from_str(&text)
            .map_err(|e| Usage(format!("{} is not a run manifest: {e}", path.display())))?;
        return match Value::try_from(recorded.config)? {
            Value::Table(t) => Ok(t),
            _ => unreachable!("config serializes to a table"),
        };
    }
    text.parse::<Table>()
        .map_err(|e| anyhow!(Usage(format!("{}: {e}", path.display()))))
}

/// Defaults, then `file`, then each `--set` in order.
pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut table = defaults();
    if let Some(path) = file {
        merge(&mut table, read_file(path)?)?;
    }
    for s in sets {
        apply_set(&mut table, s)?;
    }
    let config: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| anyhow!(Usage(format!("invalid configuration: {}", e.message()))))?;
    config.world.validate().map_err(|e| Usage(e.to_string()))?;
    config.train.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(config)
}
