//! Run configuration: TOML sections layered as preset, then file, then
//! `key=value` overrides.

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::synthdata::GeneratorConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Seed of the query/gallery split.
    pub seed: u64,
    /// Shuffles used for the random-ranking baseline.
    pub random_trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            random_trials: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Small batches and a short schedule for a single CPU core.
    Desk,
    /// Full-size batches and the 70-epoch schedule.
    Full,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "full" => Ok(Self::Full),
            other => Err(Error::config("preset", format!("unknown preset {other:?} (desk, full)"))),
        }
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let train = match p {
            Preset::Desk => TrainConfig::desk(),
            Preset::Full => TrainConfig::default(),
        };
        Self {
            generator: GeneratorConfig::hard(),
            train,
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        if self.eval.random_trials == 0 {
            return Err(Error::config("eval.random_trials", "must be >= 1"));
        }
        Ok(())
    }

    /// Layers `file` (TOML text) and then `overrides` (`a.b.c=value`) on top
    /// of the preset, then validates.
    pub fn resolve(preset: Preset, file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table = to_table(&Self::preset(preset))?;
        if let Some(text) = file {
            let parsed: Table = text.parse().map_err(|e: toml::de::Error| Error::config("config file", e.message()))?;
            merge(&mut table, parsed);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            Error::config("config", e.message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn to_table(cfg: &RunConfig) -> Result<Table> {
    Table::try_from(cfg).map_err(|e| Error::config("config", e.to_string()))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `train.loss.gamma=0.5`. The value is parsed as a TOML literal, falling
/// back to a bare string.
fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment.to_string(), "override must look like key=value"))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields at least one item");
    let mut cur = table;
    for k in parents {
        cur = match cur.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => return Err(Error::config(path.to_string(), format!("{k} is not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
