//! Run configuration: a TOML file addressed by flat dotted keys.
//!
//! Every key of the effective configuration has a default, so a file only
//! lists what it changes. `--set key=value` overrides are applied on top;
//! keys that do not exist in the defaults are rejected.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ghostserve::checkpoint::CheckpointConfig;
use ghostserve::coding::{CodingScheme, SchemeKind};
use ghostserve::cost::CostModel;
use ghostserve::kv::ModelConfig;
use ghostserve::sim::{parse_strategy, SimConfig, Strategy, TraceConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scheme: SchemeSection,
    pub model: ModelConfig,
    pub checkpoint: CheckpointSection,
    pub cost: CostModel,
    pub trace: TraceConfig,
    pub failure: FailureSection,
    pub sim: SimSection,
    pub seeds: Seeds,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSection {
    pub kind: SchemeKind,
    pub n: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSection {
    pub chunk_size: usize,
    pub decode: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSection {
    /// One simulation cell per rate.
    pub rates: Vec<f64>,
    pub workers_per_failure: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub strategies: Vec<String>,
    /// Run the scaled-down data path for ghostserve and verify recoveries.
    pub data_plane: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub trace: u64,
    pub failure: u64,
    pub data: u64,
}

impl Seeds {
    /// Distinct streams derived from one user seed.
    pub fn from_base(seed: u64) -> Self {
        Seeds { trace: seed, failure: seed.wrapping_add(1), data: seed.wrapping_add(2) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Also write each cell's event timeline as CSV.
    pub timeline: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scheme: SchemeSection { kind: SchemeKind::ReedSolomon, n: 8, k: 2 },
            model: ModelConfig::llama70b_like(),
            checkpoint: CheckpointSection { chunk_size: 2048, decode: true },
            cost: CostModel::default(),
            trace: TraceConfig::default(),
            failure: FailureSection { rates: vec![0.05, 0.10, 0.15], workers_per_failure: 1 },
            sim: SimSection {
                strategies: ["ghostserve", "replicate_host", "replicate_disk", "recompute_only"].map(String::from).to_vec(),
                data_plane: true,
            },
            seeds: Seeds::from_base(0),
            output: OutputSection { dir: PathBuf::from("out"), timeline: false },
        }
    }
}

/// Nested tables to `a.b.c` keys. Arrays are leaves.
pub fn flatten(table: &Table) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, table: &Table, out: &mut BTreeMap<String, Value>) {
        for (k, v) in table {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                Value::Table(t) => walk(&key, t, out),
                other => {
                    out.insert(key, other.clone());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", table, &mut out);
    out
}

pub fn unflatten(flat: &BTreeMap<String, Value>) -> Table {
    let mut root = Table::new();
    for (key, value) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().unwrap();
        let mut t = &mut root;
        for p in parts {
            t = t.entry(p).or_insert_with(|| Value::Table(Table::new())).as_table_mut().expect("key paths are consistent");
        }
        t.insert(last.to_string(), value.clone());
    }
    root
}

/// A `--set` value: anything TOML can parse as a value, otherwise a bare
/// string.
pub fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn coerce(default: &Value, v: Value) -> Value {
    // integers are accepted where floats are expected
    match (default, v) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (Value::Array(d), Value::Array(items)) if d.first().is_some_and(Value::is_float) => {
            Value::Array(items.into_iter().map(|x| coerce(&Value::Float(0.0), x)).collect())
        }
        (_, v) => v,
    }
}

impl RunConfig {
    pub fn flat_defaults() -> BTreeMap<String, Value> {
        let table = Table::try_from(RunConfig::default()).expect("defaults serialize");
        flatten(&table)
    }

    /// Defaults, then `file` (TOML text), then `overrides`.
    pub fn load(file: Option<&str>, overrides: &[(String, String)], seed: Option<u64>) -> Result<Self, CliError> {
        let mut flat = Self::flat_defaults();
        let mut apply = |key: String, value: Value| -> Result<(), CliError> {
            let default = flat.get(&key).ok_or_else(|| CliError::Config(format!("unknown key {key:?}")))?;
            let value = coerce(default, value);
            flat.insert(key, value);
            Ok(())
        };
        if let Some(text) = file {
            let table: Table = text.parse().map_err(|e| CliError::Config(format!("config file: {e}")))?;
            for (k, v) in flatten(&table) {
                apply(k, v)?;
            }
        }
        for (k, raw) in overrides {
            apply(k.clone(), parse_value(raw))?;
        }
        if let Some(s) = seed {
            let seeds = Seeds::from_base(s);
            apply("seeds.trace".into(), Value::Integer(seeds.trace as i64))?;
            apply("seeds.failure".into(), Value::Integer(seeds.failure as i64))?;
            apply("seeds.data".into(), Value::Integer(seeds.data as i64))?;
        }
        let config: RunConfig = Value::Table(unflatten(&flat)).try_into().map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn dump(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn coding_scheme(&self) -> Result<CodingScheme, CliError> {
        CodingScheme::new(self.scheme.kind, self.scheme.n, self.scheme.k).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn checkpoint_config(&self) -> Result<CheckpointConfig, CliError> {
        Ok(CheckpointConfig {
            scheme: self.coding_scheme()?,
            chunk_size: self.checkpoint.chunk_size,
            model: self.model,
            cost: self.cost,
            checkpoint_decode: self.checkpoint.decode,
        })
    }

    pub fn sim_config(&self) -> Result<SimConfig, CliError> {
        let mut c = SimConfig::new(self.checkpoint_config()?);
        c.data_seed = self.seeds.data;
        if !self.sim.data_plane {
            c.data_model = None;
        }
        Ok(c)
    }

    pub fn strategies(&self) -> Result<Vec<Strategy>, CliError> {
        let scheme = self.coding_scheme()?;
        self.sim.strategies.iter().map(|s| parse_strategy(s, scheme).map_err(|e| CliError::Config(e.to_string()))).collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.checkpoint_config()?.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.trace.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.sim.strategies.is_empty() {
            return Err(CliError::Config("sim.strategies is empty".into()));
        }
        self.strategies()?;
        if self.failure.rates.is_empty() {
            return Err(CliError::Config("failure.rates is empty".into()));
        }
        for &rate in &self.failure.rates {
            let cfg = ghostserve::sim::FailureInjectorConfig {
                rate,
                seed: self.seeds.failure,
                workers_per_failure: self.failure.workers_per_failure,
            };
            cfg.validate(self.model.tp_degree).map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::load(None, &[], None).unwrap();
        assert_eq!(c, RunConfig::default());
        let again = RunConfig::load(Some(&c.dump()), &[], None).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn dotted_overrides() {
        let set = |k: &str, v: &str| (k.to_string(), v.to_string());
        let c = RunConfig::load(
            Some("[cost]\nhost_bw = 16e9\n"),
            &[set("scheme.kind", "xor"), set("scheme.k", "1"), set("failure.rates", "[0, 0.5]"), set("cost.restart_overhead", "3")],
            Some(10),
        )
        .unwrap();
        assert_eq!(c.cost.host_bw, 16e9);
        assert_eq!(c.scheme.kind, SchemeKind::Xor);
        assert_eq!(c.failure.rates, vec![0.0, 0.5]);
        assert_eq!(c.cost.restart_overhead, 3.0);
        assert_eq!(c.seeds, Seeds { trace: 10, failure: 11, data: 12 });
    }

    #[test]
    fn rs_alias() {
        let c = RunConfig::load(None, &[("scheme.kind".into(), "rs".into())], None).unwrap();
        assert_eq!(c.scheme.kind, SchemeKind::ReedSolomon);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(RunConfig::load(None, &[("cost.warp".into(), "1".into())], None), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::load(Some("[nope]\nx = 1\n"), &[], None), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::load(None, &[("scheme.n".into(), "4".into())], None), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::load(None, &[("cost.host_bw".into(), "\"fast\"".into())], None), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::load(None, &[("sim.strategies".into(), "[\"magic\"]".into())], None), Err(CliError::Config(_))));
    }

    #[test]
    fn flatten_inverse() {
        let flat = RunConfig::flat_defaults();
        assert!(flat.contains_key("cost.host_bw") && flat.contains_key("trace.long_input.min"));
        assert_eq!(flatten(&unflatten(&flat)), flat);
    }
}
