//! Run configuration: one TOML file, `--set path=value` overrides, and the
//! effective config written next to every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use volimpute::metrics::EvalConfig;
use volimpute::surfaces::grid::SplitBounds;
use volimpute::surfaces::TwoGaussVariant;
use volimpute::train::TrainConfig;
use volimpute::vae::VaeConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "by", rename_all = "snake_case")]
pub enum SplitSpec {
    Dates { train_end: chrono::NaiveDate, validation_end: chrono::NaiveDate },
    Counts { train: usize, validation: usize, test: usize },
}

impl Default for SplitSpec {
    fn default() -> Self {
        let b = SplitBounds::default();
        SplitSpec::Dates { train_end: b.train_end, validation_end: b.validation_end }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    SurfaceCsv {
        path: PathBuf,
        #[serde(default)]
        split: SplitSpec,
    },
    SyntheticSurfaces {
        days: usize,
        seed: u64,
        split: SplitSpec,
    },
    /// Numeric CSV with a header; empty cells are missing. All rows train.
    MatrixCsv { path: PathBuf },
    TwoGauss { variant: TwoGaussVariant, n: usize, seed: u64 },
    EightGauss { n: usize, seed: u64 },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::SyntheticSurfaces { days: 2750, seed: 0, split: SplitSpec::Counts { train: 2000, validation: 250, test: 500 } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub model: VaeConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 10_000,
            log_every: 100,
            model: VaeConfig::default(),
            training: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies `a.b.c=value` to a table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("bad override path {path:?}")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override path {path:?}: {k} is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn load_table(path: Option<&Path>) -> CliResult<toml::Table> {
    match path {
        Some(p) => Ok(std::fs::read_to_string(p)?.parse::<toml::Table>()?),
        None => Ok(toml::Table::new()),
    }
}

pub fn from_table(table: toml::Table) -> CliResult<RunConfig> {
    let cfg: RunConfig = toml::Value::Table(table).try_into()?;
    cfg.model.validate()?;
    Ok(cfg)
}

/// File (if any) plus overrides, in order.
pub fn resolve(path: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut t = load_table(path)?;
    for o in overrides {
        apply_override(&mut t, o)?;
    }
    from_table(t)
}

pub fn to_toml(cfg: &RunConfig) -> CliResult<String> {
    toml::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))
}

pub fn to_json(cfg: &RunConfig) -> CliResult<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

/// Paths whose values differ between two JSON documents, as `path: a -> b`.
pub fn json_diff(a: &serde_json::Value, b: &serde_json::Value, ignore: &[&str]) -> Vec<String> {
    let mut out = Vec::new();
    diff_rec("", a, b, ignore, &mut out);
    out
}

fn diff_rec(path: &str, a: &serde_json::Value, b: &serde_json::Value, ignore: &[&str], out: &mut Vec<String>) {
    use serde_json::Value;
    if ignore.contains(&path) {
        return;
    }
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                diff_rec(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), ignore, out);
            }
        }
        _ if a != b => out.push(format!("{path}: {a} -> {b}")),
        _ => {}
    }
}
