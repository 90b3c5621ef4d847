//! Experiment configuration: one TOML file plus `--set key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use svdcache_core::{DenoiserConfig, Strategy, StrategyConfig, SynthConfig};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    #[default]
    Synth,
    ToyDenoiser,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub kind: SourceKind,
    /// Trajectory file for `kind = "file"`.
    pub path: Option<PathBuf>,
    /// Toy denoiser only: feed predictions back into sampling.
    pub closed_loop: bool,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            kind: SourceKind::Synth,
            path: None,
            closed_loop: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub interval: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { interval: 5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    /// Directory holding a decomposed store (`manifest.json`). When unset,
    /// `run` decomposes the reference trajectory on the fly and `decompose`
    /// writes to `<out>/bases`.
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub strategies: Vec<Strategy>,
    pub intervals: Vec<usize>,
    pub taus: Vec<f64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            strategies: [
                "ema+reuse",
                "reuse+reuse",
                "ema+ema",
                "whole:reuse",
                "whole:ema",
                "whole:taylor1",
            ]
            .iter()
            .map(|s| s.parse().expect("built-in strategy"))
            .collect(),
            intervals: Vec::new(),
            taus: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    /// Blocks to trace; empty means all.
    pub blocks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub source: SourceConfig,
    pub synth: SynthConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub strategy: StrategyConfig,
    pub basis: BasisConfig,
    pub compare: CompareConfig,
    pub analyze: AnalyzeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0],
            out_dir: None,
            source: SourceConfig::default(),
            synth: SynthConfig::default(),
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            strategy: StrategyConfig::default(),
            basis: BasisConfig::default(),
            compare: CompareConfig::default(),
            analyze: AnalyzeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults), applies `key=value`
    /// overrides, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    CliError::Validation(format!("cannot read config {}: {e}", p.display()))
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        self.strategy.validate()?;
        match self.source.kind {
            SourceKind::Synth => self.synth.validate()?,
            SourceKind::ToyDenoiser => self.denoiser.validate()?,
            SourceKind::File => match &self.source.path {
                None => return bad("source.kind = \"file\" needs source.path".into()),
                Some(p) if !p.exists() => {
                    return bad(format!("trajectory file {} does not exist", p.display()))
                }
                Some(_) => {}
            },
        }
        if self.source.closed_loop && self.source.kind != SourceKind::ToyDenoiser {
            return bad("source.closed_loop requires source.kind = \"toy-denoiser\"".into());
        }
        if self.schedule.interval == 0 || self.compare.intervals.contains(&0) {
            return bad("intervals must be >= 1".into());
        }
        if let Some(dir) = &self.basis.dir {
            if !dir.join("manifest.json").exists() {
                return bad(format!("basis.dir {} has no manifest.json", dir.display()));
            }
        }
        Ok(())
    }

    /// Canonical TOML rendering; loading it back yields an equal config.
    pub fn to_canonical_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable in TOML")
    }
}

/// `a.b.c=value`: `value` is parsed as a TOML value, falling back to a bare
/// string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        CliError::Validation(format!("--set expects key=value, got {assignment:?}"))
    })?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Validation(format!("bad key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("{p:?} in {key:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
