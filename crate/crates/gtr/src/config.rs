//! Run configuration: one TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use gtr_core::data::SegmentConfig;
use gtr_core::embeddings::PretrainConfig;
use gtr_core::model::{Ablations, ModelConfig};
use gtr_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Ablation names, see [`Ablations::NAMES`].
    pub ablate: Vec<String>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("out"),
            ablate: Vec::new(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delimiter {
    Tab,
    Comma,
}

impl Delimiter {
    pub fn byte(self) -> u8 {
        match self {
            Delimiter::Tab => b'\t',
            Delimiter::Comma => b',',
        }
    }
}

/// A column by zero-based position or by header name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Column {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub user: Column,
    pub poi: Column,
    pub category: Column,
    pub lat: Column,
    pub lon: Column,
    pub timestamp: Column,
    /// Local offset from UTC in minutes.
    pub tz_offset: Option<Column>,
}

impl Default for ColumnMap {
    /// Layout of the public Foursquare NYC/TKY dumps.
    fn default() -> Self {
        ColumnMap {
            user: Column::Index(0),
            poi: Column::Index(1),
            category: Column::Index(2),
            lat: Column::Index(4),
            lon: Column::Index(5),
            timestamp: Column::Index(7),
            tz_offset: Some(Column::Index(6)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub delimiter: Delimiter,
    pub has_header: bool,
    pub columns: ColumnMap,
    /// `unix` for integer seconds, otherwise a chrono format string. Formats
    /// without an offset are read as UTC.
    pub timestamp_format: String,
    pub min_poi_checkins: usize,
    pub regions: usize,
    pub region_iters: usize,
    /// Abort ingestion when more than this share of rows is malformed.
    pub max_malformed_fraction: f64,
    pub segment: SegmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            delimiter: Delimiter::Tab,
            has_header: false,
            columns: ColumnMap::default(),
            timestamp_format: "%a %b %d %H:%M:%S %z %Y".into(),
            min_poi_checkins: 5,
            regions: 40,
            region_iters: 100,
            max_malformed_fraction: 0.1,
            segment: SegmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub dims: Vec<usize>,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { lengths: vec![256, 512, 1024, 2048], dims: vec![16, 32, 64], repeats: 5 }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `overrides`, and
    /// validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ablations(&self) -> Result<Ablations> {
        let mut a = Ablations::default();
        for name in &self.ablate {
            a.enable(name)?;
        }
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.ablations()?;
        let d = &self.data;
        if d.min_poi_checkins == 0 || d.regions == 0 || d.region_iters == 0 {
            return Err(CliError::Config("min_poi_checkins, regions and region_iters must be positive".into()));
        }
        if !(0.0..=1.0).contains(&d.max_malformed_fraction) {
            return Err(CliError::Config("max_malformed_fraction must lie in [0, 1]".into()));
        }
        let s = &d.segment;
        if s.gap_hours.is_nan() || s.gap_hours <= 0.0 || s.min_len < 2 || s.max_len < s.min_len {
            return Err(CliError::Config("segment needs gap_hours > 0 and 2 <= min_len <= max_len".into()));
        }
        let p = &self.pretrain;
        if p.batch_size == 0
            || p.negatives == 0
            || p.lr.is_nan()
            || p.lr <= 0.0
            || p.pp_gap_hours.is_nan()
            || p.pp_gap_hours < 0.0
        {
            return Err(CliError::Config("pretrain needs positive batch_size, negatives and lr".into()));
        }
        if self.bench.repeats == 0 || self.bench.lengths.is_empty() || self.bench.dims.is_empty() {
            return Err(CliError::Config("bench needs lengths, dims and repeats >= 1".into()));
        }
        Ok(())
    }
}

/// Sets a dotted key. The value is read as a TOML literal when it parses as
/// one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("path has at least one segment");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur =
            entry.as_table_mut().ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
