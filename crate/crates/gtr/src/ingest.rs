//! Delimited check-in files to [`CheckIn`] records.

use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use gtr_core::data::CheckIn;

use crate::config::{Column, DataConfig};
use crate::error::{CliError, Result};

/// At most this many malformed rows are kept verbatim in the report.
pub const REPORTED_ERRORS: usize = 20;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub rows: usize,
    pub parsed: usize,
    pub malformed: usize,
    /// `(line, reason)` for the first malformed rows.
    pub errors: Vec<(u64, String)>,
}

impl IngestReport {
    pub fn malformed_fraction(&self) -> f64 {
        if self.rows == 0 {
            0.0
        } else {
            self.malformed as f64 / self.rows as f64
        }
    }
}

/// Resolved column positions.
#[derive(Debug, Clone, Copy)]
struct Positions {
    user: usize,
    poi: usize,
    category: usize,
    lat: usize,
    lon: usize,
    timestamp: usize,
    tz_offset: Option<usize>,
}

fn resolve(col: &Column, headers: Option<&csv::StringRecord>) -> Result<usize> {
    match col {
        Column::Index(i) => Ok(*i),
        Column::Name(name) => headers
            .ok_or_else(|| CliError::Config(format!("column `{name}` is named but the file has no header")))?
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CliError::Config(format!("no column named `{name}`"))),
    }
}

/// Parses a timestamp to UTC seconds.
pub fn parse_timestamp(raw: &str, format: &str) -> std::result::Result<i64, String> {
    let raw = raw.trim();
    if format == "unix" {
        return raw
            .parse::<i64>()
            .or_else(|_| raw.parse::<f64>().map_err(|e| e.to_string()).and_then(float_seconds))
            .map_err(|e| format!("bad unix timestamp `{raw}`: {e}"));
    }
    if format.contains("%z") || format.contains("%:z") || format.contains("%#z") {
        DateTime::parse_from_str(raw, format).map(|t| t.timestamp())
    } else {
        NaiveDateTime::parse_from_str(raw, format).map(|t| t.and_utc().timestamp())
    }
    .map_err(|e| format!("bad timestamp `{raw}`: {e}"))
}

fn float_seconds(x: f64) -> std::result::Result<i64, String> {
    if x.is_finite() && x.abs() < 1e15 {
        Ok(x.floor() as i64)
    } else {
        Err("out of range".into())
    }
}

fn parse_row(rec: &csv::StringRecord, pos: &Positions, cfg: &DataConfig) -> std::result::Result<CheckIn, String> {
    let field = |i: usize, what: &str| rec.get(i).map(str::trim).ok_or_else(|| format!("missing {what} column {i}"));
    let text = |i: usize, what: &str| -> std::result::Result<String, String> {
        let v = field(i, what)?;
        if v.is_empty() {
            Err(format!("empty {what}"))
        } else {
            Ok(v.to_string())
        }
    };
    let num = |i: usize, what: &str| -> std::result::Result<f64, String> {
        let v = field(i, what)?;
        v.parse::<f64>().map_err(|_| format!("bad {what} `{v}`"))
    };
    let tz_offset_min = match pos.tz_offset {
        Some(i) => {
            let v = field(i, "tz_offset")?;
            v.parse::<i32>().map_err(|_| format!("bad tz_offset `{v}`"))?
        }
        None => 0,
    };
    let c = CheckIn {
        user: text(pos.user, "user")?,
        poi: text(pos.poi, "poi")?,
        category: text(pos.category, "category")?,
        lat: num(pos.lat, "lat")?,
        lon: num(pos.lon, "lon")?,
        timestamp: parse_timestamp(field(pos.timestamp, "timestamp")?, &cfg.timestamp_format)?,
        tz_offset_min,
    };
    c.validate().map_err(|e| e.to_string())?;
    Ok(c)
}

/// Reads every row of `path`. Malformed rows are skipped and counted; the
/// call fails when their share exceeds `cfg.max_malformed_fraction`.
pub fn ingest(path: &Path, cfg: &DataConfig) -> Result<(Vec<CheckIn>, IngestReport)> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(cfg.delimiter.byte())
        .has_headers(cfg.has_header)
        .flexible(true)
        .quoting(cfg.delimiter.byte() == b',')
        .from_reader(std::io::BufReader::new(file));
    let headers =
        if cfg.has_header { Some(reader.headers().map_err(|e| CliError::format(path, e))?.clone()) } else { None };
    let h = headers.as_ref();
    let m = &cfg.columns;
    let pos = Positions {
        user: resolve(&m.user, h)?,
        poi: resolve(&m.poi, h)?,
        category: resolve(&m.category, h)?,
        lat: resolve(&m.lat, h)?,
        lon: resolve(&m.lon, h)?,
        timestamp: resolve(&m.timestamp, h)?,
        tz_offset: m.tz_offset.as_ref().map(|c| resolve(c, h)).transpose()?,
    };
    let mut report = IngestReport::default();
    let mut out = Vec::new();
    let mut raw = csv::ByteRecord::new();
    loop {
        let line = reader.position().line();
        match reader.read_byte_record(&mut raw) {
            Ok(false) => break,
            Ok(true) => {
                report.rows += 1;
                // the public dumps carry a few Latin-1 venue names
                let rec = csv::StringRecord::from_byte_record_lossy(raw.clone());
                match parse_row(&rec, &pos, cfg) {
                    Ok(c) => out.push(c),
                    Err(reason) => {
                        report.malformed += 1;
                        if report.errors.len() < REPORTED_ERRORS {
                            report.errors.push((rec.position().map_or(line, |p| p.line()), reason));
                        }
                    }
                }
            }
            Err(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => return Err(CliError::format(path, e)),
            Err(e) => {
                report.rows += 1;
                report.malformed += 1;
                if report.errors.len() < REPORTED_ERRORS {
                    report.errors.push((line, e.to_string()));
                }
            }
        }
    }
    report.parsed = out.len();
    if report.malformed_fraction() > cfg.max_malformed_fraction {
        return Err(CliError::Ingest(format!(
            "{}: {} of {} rows malformed ({:.1}%), first: {}",
            path.display(),
            report.malformed,
            report.rows,
            100.0 * report.malformed_fraction(),
            report.errors.first().map_or(String::new(), |(l, r)| format!("line {l}: {r}")),
        )));
    }
    Ok((out, report))
}
