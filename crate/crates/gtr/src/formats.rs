//! On-disk formats. Every file is CSV with a header row or versioned JSON;
//! see `docs/formats.md` for the field-by-field description.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use gtr_core::data::{Step, Trajectory, Vocab};
use gtr_core::embeddings::{EdgeType, EntityKind, EntityTable, EntityTables, Pretrained};
use gtr_core::manifold::RotationParams;
use gtr_core::model::GtrModel;
use gtr_core::predictor::RankMetrics;
use gtr_core::tensor::Tensor;
use gtr_core::train::{EpochRecord, TrainState};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const DATASET_FORMAT: &str = "gtr-dataset";
pub const CHECKPOINT_FORMAT: &str = "gtr-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(f))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::format(path, e)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer(&mut w, value).map_err(|e| CliError::format(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| CliError::format(path, e))
}

fn check_header(path: &Path, format: &str, version: u32, want: &str) -> Result<()> {
    if format != want {
        return Err(CliError::format(path, format!("expected a `{want}` file, found `{format}`")));
    }
    if version != FORMAT_VERSION {
        return Err(CliError::format(path, format!("unsupported version {version}")));
    }
    Ok(())
}

/// Counts reported by preprocessing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub rows: usize,
    pub malformed_rows: usize,
    pub checkins_kept: usize,
    pub pois_removed: usize,
    pub users: usize,
    pub pois: usize,
    pub categories: usize,
    pub regions: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub dropped_users: usize,
    pub dropped_segments: usize,
}

/// `dataset.json`: vocabulary and statistics of one preprocessing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub format: String,
    pub version: u32,
    pub vocab: Vocab,
    pub stats: DatasetStats,
}

impl Dataset {
    pub fn new(vocab: Vocab, stats: DatasetStats) -> Self {
        Dataset { format: DATASET_FORMAT.into(), version: FORMAT_VERSION, vocab, stats }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let d: Dataset = read_json(path)?;
        check_header(path, &d.format, d.version, DATASET_FORMAT)?;
        Ok(d)
    }

    pub fn counts(&self) -> [usize; 4] {
        [self.vocab.n_users(), self.vocab.n_pois(), self.vocab.n_categories(), self.vocab.n_regions]
    }

    pub fn poi_coords(&self) -> Vec<(f64, f64)> {
        self.vocab.pois.iter().map(|p| (p.lat, p.lon)).collect()
    }

    pub fn anchor_points(&self) -> Vec<[f64; 3]> {
        self.vocab.pois.iter().map(|p| gtr_core::data::unit_vector(p.lat, p.lon)).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    user: usize,
    pois: String,
    categories: String,
    regions: String,
    timestamps: String,
    tz_offsets: String,
}

fn join<T: ToString>(xs: impl Iterator<Item = T>) -> String {
    xs.map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn split<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    s.split_whitespace().map(|t| t.parse::<T>().map_err(|_| format!("bad value `{t}`"))).collect()
}

/// One trajectory per row; sequences are space-separated.
pub fn write_manifest(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for t in trajs {
        w.serialize(ManifestRow {
            user: t.user,
            pois: join(t.steps.iter().map(|s| s.poi)),
            categories: join(t.steps.iter().map(|s| s.category)),
            regions: join(t.steps.iter().map(|s| s.region)),
            timestamps: join(t.steps.iter().map(|s| s.timestamp)),
            tz_offsets: join(t.steps.iter().map(|s| s.tz_offset_min)),
        })
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<Trajectory>> {
    let mut r = csv_reader(path)?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(csv_err(path))?;
        let bad = |m: String| CliError::format(path, format!("row {}: {m}", i + 1));
        let pois: Vec<usize> = split(&row.pois).map_err(bad)?;
        let cats: Vec<usize> = split(&row.categories).map_err(bad)?;
        let regs: Vec<usize> = split(&row.regions).map_err(bad)?;
        let ts: Vec<i64> = split(&row.timestamps).map_err(bad)?;
        let tz: Vec<i32> = split(&row.tz_offsets).map_err(bad)?;
        let n = pois.len();
        if [cats.len(), regs.len(), ts.len(), tz.len()].iter().any(|&l| l != n) {
            return Err(bad("sequence lengths differ".into()));
        }
        let steps = (0..n)
            .map(|k| Step { poi: pois[k], category: cats[k], region: regs[k], timestamp: ts[k], tz_offset_min: tz[k] })
            .collect();
        let t = Trajectory { user: row.user, steps };
        t.check_sorted().map_err(|e| bad(e.to_string()))?;
        out.push(t);
    }
    Ok(out)
}

/// Writes `tables_header.csv`, `tables.csv` and `rotations.csv` into `dir`.
pub fn write_tables(dir: &Path, pre: &Pretrained) -> Result<()> {
    let dim = pre.tables.dim();
    let hp = dir.join("tables_header.csv");
    let mut h = csv_writer(&hp)?;
    h.write_record(["kind", "count", "dim", "curvature"]).map_err(csv_err(&hp))?;
    for t in &pre.tables.tables {
        h.write_record([t.kind.name(), &t.len().to_string(), &dim.to_string(), "1"]).map_err(csv_err(&hp))?;
    }
    h.flush().map_err(|e| CliError::io(&hp, e))?;

    let tp = dir.join("tables.csv");
    let mut w = csv_writer(&tp)?;
    let mut header = vec!["kind".to_string(), "index".into(), "bias".into()];
    header.extend((0..dim).map(|k| format!("v{k}")));
    w.write_record(&header).map_err(csv_err(&tp))?;
    for t in &pre.tables.tables {
        for i in 0..t.len() {
            let mut row = vec![t.kind.name().to_string(), i.to_string(), t.biases[i].to_string()];
            row.extend(t.vectors.row(i).iter().map(|x| x.to_string()));
            w.write_record(&row).map_err(csv_err(&tp))?;
        }
    }
    w.flush().map_err(|e| CliError::io(&tp, e))?;

    let rp = dir.join("rotations.csv");
    let mut w = csv_writer(&rp)?;
    w.write_record(["edge_type", "block", "angle"]).map_err(csv_err(&rp))?;
    for (et, r) in EdgeType::ALL.iter().zip(&pre.rotations) {
        for (b, a) in r.angles.iter().enumerate() {
            w.write_record([et.name(), &b.to_string(), &a.to_string()]).map_err(csv_err(&rp))?;
        }
    }
    w.flush().map_err(|e| CliError::io(&rp, e))
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| CliError::format(path, format!("bad number `{s}`")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::format(path, format!("non-finite number `{s}`")))
    }
}

fn parse_usize(path: &Path, s: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| CliError::format(path, format!("bad count `{s}`")))
}

pub fn read_tables(dir: &Path) -> Result<Pretrained> {
    let hp = dir.join("tables_header.csv");
    let mut counts = [0usize; 4];
    let mut dim = None;
    for rec in csv_reader(&hp)?.records() {
        let rec = rec.map_err(csv_err(&hp))?;
        let kind =
            EntityKind::parse(&rec[0]).ok_or_else(|| CliError::format(&hp, format!("unknown kind `{}`", &rec[0])))?;
        counts[kind.index()] = parse_usize(&hp, &rec[1])?;
        let d = parse_usize(&hp, &rec[2])?;
        if *dim.get_or_insert(d) != d {
            return Err(CliError::format(&hp, "tables disagree on dimension"));
        }
    }
    let dim = dim.ok_or_else(|| CliError::format(&hp, "no tables listed"))?;
    let mut tables = EntityKind::ALL.map(|kind| EntityTable {
        kind,
        vectors: Tensor::zeros(counts[kind.index()], dim),
        biases: vec![0.0; counts[kind.index()]],
    });
    let mut seen = EntityKind::ALL.map(|k| vec![false; counts[k.index()]]);
    let tp = dir.join("tables.csv");
    for rec in csv_reader(&tp)?.records() {
        let rec = rec.map_err(csv_err(&tp))?;
        if rec.len() != dim + 3 {
            return Err(CliError::format(&tp, format!("row has {} fields, expected {}", rec.len(), dim + 3)));
        }
        let kind =
            EntityKind::parse(&rec[0]).ok_or_else(|| CliError::format(&tp, format!("unknown kind `{}`", &rec[0])))?;
        let k = kind.index();
        let i = parse_usize(&tp, &rec[1])?;
        if i >= counts[k] {
            return Err(CliError::format(&tp, format!("{} index {i} out of range", kind.name())));
        }
        tables[k].biases[i] = parse_f64(&tp, &rec[2])?;
        for c in 0..dim {
            tables[k].vectors.set(i, c, parse_f64(&tp, &rec[3 + c])?);
        }
        seen[k][i] = true;
    }
    if let Some(k) = EntityKind::ALL.iter().find(|k| seen[k.index()].iter().any(|s| !s)) {
        return Err(CliError::format(&tp, format!("missing rows for {}", k.name())));
    }
    let mut rotations = EdgeType::ALL.map(|_| RotationParams::identity(dim));
    let rp = dir.join("rotations.csv");
    for rec in csv_reader(&rp)?.records() {
        let rec = rec.map_err(csv_err(&rp))?;
        let et = EdgeType::parse(&rec[0])
            .ok_or_else(|| CliError::format(&rp, format!("unknown edge type `{}`", &rec[0])))?;
        let b = parse_usize(&rp, &rec[1])?;
        let slot = rotations[et.index()]
            .angles
            .get_mut(b)
            .ok_or_else(|| CliError::format(&rp, format!("block {b} out of range")))?;
        *slot = parse_f64(&rp, &rec[2])?;
    }
    Ok(Pretrained { tables: EntityTables { tables }, rotations })
}

/// `checkpoint.json`: everything needed to evaluate or resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: RunConfig,
    pub vocab: Vocab,
    pub model: GtrModel,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(config: RunConfig, vocab: Vocab, model: GtrModel, state: TrainState) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: FORMAT_VERSION,
            seed: config.seed,
            config,
            vocab,
            model,
            state,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let c: Checkpoint = read_json(path)?;
        check_header(path, &c.format, c.version, CHECKPOINT_FORMAT)?;
        Ok(c)
    }

    /// The model with the best validation parameters swapped in, when
    /// training recorded any.
    pub fn best_model(&self) -> GtrModel {
        let mut m = self.model.clone();
        if let Some(p) = &self.state.best_params {
            m.store = p.clone();
        }
        m
    }
}

pub const METRIC_COLUMNS: [&str; 7] = ["ndcg1", "ndcg5", "ndcg10", "mrr", "acc1", "acc5", "acc10"];

pub fn metric_values(m: &RankMetrics) -> [f64; 7] {
    let n = |k| m.ndcg_at(k).unwrap_or(f64::NAN);
    let a = |k| m.acc_at(k).unwrap_or(f64::NAN);
    [n(1), n(5), n(10), m.mrr, a(1), a(5), a(10)]
}

pub fn write_history(path: &Path, variant: &str, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["epoch".to_string(), "variant".into(), "train_loss".into()];
    header.extend(METRIC_COLUMNS.iter().map(|c| format!("val_{c}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for r in history {
        let mut row = vec![r.epoch.to_string(), variant.to_string(), r.train_loss.to_string()];
        match &r.val {
            Some(m) => row.extend(metric_values(m).iter().map(|v| v.to_string())),
            None => row.extend(METRIC_COLUMNS.iter().map(|_| String::new())),
        }
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Writes rows of displayable cells under `header`.
pub fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
