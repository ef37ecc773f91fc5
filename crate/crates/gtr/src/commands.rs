//! The subcommands. Each reads from and writes to `config.out_dir`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gtr_core::data::{apply_regions, filter_and_index, partition_regions, segment_and_split, Trajectory};
use gtr_core::embeddings::{build_edges, pretrain, Pretrained};
use gtr_core::model::GtrModel;
use gtr_core::train::{evaluate, fit, TrainState};

use crate::bench;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats::{
    metric_values, read_manifest, read_tables, write_history, write_json, write_manifest, write_rows, write_tables,
    Checkpoint, Dataset, DatasetStats, METRIC_COLUMNS,
};
use crate::ingest::ingest;
use crate::scene;
use crate::viz::{export_poincare_viz, mean_radii};

pub const DATASET_FILE: &str = "dataset.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn manifest(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.csv", self.name()))
    }
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<Trajectory>> {
    read_manifest(&split.manifest(&cfg.out_dir))
}

/// Preprocesses the configured check-in file into `dataset.json` and the
/// three split manifests.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<String> {
    let path = cfg.data.path.as_deref().ok_or_else(|| CliError::Config("data.path is not set".into()))?;
    if !path.is_file() {
        return Err(CliError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "check-in file not found")));
    }
    let (checkins, report) = ingest(path, &cfg.data)?;
    let (mut vocab, mut steps, filter) = filter_and_index(&checkins, cfg.data.min_poi_checkins)?;
    let regions = partition_regions(&vocab.pois, cfg.data.regions, cfg.seed, cfg.data.region_iters)?;
    apply_regions(&mut vocab, &mut steps, &regions, cfg.data.regions);
    let splits = segment_and_split(&steps, &cfg.data.segment);
    if splits.train.is_empty() {
        return Err(gtr_core::Error::Data("no user has a usable training segment".into()).into());
    }
    let stats = DatasetStats {
        rows: report.rows,
        malformed_rows: report.malformed,
        checkins_kept: filter.kept_checkins,
        pois_removed: filter.removed_pois,
        users: vocab.n_users(),
        pois: vocab.n_pois(),
        categories: vocab.n_categories(),
        regions: vocab.n_regions,
        train: splits.train.len(),
        val: splits.val.len(),
        test: splits.test.len(),
        dropped_users: splits.dropped_users,
        dropped_segments: splits.dropped_segments,
    };
    let dir = &cfg.out_dir;
    write_json(&dir.join(DATASET_FILE), &Dataset::new(vocab, stats.clone()))?;
    for (split, trajs) in [(Split::Train, &splits.train), (Split::Val, &splits.val), (Split::Test, &splits.test)] {
        write_manifest(&split.manifest(dir), trajs)?;
    }
    let errors: Vec<Vec<String>> = report.errors.iter().map(|(l, r)| vec![l.to_string(), r.clone()]).collect();
    write_rows(&dir.join("ingest_errors.csv"), &["line", "reason"], &errors)?;
    let mut s = String::new();
    writeln!(s, "rows {} (malformed {})", stats.rows, stats.malformed_rows).ok();
    writeln!(
        s,
        "users {} / pois {} / categories {} / regions {}",
        stats.users, stats.pois, stats.categories, stats.regions
    )
    .ok();
    write!(s, "trajectories train {} / val {} / test {}", stats.train, stats.val, stats.test).ok();
    Ok(s)
}

/// Contrastive pretraining on the training split.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<String> {
    let ds = Dataset::read(&cfg.out_dir.join(DATASET_FILE))?;
    let train = load_split(cfg, Split::Train)?;
    let edges = build_edges(&train, cfg.pretrain.pp_gap_hours)?;
    let report = pretrain(&edges, ds.counts(), cfg.model.dim, &cfg.pretrain, cfg.seed)?;
    write_tables(&cfg.out_dir, &report.pretrained)?;
    let rows: Vec<Vec<String>> =
        report.epoch_losses.iter().enumerate().map(|(e, l)| vec![e.to_string(), l.to_string()]).collect();
    write_rows(&cfg.out_dir.join("pretrain_history.csv"), &["epoch", "loss"], &rows)?;
    let radii = mean_radii(&crate::viz::disk_points(&report.pretrained.tables)?);
    Ok(format!(
        "edges {} / epochs {} / final loss {}\nmean disk radius user {:.4} poi {:.4} category {:.4} region {:.4}",
        edges.total(),
        report.epoch_losses.len(),
        report.epoch_losses.last().map_or("n/a".into(), |l| format!("{l:.6}")),
        radii[0],
        radii[1],
        radii[2],
        radii[3],
    ))
}

fn pretrained_tables(cfg: &RunConfig, ds: &Dataset) -> Result<Option<Pretrained>> {
    if cfg.ablations()?.no_pretrain {
        return Ok(None);
    }
    let header = cfg.out_dir.join("tables_header.csv");
    if !header.is_file() {
        return Err(CliError::Config(format!(
            "{} is missing; run `pretrain` first or pass --ablate no_pretrain",
            header.display()
        )));
    }
    let pre = read_tables(&cfg.out_dir)?;
    if pre.tables.counts() != ds.counts() || pre.tables.dim() != cfg.model.dim {
        return Err(CliError::Config("pretrained tables do not match the dataset or model.dim".into()));
    }
    Ok(Some(pre))
}

/// Builds a fresh model for the dataset in `out_dir`.
pub fn build_model(cfg: &RunConfig, ds: &Dataset) -> Result<GtrModel> {
    let pre = pretrained_tables(cfg, ds)?;
    Ok(GtrModel::new(
        cfg.model.clone(),
        cfg.ablations()?,
        ds.counts(),
        ds.poi_coords(),
        &ds.anchor_points(),
        pre.as_ref().map(|p| &p.tables),
        cfg.seed,
    )?)
}

/// Trains end to end, writing `checkpoint.json` and `history.csv`. With
/// `resume`, continues from the existing checkpoint up to `train.epochs`.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<String> {
    let ds = Dataset::read(&cfg.out_dir.join(DATASET_FILE))?;
    let train = load_split(cfg, Split::Train)?;
    let val = load_split(cfg, Split::Val)?;
    let ckpt_path = cfg.out_dir.join(CHECKPOINT_FILE);
    let (mut model, mut state) = if resume {
        let c = Checkpoint::read(&ckpt_path)?;
        if c.model.ablations != cfg.ablations()? || c.model.config != cfg.model {
            return Err(CliError::Config("checkpoint was trained with a different model config".into()));
        }
        (c.model, c.state)
    } else {
        let m = build_model(cfg, &ds)?;
        let s = TrainState::new(&m);
        (m, s)
    };
    let variant = model.ablations.label();
    let mut log = String::new();
    let result = fit(&mut model, &mut state, &train, &val, &cfg.train, cfg.seed, |r| {
        let mrr = r.val.as_ref().map_or("n/a".to_string(), |m| format!("{:.4}", m.mrr));
        writeln!(log, "epoch {} loss {:.6} val_mrr {mrr}", r.epoch, r.train_loss).ok();
    });
    // history and checkpoint are written even when an epoch fails, so
    // completed work survives
    write_history(&cfg.out_dir.join("history.csv"), &variant, &state.history)?;
    write_json(&ckpt_path, &Checkpoint::new(cfg.clone(), ds.vocab, model, state.clone()))?;
    result?;
    write!(log, "variant {variant}, best epoch {:?}", state.best_epoch).ok();
    Ok(log)
}

fn checkpoint_path(cfg: &RunConfig, given: Option<&Path>) -> PathBuf {
    given.map_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE), Path::to_path_buf)
}

/// Metrics on the last check-in of each trajectory of `split`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, split: Split) -> Result<String> {
    let ckpt = Checkpoint::read(&checkpoint_path(cfg, checkpoint))?;
    let trajs = load_split(cfg, split)?;
    if !trajs.iter().any(|t| t.len() >= 2) {
        return Err(gtr_core::Error::Data(format!("split `{}` has no trajectory to evaluate", split.name())).into());
    }
    let ev = evaluate(&ckpt.best_model(), &trajs)?;
    let mut header = vec!["task", "queries"];
    header.extend(METRIC_COLUMNS);
    let rows: Vec<Vec<String>> = [("poi", &ev.poi), ("category", &ev.category), ("region", &ev.region)]
        .iter()
        .map(|(task, m)| {
            let mut r = vec![task.to_string(), m.queries.to_string()];
            r.extend(metric_values(m).iter().map(|v| v.to_string()));
            r
        })
        .collect();
    write_rows(&cfg.out_dir.join(format!("eval_{}.csv", split.name())), &header, &rows)?;
    let v = metric_values(&ev.poi);
    Ok(format!(
        "{} queries on {}: ND@1 {:.4} ND@5 {:.4} ND@10 {:.4} MRR {:.4} ACC@5 {:.4} ACC@10 {:.4}",
        ev.poi.queries,
        split.name(),
        v[0],
        v[1],
        v[2],
        v[3],
        v[5],
        v[6]
    ))
}

/// Switching-subset report: `scene_summary.csv`, `scene_steps.csv`,
/// `subset_labels.csv`.
pub fn cmd_scene(cfg: &RunConfig, checkpoint: Option<&Path>, split: Split, balance: bool) -> Result<String> {
    let ckpt = Checkpoint::read(&checkpoint_path(cfg, checkpoint))?;
    let trajs = load_split(cfg, split)?;
    let report = scene::analyze(&ckpt.best_model(), &trajs, balance)?;
    let fmt = |x: f64| if x.is_nan() { String::new() } else { x.to_string() };
    let summary: Vec<Vec<String>> = report
        .subsets
        .iter()
        .map(|s| {
            vec![
                s.subset.name().to_string(),
                s.trajectories.to_string(),
                fmt(s.acc5),
                fmt(s.acc10),
                fmt(s.change_rate),
                s.transition_points.to_string(),
                fmt(s.mean_step),
            ]
        })
        .collect();
    write_rows(
        &cfg.out_dir.join("scene_summary.csv"),
        &["subset", "trajectories", "acc5", "acc10", "change_rate", "transition_points", "mean_step"],
        &summary,
    )?;
    let mut hist = Vec::new();
    for s in &report.subsets {
        for (b, c) in s.histogram.iter().enumerate() {
            hist.push(vec![
                s.subset.name().to_string(),
                report.edges[b].to_string(),
                report.edges[b + 1].to_string(),
                c.to_string(),
            ]);
        }
    }
    write_rows(&cfg.out_dir.join("scene_steps.csv"), &["subset", "bin_lo", "bin_hi", "count"], &hist)?;
    let kept: std::collections::BTreeSet<usize> = report.balanced.iter().flatten().copied().collect();
    let labels: Vec<Vec<String>> = report
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![i.to_string(), r.frequency.to_string(), r.subset.name().to_string(), kept.contains(&i).to_string()]
        })
        .collect();
    write_rows(&cfg.out_dir.join("subset_labels.csv"), &["trajectory", "frequency", "subset", "balanced"], &labels)?;
    let mut s = String::new();
    for x in &report.subsets {
        writeln!(
            s,
            "{:>6}: n {} acc@5 {:.4} acc@10 {:.4} change {:.4} mean dt {:.4}",
            x.subset.name(),
            x.trajectories,
            x.acc5,
            x.acc10,
            x.change_rate,
            x.mean_step
        )
        .ok();
    }
    Ok(s.trim_end().to_string())
}

/// Disk coordinates of pretrained tables, or of a checkpoint's tables.
pub fn cmd_viz(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<String> {
    let (tables, vocab) = match checkpoint {
        Some(p) => {
            let c = Checkpoint::read(p)?;
            (c.best_model().entity_tables(), Some(c.vocab))
        }
        None => {
            let ds = Dataset::read(&cfg.out_dir.join(DATASET_FILE)).ok();
            (read_tables(&cfg.out_dir)?.tables, ds.map(|d| d.vocab))
        }
    };
    let points = export_poincare_viz(&cfg.out_dir, &tables, vocab.as_ref())?;
    let r = mean_radii(&points);
    Ok(format!(
        "{} points; mean radius user {:.4} poi {:.4} category {:.4} region {:.4}",
        points.len(),
        r[0],
        r[1],
        r[2],
        r[3]
    ))
}

/// Timing table `bench.csv`. Always written; failed cells carry a message.
pub fn cmd_bench(cfg: &RunConfig) -> Result<String> {
    let cells = bench::run(&cfg.bench, cfg.seed);
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            let (ms, status) = match &c.median_ms {
                Ok(ms) => (ms.to_string(), "ok".to_string()),
                Err(e) => (String::new(), e.clone()),
            };
            vec![c.component.to_string(), c.dim.to_string(), c.len.to_string(), ms, status]
        })
        .collect();
    write_rows(&cfg.out_dir.join("bench.csv"), &["component", "dim", "len", "median_ms", "status"], &rows)?;
    let mut s = String::new();
    for c in &cells {
        match &c.median_ms {
            Ok(ms) => writeln!(s, "{:<9} d={:<3} L={:<5} {ms:>10.3} ms", c.component, c.dim, c.len),
            Err(e) => writeln!(s, "{:<9} d={:<3} L={:<5} failed: {e}", c.component, c.dim, c.len),
        }
        .ok();
    }
    Ok(s.trim_end().to_string())
}
