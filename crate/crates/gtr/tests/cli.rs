use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gtr_core::synthetic::category_tree;

const BIN: &str = env!("CARGO_BIN_EXE_gtr");

/// Small model and short runs so the pipeline finishes quickly.
const SMALL: [&str; 15] = [
    "model.dim=8",
    "model.heads=2",
    "model.d_geo=4",
    "model.d_time=4",
    "model.time_freqs=2",
    "model.geo.anchors=6",
    "model.geo.top_k=3",
    "data.regions=3",
    "data.min_poi_checkins=1",
    "data.segment.gap_hours=6",
    "pretrain.epochs=3",
    "train.epochs=2",
    "train.batch_size=8",
    "bench.lengths=[16, 32]",
    "bench.dims=[8]",
];

/// Writes a comma-separated check-in file with a header row and returns the
/// number of distinct POIs in it.
fn write_checkins(path: &Path) -> usize {
    let c = category_tree(6, 10, 12, 2, 11);
    let visited: std::collections::BTreeSet<usize> =
        c.trajectories.iter().flat_map(|t| t.steps.iter().map(|s| s.poi)).collect();
    let mut s = String::from("user,venue,cat,latitude,longitude,unix,tz\n");
    for t in &c.trajectories {
        for st in &t.steps {
            let (lat, lon) = c.poi_coords[st.poi];
            s.push_str(&format!("u{},v{},c{},{lat},{lon},{},0\n", t.user, st.poi, st.category, st.timestamp));
        }
    }
    fs::write(path, s).unwrap();
    visited.len()
}

fn config(dir: &Path, data: &Path) -> PathBuf {
    let p = dir.join("run.toml");
    let text = format!(
        r#"seed = 7
out_dir = "{}"

[data]
path = "{}"
delimiter = "comma"
has_header = true
timestamp_format = "unix"

[data.columns]
user = "user"
poi = "venue"
category = "cat"
lat = "latitude"
lon = "longitude"
timestamp = "unix"
tz_offset = "tz"
"#,
        dir.join("out").display(),
        data.display()
    );
    fs::write(&p, text).unwrap();
    p
}

fn gtr(cfg: &Path, args: &[&str], extra: &[&str]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).arg("--config").arg(cfg);
    for s in SMALL.iter().chain(extra) {
        cmd.arg("--set").arg(s);
    }
    cmd.output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf, usize) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("checkins.csv");
    let pois = write_checkins(&data);
    let cfg = config(dir.path(), &data);
    (dir, cfg, pois)
}

#[test]
fn full_pipeline() {
    let (dir, cfg, pois) = setup();
    let out = dir.path().join("out");
    let msg = ok(gtr(&cfg, &["ingest"], &[]));
    assert!(msg.contains(&format!("users 6 / pois {pois} / categories 3 / regions 3")), "{msg}");
    let first = fs::read(out.join("train.csv")).unwrap();
    ok(gtr(&cfg, &["ingest"], &[]));
    assert_eq!(fs::read(out.join("train.csv")).unwrap(), first, "ingest is not idempotent");

    ok(gtr(&cfg, &["pretrain"], &[]));
    let tables = fs::read(out.join("tables.csv")).unwrap();
    ok(gtr(&cfg, &["pretrain"], &[]));
    assert_eq!(fs::read(out.join("tables.csv")).unwrap(), tables, "pretrain is not deterministic");

    ok(gtr(&cfg, &["train"], &[]));
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.lines().nth(1).unwrap().contains(",full,"));

    let eval = ok(gtr(&cfg, &["eval", "--split", "test"], &[]));
    assert!(eval.contains("MRR"), "{eval}");
    let report = fs::read_to_string(out.join("eval_test.csv")).unwrap();
    assert!(report.starts_with("task,queries,ndcg1,ndcg5,ndcg10,mrr,acc1,acc5,acc10"));

    ok(gtr(&cfg, &["scene", "--unbalanced"], &[]));
    let summary = fs::read_to_string(out.join("scene_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    let labels = fs::read_to_string(out.join("subset_labels.csv")).unwrap();
    let test_rows = fs::read_to_string(out.join("test.csv")).unwrap().lines().count() - 1;
    assert_eq!(labels.lines().count() - 1, test_rows, "subsets must partition the split");

    ok(gtr(&cfg, &["viz"], &[]));
    let viz = fs::read_to_string(out.join("viz_points.csv")).unwrap();
    assert_eq!(viz.lines().count() - 1, 6 + pois + 3 + 3);
    for line in viz.lines().skip(1) {
        let r: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(r < 1.0);
    }
    assert_eq!(fs::read_to_string(out.join("viz_links.csv")).unwrap().lines().count(), pois + 1);

    ok(gtr(&cfg, &["bench"], &[]));
    let bench = fs::read_to_string(out.join("bench.csv")).unwrap();
    assert_eq!(bench.lines().count(), 1 + 2 * 2);
}

#[test]
fn resume_reproduces_the_next_epoch() {
    let (dir, cfg, _) = setup();
    let out = dir.path().join("out");
    ok(gtr(&cfg, &["ingest"], &[]));
    ok(gtr(&cfg, &["train"], &["train.epochs=3", "ablate=[\"no_pretrain\"]"]));
    let straight = fs::read_to_string(out.join("history.csv")).unwrap();
    ok(gtr(&cfg, &["train"], &["train.epochs=2", "ablate=[\"no_pretrain\"]"]));
    ok(gtr(&cfg, &["train", "--resume"], &["train.epochs=3", "ablate=[\"no_pretrain\"]"]));
    let resumed = fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(straight, resumed);
    assert!(straight.lines().nth(1).unwrap().contains(",no_pretrain,"));
}

#[test]
fn zero_epochs_keep_the_initialisation() {
    let (dir, cfg, _) = setup();
    let out = dir.path().join("out");
    ok(gtr(&cfg, &["ingest"], &[]));
    ok(gtr(&cfg, &["pretrain"], &["pretrain.epochs=0"]));
    let pre = gtr_mamba::formats::read_tables(&out).unwrap();
    let init = gtr_core::embeddings::initial_pretrained(pre.tables.counts(), 8, 0.02, 7);
    assert_eq!(pre, init);
}

#[test]
fn error_exit_codes() {
    let (dir, cfg, _) = setup();
    let out = dir.path().join("out");

    let missing = gtr(&cfg, &["ingest"], &["data.path=\"/nonexistent/checkins.csv\""]);
    assert_eq!(missing.status.code(), Some(5));
    assert!(!out.exists(), "a failed ingest must not leave output behind");

    assert_eq!(gtr(&cfg, &["ingest"], &["model.bogus=1"]).status.code(), Some(2));
    assert_eq!(gtr(&cfg, &["train"], &["--ablate", "no_such"]).status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    let mut text = fs::read_to_string(dir.path().join("checkins.csv")).unwrap();
    for i in 0..200 {
        text.push_str(&format!("u0,v0,c0,95.0,0.0,{i},0\n"));
    }
    fs::write(&bad, text).unwrap();
    let r = gtr(&cfg, &["ingest"], &[&format!("data.path=\"{}\"", bad.display())]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));

    ok(gtr(&cfg, &["ingest"], &[]));
    fs::write(out.join("val.csv"), "user,pois,categories,regions,timestamps,tz_offsets\n").unwrap();
    ok(gtr(&cfg, &["train"], &["ablate=[\"no_pretrain\"]", "train.epochs=1"]));
    let empty = gtr(&cfg, &["eval", "--split", "val"], &[]);
    assert_eq!(empty.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&empty.stderr).contains("no trajectory"));
}
