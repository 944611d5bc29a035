use std::fs;
use std::path::Path;
use std::process::Command;

use genrep::dataio::RunConfig;
use genrep::experiments::{self, plot, ExperimentPlan, Pipeline};
use genrep::Error;

const BIN: &str = env!("CARGO_BIN_EXE_genrep");

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("pool", "64"),
        ("real_test", "4"),
        ("synthetic_test", "4"),
        ("pretrain_steps", "2"),
        ("finetune_steps", "2"),
        ("projection_steps", "2"),
        ("distill_steps", "2"),
        ("distill_samples", "4"),
        ("n_annotated", "2"),
        ("purity_images", "2"),
        ("purity_pixels", "20"),
        ("rounds", "1"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn curve_plot_matches_golden() {
    let svg = plot::render(include_str!("golden/curve.csv"), plot::PlotKind::Curve).unwrap();
    assert_eq!(svg, include_str!("golden/curve.svg"));
    for line in svg.lines().filter(|l| l.starts_with("<polyline")) {
        let pts = line.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split(' ').count(), 6);
    }
    assert_eq!(svg.matches("<polyline").count(), 2);
}

#[test]
fn empty_csv_is_a_schema_error() {
    for text in ["", "n,seed,accuracy\n"] {
        assert!(matches!(plot::render(text, plot::PlotKind::Curve), Err(Error::Format(_))));
    }
    assert!(matches!(plot::render("a,b\n1,2\n", plot::PlotKind::Bars), Err(Error::Format(_))));
}

#[test]
fn sweep_rows_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let plan = |out: &str| ExperimentPlan {
        pipeline: Pipeline::Fig5Sweep,
        config: tiny(),
        out: dir.path().join(out),
    };
    let files = experiments::run(&plan("a")).unwrap();
    experiments::run(&plan("b")).unwrap();
    let (a, b) = (dir.path().join("a/metrics.csv"), dir.path().join("b/metrics.csv"));
    assert_eq!(rows(&a), 36);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let listing = fs::read_to_string(dir.path().join("a/outputs.txt")).unwrap();
    for f in &files {
        assert!(f.exists(), "{}", f.display());
    }
    assert!(listing.contains("metrics.csv") && listing.contains("run.cfg"));
    let cfg = RunConfig::load(dir.path().join("a/run.cfg")).unwrap();
    assert_eq!(cfg, tiny());
}

#[test]
fn proj_curve_has_18_rows() {
    let dir = tempfile::tempdir().unwrap();
    let report = experiments::fig3a_curve(&tiny(), dir.path()).unwrap();
    assert_eq!(report.rows.len(), 18);
    assert_eq!(rows(&dir.path().join("projection_curve.csv")), 18);
}

#[test]
fn other_pipelines_write_their_manifests() {
    let dir = tempfile::tempdir().unwrap();
    for p in [Pipeline::Table1Distill, Pipeline::Fig4Purity] {
        let out = dir.path().join(p.name());
        experiments::run(&ExperimentPlan {
            pipeline: p,
            config: tiny(),
            out: out.clone(),
        })
        .unwrap();
        assert!(out.join("outputs.txt").exists() && out.join("run.cfg").exists());
    }
    assert_eq!(rows(&dir.path().join("table1-distill/metrics.csv")), 6);
    assert_eq!(rows(&dir.path().join("fig4-purity/purity.csv")), 3);
}

fn cli(args: &[&str], threads: &str) -> std::process::Output {
    Command::new(BIN).args(args).env("GENREP_THREADS", threads).output().unwrap()
}

const TINY_SETS: [&str; 16] = [
    "--set", "pool=32", "--set", "real_test=4", "--set", "pretrain_steps=2", "--set", "finetune_steps=2",
    "--set", "rounds=1", "--set", "fractions=1/16,1", "--set", "seeds=2", "--set", "synthetic_test=2",
];

#[test]
fn parallel_cells_match_serial() {
    let dir = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for (name, threads) in [("one", "1"), ("two", "2")] {
        let out = dir.path().join(name);
        let mut args = vec!["sweep", "--seed", "5", "--out", out.to_str().unwrap()];
        args.extend(TINY_SETS);
        let o = cli(&args, threads);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.grt");
    let out = dir.path().join("x.grt");
    let o = cli(&["finetune", "--backbone", missing.to_str().unwrap(), "--out", out.to_str().unwrap()], "1");
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error: missing-prerequisite: "), "{err}");
    assert_eq!(err.lines().count(), 1);

    let o = cli(&["sweep", "--set", "bogus=1"], "1");
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: config: "));
    assert_eq!(cli(&["sweep", "--set", "lr=-1"], "1").status.code(), Some(3));
    assert_eq!(cli(&["no-such-command"], "1").status.code(), Some(3));
    assert_eq!(cli(&["plot", "--csv", "x.csv", "--kind", "pie"], "1").status.code(), Some(3));

    let o = cli(&["pretrain", "--steps", "3", "--set", "lr=1e300", "--out", out.to_str().unwrap()], "1");
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}
