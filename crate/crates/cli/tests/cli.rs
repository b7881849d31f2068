use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[data]
seed = 3

[data.synth]
n_cells = 30
n_communities = 3
days = 4
poi_categories = 4

[coarsening]
m = 3

[model]
n_cells = 30
n_super = 3
k = 4
d = 16
heads = 2
n_queries = 4
poi_dim = 4
ffn_hidden = 32
pair_hidden = 8

[train]
max_epochs = 2
batch_size = 8
"#;

fn odced(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odced")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = odced(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_and_version_on_every_subcommand() {
    for sub in ["gen-data", "coarsen", "train", "predict", "evaluate", "verify"] {
        assert!(ok(&[sub, "--help"]).contains("Usage"));
        assert!(ok(&[sub, "--version"]).contains(env!("CARGO_PKG_VERSION")));
    }
    assert!(ok(&["--version"]).starts_with("odced "));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(odced(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(odced(&[]).status.code(), Some(1));
    assert_eq!(odced(&["evaluate"]).status.code(), Some(1));
}

#[test]
fn data_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = odced(&["predict", "--ckpt", p(&missing), "--history", p(&missing), "--out", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));

    let out = odced(&["gen-data", "--out", p(dir.path()), "--set", "coarsening.m=7"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("coarsening.m"));
}

#[test]
fn verify_passes() {
    let out = ok(&["verify"]);
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
    assert!(out.lines().count() >= 5);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("run.toml");
    fs::write(&cfg, SMALL).unwrap();
    let data = root.join("data");
    ok(&["gen-data", "--config", p(&cfg), "--out", p(&data)]);
    for f in ["grid.csv", "od.csv", "poi.csv", "truth_assignment.csv", "meta.json"] {
        assert!(data.join(f).exists(), "{f}");
    }

    // seeded generation is byte-identical
    let again = root.join("again");
    ok(&["gen-data", "--config", p(&cfg), "--out", p(&again)]);
    assert_eq!(fs::read(data.join("od.csv")).unwrap(), fs::read(again.join("od.csv")).unwrap());

    let assign = root.join("assignment.csv");
    let msg = ok(&[
        "coarsen",
        "--config",
        p(&cfg),
        "--od",
        p(&data.join("od.csv")),
        "--grid",
        p(&data.join("grid.csv")),
        "--out",
        p(&assign),
        "--truth",
        p(&data.join("truth_assignment.csv")),
    ]);
    assert!(msg.contains("ARI"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(root.join("assignment_report.json")).unwrap()).unwrap();
    assert!(report["ari_vs_truth"].as_f64().unwrap() >= 0.9, "{report}");
    assert!(report["sparsity_after"].as_f64().unwrap() < report["sparsity_before"].as_f64().unwrap());
    assert!(root.join("assignment_coarse_od.csv").exists());

    let train = |tag: &str| {
        let ckpt = root.join(format!("{tag}.json"));
        let hist = root.join(format!("{tag}_history.csv"));
        ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt), "--history", p(&hist)]);
        (fs::read(&ckpt).unwrap(), fs::read(&hist).unwrap())
    };
    let (c1, h1) = train("a");
    let (c2, h2) = train("b");
    assert_eq!(c1, c2);
    assert_eq!(h1, h2);
    let history = String::from_utf8(h1).unwrap();
    assert!(history.starts_with("epoch,train_nll,val_nll,val_wmape,lr"));
    assert_eq!(history.lines().count(), 3);

    let pred = root.join("pred.csv");
    ok(&["predict", "--ckpt", p(&root.join("a.json")), "--history", p(&data.join("od.csv")), "--out", p(&pred)]);
    assert!(fs::read_to_string(&pred).unwrap().starts_with("origin,destination,slot,count"));

    let report = root.join("report.json");
    ok(&["evaluate", "--pred", p(&data.join("od.csv")), "--truth", p(&data.join("od.csv")), "--out", p(&report)]);
    let r: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["cpc"].as_f64(), Some(1.0));
    assert_eq!(r["wmape"].as_f64(), Some(0.0));

    let table = ok(&[
        "evaluate",
        "--config",
        p(&cfg),
        "--baselines",
        "ha,ols,lasso",
        "--data",
        p(&data),
        "--ckpt",
        p(&root.join("a.json")),
    ]);
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "method,rmse,wmape,cpc");
    let methods: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["ha", "ols", "lasso", "od-ced"]);

    let out = odced(&["evaluate", "--config", p(&cfg), "--baselines", "arima", "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(1));
}
