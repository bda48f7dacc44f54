use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mstdp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mstdp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mstdp(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = r#"
seed = 4

[synth]
agents = 8
grid_width = 6
grid_height = 6
admins = 4

[model]
d_el = 4
d_et = 4
d_hl = 8
d_ht = 4
d_zl = 8
d_zt = 4
n_heads = 2
n_enc_layers = 1
n_dec_layers = 1
n_gnn_layers = 1
ff_mult = 2

[train]
epochs = 1
lr = 0.001

[epi]
runs = 3
population_multiplier = 200
"#;

fn trained(dir: &Path) {
    fs::write(dir.join("mstdp.toml"), TINY).unwrap();
    ok(dir, &["--config", "mstdp.toml", "synth"]);
    ok(dir, &["--config", "mstdp.toml", "build-graph", "--split", "train"]);
    ok(dir, &["train", "--config", "mstdp.toml"]);
}

#[test]
fn one_user_day_prediction_is_one_record() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    ok(dir.path(), &["--config", "mstdp.toml", "predict", "--task", "day", "--users", "0", "--out", "one.jsonl"]);
    let text = fs::read_to_string(dir.path().join("one.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1);
    let rec: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(rec["user"], 0);
    assert_eq!(rec["predicted"], true);
    assert_eq!(rec["slots"].as_array().unwrap().len(), 24);
    // first test day of the default 28-day split
    assert_eq!(rec["day"], 20);

    ok(dir.path(), &["--config", "mstdp.toml", "predict", "--task", "week", "--users", "0,1", "--out", "week.jsonl"]);
    let week = fs::read_to_string(dir.path().join("week.jsonl")).unwrap();
    assert_eq!(week.lines().count(), 14);
}

#[test]
fn commands_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let ckpt = fs::read(dir.path().join("runs/model.ckpt")).unwrap();
    let log = fs::read(dir.path().join("runs/train_log.csv")).unwrap();
    ok(dir.path(), &["--config", "mstdp.toml", "train"]);
    assert_eq!(ckpt, fs::read(dir.path().join("runs/model.ckpt")).unwrap());
    assert_eq!(log, fs::read(dir.path().join("runs/train_log.csv")).unwrap());

    ok(dir.path(), &["--config", "mstdp.toml", "predict", "--out", "a.jsonl"]);
    ok(dir.path(), &["--config", "mstdp.toml", "predict", "--out", "b.jsonl"]);
    assert_eq!(fs::read(dir.path().join("a.jsonl")).unwrap(), fs::read(dir.path().join("b.jsonl")).unwrap());

    ok(dir.path(), &["evaluate", "--pred", "a.jsonl", "--actual", "data/trajectories.jsonl", "--report", "ev"]);
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["task"], "day");
    assert!(metrics["acc"].as_f64().unwrap() >= 0.0);

    ok(dir.path(), &["--config", "mstdp.toml", "epi-sim", "--actual", "data/trajectories.jsonl", "--pred", "a.jsonl", "--runs", "2", "--out", "epi"]);
    let csv = fs::read_to_string(dir.path().join("epi/epi_mae.csv")).unwrap();
    assert!(csv.starts_with("t,mae_i,mae_cum\n"));
    assert_eq!(csv.lines().count(), 7 * 24 + 2);

    ok(dir.path(), &["report", "--out", "rep", "ev", "epi"]);
    assert!(dir.path().join("rep/manifest.json").exists());
}

#[test]
fn contract_violations_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = mstdp(dir.path(), &["build-graph", "--data", "missing"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing input"));

    trained(dir.path());
    let half_hour = TINY.replace("[model]", "[model]\nslots_per_day = 48");
    fs::write(dir.path().join("t48.toml"), half_hour).unwrap();
    let out = mstdp(dir.path(), &["--config", "t48.toml", "train", "--checkpoint", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("slot count mismatch"));

    fs::write(dir.path().join("bad.ckpt"), b"MSTDPCKPgarbage").unwrap();
    let out = mstdp(dir.path(), &["--config", "mstdp.toml", "predict", "--checkpoint", "bad.ckpt"]);
    assert_eq!(out.status.code(), Some(2));

    let out = mstdp(dir.path(), &["synth", "--grid", "5by5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let wild = TINY.replace("lr = 0.001", "lr = 1e300\nclip_norm = 1e300");
    fs::write(dir.path().join("wild.toml"), wild).unwrap();
    let out = mstdp(dir.path(), &["--config", "wild.toml", "train", "--epochs", "3", "--checkpoint", "w.ckpt"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn init_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["--seed", "7", "init-config"]);
    fs::write(dir.path().join("c.toml"), &text).unwrap();
    assert_eq!(ok(dir.path(), &["--config", "c.toml", "init-config"]), text);
    assert!(text.contains("seed = 7"));
}

#[test]
fn default_corpus_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[train]\nepochs = 1\nlr = 0.001\n\n[epi]\nruns = 5\n";
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    ok(dir.path(), &["--config", "c.toml", "run", "--work-dir", "w"]);
    let report = dir.path().join("w/report");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report.join("manifest.json")).unwrap()).unwrap();
    let names: Vec<&str> = manifest.as_array().unwrap().iter().map(|m| m["name"].as_str().unwrap()).collect();
    for f in ["metrics.json", "curves.csv", "motifs.csv", "od_cell.csv", "epi_mae.csv", "epi_summary.json", "train_log.csv"] {
        assert!(names.contains(&f), "{f}");
    }
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(report.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["task"], "week");
    assert_eq!(metrics["n_days"], 200 * 7);
}
