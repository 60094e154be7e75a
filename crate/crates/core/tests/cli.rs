use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lightsql(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lightsql"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn entries(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const TINY: &[&str] = &[
    "--n-layers", "1", "--n-heads", "2", "--d-model", "16", "--d-ff", "32", "--batch-size", "4",
];

fn synth_and_ingest(dir: &Path, style: &str) {
    assert_eq!(lightsql(dir, &["synth", "--seed", "0", "--n", "16", "--out-dir", "syn"]).status.code(), Some(0));
    let out = lightsql(
        dir,
        &["ingest", "--tables", "syn/tables.json", "--examples", "syn/examples.json", "--out", "train.tsv", "--style", style],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn evaluate_identical_files_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let queries = "SELECT name FROM singer\nSELECT count(*) FROM Pets WHERE weight > 10\n";
    fs::write(dir.path().join("p.txt"), queries).unwrap();
    fs::write(dir.path().join("g.txt"), queries).unwrap();
    let out = lightsql(dir.path(), &["evaluate", "--pred", "p.txt", "--gold", "g.txt", "--report", "r.json"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("100.00"));
    let doc = json(&dir.path().join("r.json"));
    for key in ["lfacc", "bleu", "em"] {
        assert_eq!(doc["report"][key], 1.0);
    }
    assert_eq!(doc["format_version"], 1);
    assert_eq!(doc["command"], "evaluate");
    assert!(dir.path().join("r.txt").exists());
}

#[test]
fn usage_errors_exit_one_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("g.txt"), "SELECT 1\n").unwrap();
    let out = lightsql(dir.path(), &["evaluate", "--pred", "g.txt", "--gold", "g.txt", "--report", "r.json", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(lightsql(dir.path(), &["frobnicate"]).status.code(), Some(1));
    let bad_style = lightsql(dir.path(), &["ingest", "--tables", "t", "--examples", "e", "--out", "o", "--style", "xl"]);
    assert_eq!(bad_style.status.code(), Some(1));
    assert_eq!(entries(dir.path()), ["g.txt"]);
}

#[test]
fn data_errors_exit_two_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.txt"), "SELECT 1\nSELECT 2\n").unwrap();
    fs::write(dir.path().join("g.txt"), "SELECT 1\n").unwrap();
    let missing = lightsql(dir.path(), &["evaluate", "--pred", "nope.txt", "--gold", "g.txt", "--report", "r.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.txt"));
    let uneven = lightsql(dir.path(), &["evaluate", "--pred", "p.txt", "--gold", "g.txt", "--report", "r.json"]);
    assert_eq!(uneven.status.code(), Some(2));
    let no_ckpt = lightsql(dir.path(), &["generate", "--checkpoint", "m.ckpt", "--input", "p.txt", "--out", "o.txt"]);
    assert_eq!(no_ckpt.status.code(), Some(2));
    assert_eq!(entries(dir.path()), ["g.txt", "p.txt"]);
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("q.txt"), "SELECT a FROM t\n").unwrap();
    fs::write(dir.path().join("run.toml"), "pred = \"q.txt\"\ngold = \"q.txt\"\nreport = \"file.json\"\nlabel = \"from-file\"\n").unwrap();
    let out = lightsql(dir.path(), &["evaluate", "--config", "run.toml", "--report", "flag.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("from-file"));
    assert!(dir.path().join("flag.json").exists());
    assert!(!dir.path().join("file.json").exists());
    assert_eq!(json(&dir.path().join("flag.json"))["config"]["report"], "flag.json");

    fs::write(dir.path().join("bad.toml"), "pred = \"q.txt\"\nbeam_width = 3\n").unwrap();
    let out = lightsql(dir.path(), &["evaluate", "--config", "bad.toml", "--gold", "q.txt", "--report", "x.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("x.json").exists());
}

#[test]
fn pipeline_writes_checkpoint_history_and_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_and_ingest(d, "t5");
    assert!(d.join("train.tsv.meta.json").exists());
    assert_eq!(fs::read_to_string(d.join("train.tsv")).unwrap().lines().count(), 16);

    let mut args = vec!["train", "--data", "train.tsv", "--style", "t5", "--out", "m.ckpt", "--iterations", "4", "--eval-every", "2"];
    args.extend_from_slice(TINY);
    let out = lightsql(d, &args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let history = fs::read_to_string(d.join("m.ckpt.history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "step,loss,val_lfacc");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].ends_with(',') && !lines[2].ends_with(','));
    assert_eq!(json(&d.join("m.ckpt.history.csv.meta.json"))["command"], "train");

    let out = lightsql(
        d,
        &["generate", "--checkpoint", "m.ckpt", "--input", "train.tsv", "--out", "pred.txt", "--gold-out", "gold.txt", "--max-len", "8", "--beam", "2"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(d.join("pred.txt")).unwrap().lines().count(), 16);
    assert_eq!(fs::read_to_string(d.join("gold.txt")).unwrap().lines().count(), 16);
    let meta = json(&d.join("pred.txt.meta.json"));
    assert_eq!(meta["config"]["beam_size"], 2);

    let out = lightsql(d, &["evaluate", "--pred", "pred.txt", "--gold", "gold.txt", "--report", "report.json"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&d.join("report.json"))["report"]["n_samples"], 16);
}

#[test]
fn failed_train_leaves_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_and_ingest(d, "gpt2");
    let mut args = vec!["train", "--data", "train.tsv", "--style", "gpt2", "--out", "m.ckpt", "--iterations", "3"];
    args.extend_from_slice(TINY);
    let mismatched = [args.clone(), vec!["--max-positions", "8", "--max-len", "64"]].concat();
    assert_eq!(lightsql(d, &mismatched).status.code(), Some(1));
    let negative_lr = [args.clone(), vec!["--learning-rate", "-1"]].concat();
    assert_eq!(lightsql(d, &negative_lr).status.code(), Some(1));
    let diverging = [args, vec!["--learning-rate", "1e30", "--grad-clip", "0"]].concat();
    let out = lightsql(d, &diverging);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!d.join("m.ckpt").exists());
    assert!(!d.join("m.ckpt.history.csv").exists());
}
