use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn dds() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dds"));
    c.env("RUST_LOG", "warn");
    c
}

fn run_ok(args: &[&str], cwd: &Path) -> String {
    let out = dds().args(args).current_dir(cwd).output().unwrap();
    assert!(
        out.status.success(),
        "dds {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_err(args: &[&str], cwd: &Path) -> Output {
    let out = dds().args(args).current_dir(cwd).output().unwrap();
    assert!(!out.status.success(), "dds {args:?} unexpectedly succeeded");
    out
}

/// The single error line the binary prints on failure.
fn error_line(out: &Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .find(|l| l.starts_with("error: kind="))
        .unwrap_or_else(|| {
            panic!("no error line in {stderr}");
        });
    line.to_string()
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Small, fast config written into `dir`.
fn small_config(dir: &Path) -> PathBuf {
    let text = r#"
[datagen]
n_snapshots = 10
legit_orders_per_snapshot = 40
n_rings = 10
ring_size = 8
ring_span = 3
feature_dim = 6
seed = 3

[experiment]
split_fractions = [0.6, 0.2, 0.2]
seeds = [0, 1]

[experiment.lnn]
hidden_dim = 16
head_dims = [16]

[experiment.train]
epochs = 4
"#;
    let p = dir.join("small.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
        .unwrap_or_else(|| panic!("{key} missing in `{line}`"))
}

#[test]
fn shipped_config_matches_defaults() {
    let root = repo_root();
    let shipped = run_ok(&["--config", "configs/default.toml", "config"], &root);
    let builtin = run_ok(&["config"], &root);
    assert_eq!(shipped, builtin);
}

#[test]
fn small_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let c = cfg.to_str().unwrap();

    let gen = run_ok(&["-c", c, "datagen"], d);
    assert!(field(&gen, "records").parse::<usize>().unwrap() > 400);
    assert_eq!(std::fs::read(d.join("work/records.jsonl")).unwrap(), {
        run_ok(&["-c", c, "datagen", "--out", "again.jsonl"], d);
        std::fs::read(d.join("again.jsonl")).unwrap()
    });

    let ing = run_ok(&["-c", c, "ingest"], d);
    assert_eq!(field(&ing, "snapshots"), "10");
    run_ok(&["-c", c, "partition"], d);
    let dds_line = run_ok(&["-c", c, "build-dds", "--text", "work/dds.txt"], d);
    assert!(field(&dds_line, "edges").parse::<usize>().unwrap() > 0);
    assert!(d.join("work/dds.txt").exists());

    let audit = run_ok(&["-c", c, "audit"], d);
    assert!(audit.starts_with("ok=true"), "{audit}");

    let tr = run_ok(&["-c", c, "train", "--history", "work/history.json"], d);
    let version = field(&tr, "model_version").to_string();
    let hist: Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("work/history.json")).unwrap())
            .unwrap();
    assert_eq!(hist["epochs"].as_array().unwrap().len(), 4);
    let tr2 = run_ok(&["-c", c, "train", "--out", "work/model2.ddsm"], d);
    assert_eq!(
        field(&tr2, "model_version"),
        version,
        "training is not deterministic"
    );

    let emb = run_ok(&["-c", c, "embed"], d);
    assert_eq!(field(&emb, "model_version"), version);

    let scored = run_ok(&["-c", c, "score"], d);
    let lines: Vec<Value> = scored
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(
        lines.len(),
        field(&gen, "records").parse::<usize>().unwrap()
    );
    for v in &lines {
        let s = v["score"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&s));
    }

    // stdio transport: a malformed line gets an error, the next line is served.
    let first = scored.lines().next().unwrap();
    let order_id = lines[0]["order_id"].as_str().unwrap();
    let records = std::fs::read_to_string(d.join("work/records.jsonl")).unwrap();
    let rec: Value = serde_json::from_str(records.lines().next().unwrap()).unwrap();
    let req = serde_json::json!({
        "order_id": rec["order_id"],
        "features": rec["features"],
        "entities": rec["entities"],
    });
    let mut child = dds()
        .args(["-c", c, "serve", "--stdio"])
        .current_dir(d)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    {
        let mut stdin = child.stdin.take().unwrap();
        writeln!(stdin, "{{\"order_id\": 5").unwrap();
        writeln!(stdin, "{req}").unwrap();
    }
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let replies: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(replies.len(), 2);
    assert_eq!(replies[0]["error"]["kind"], "json");
    assert_eq!(replies[1]["order_id"], order_id);
    let batch: Value = serde_json::from_str(first).unwrap();
    assert_eq!(replies[1]["score"], batch["score"]);

    // Eval is byte-for-byte repeatable.
    run_ok(&["-c", c, "eval", "--out-dir", "r1"], d);
    run_ok(&["-c", c, "eval", "--out-dir", "r2"], d);
    for f in ["report.md", "report.json"] {
        let a = std::fs::read(d.join("r1").join(f)).unwrap();
        let b = std::fs::read(d.join("r2").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
    }
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("r1/report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn failures_print_one_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let c = cfg.to_str().unwrap();

    let out = run_err(&["-c", c, "ingest", "--input", "missing.jsonl"], d);
    assert!(error_line(&out).starts_with("error: kind=io msg="));

    let out = run_err(&["-c", "nope.toml", "config"], d);
    assert!(error_line(&out).starts_with("error: kind=io"));

    std::fs::write(d.join("bad.toml"), "[experiment]\nseeds = 3\n").unwrap();
    let out = run_err(&["-c", "bad.toml", "config"], d);
    assert!(error_line(&out).starts_with("error: kind=config"));

    let out = run_err(&["audit", "--no-such-flag"], d);
    assert!(error_line(&out).starts_with("error: kind=cli msg="));
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);

    std::fs::write(d.join("junk.ddst"), b"DDSX0000").unwrap();
    let out = run_err(&["audit", "--dds", "junk.ddst"], d);
    assert!(
        error_line(&out).starts_with("error: kind=format"),
        "{}",
        error_line(&out)
    );

    // A store exported for one model is refused by another.
    run_ok(&["-c", c, "datagen"], d);
    run_ok(&["-c", c, "ingest"], d);
    run_ok(&["-c", c, "partition"], d);
    run_ok(&["-c", c, "build-dds"], d);
    run_ok(&["-c", c, "train"], d);
    run_ok(&["-c", c, "embed"], d);
    run_ok(
        &["-c", c, "train", "--seed", "9", "--out", "work/other.ddsm"],
        d,
    );
    let out = run_err(
        &["-c", c, "serve", "--stdio", "--model", "work/other.ddsm"],
        d,
    );
    assert!(error_line(&out).starts_with("error: kind=version_mismatch"));
}

#[test]
fn tcp_serve_answers_requests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let c = cfg.to_str().unwrap();
    for step in [
        "datagen",
        "ingest",
        "partition",
        "build-dds",
        "train",
        "embed",
    ] {
        run_ok(&["-c", c, step], d);
    }
    let mut child = dds()
        .args(["-c", c, "serve", "--addr", "127.0.0.1:0"])
        .current_dir(d)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    stdout.read_line(&mut line).unwrap();
    let addr = field(line.trim(), "listening").to_string();

    let stream = TcpStream::connect(&addr).unwrap();
    let mut w = stream.try_clone().unwrap();
    let mut r = BufReader::new(stream);
    writeln!(
        w,
        "{{\"order_id\":\"x\",\"features\":[0,0,0,0,0,0],\"entities\":{{}}}}"
    )
    .unwrap();
    let mut reply = String::new();
    r.read_line(&mut reply).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    let v: Value = serde_json::from_str(&reply).unwrap();
    assert_eq!(v["order_id"], "x");
    assert_eq!(v["used_entities"].as_array().unwrap().len(), 0);
}

#[test]
fn default_pipeline_completes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = repo_root().join("configs/default.toml");
    let c = config.to_str().unwrap();
    for step in ["datagen", "ingest", "partition", "build-dds"] {
        run_ok(&["-c", c, step], d);
    }
    assert!(run_ok(&["-c", c, "audit"], d).starts_with("ok=true"));
    for step in ["train", "embed", "score"] {
        run_ok(&["-c", c, step], d);
    }
    let md = run_ok(&["-c", c, "eval"], d);
    assert!(md.contains("| LNN (GCN) |"), "{md}");
    assert!(d.join("work/report/report.json").exists());
}
