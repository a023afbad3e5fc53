//! Runs the `biaslens` binary end to end.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use biaslens_core::synthetic::separable;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_biaslens"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn biaslens")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn fixture(dir: &Path, kind: &str) {
    let o = run(&[
        "mock",
        "fixture",
        "--out",
        p(dir),
        "--kind",
        kind,
        "--n",
        "20",
        "--dim",
        "32",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn probe_csv_and_json_agree_and_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), "balanced");
    let session = dir.path().join("session");
    let concepts = dir.path().join("concepts.txt");
    let provider = dir.path().join("provider.embeddings.json");
    let probe = |format: &str, out: &Path| {
        let o = run(&[
            "probe",
            "--session",
            p(&session),
            "--concepts",
            p(&concepts),
            "--embedder-file",
            p(&provider),
            "--format",
            format,
            "--out",
            p(out),
            "--jobs",
            "2",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out).unwrap()
    };
    let csv_a = probe("csv", &dir.path().join("a.csv"));
    let csv_b = probe("csv", &dir.path().join("b.csv"));
    assert_eq!(csv_a, csv_b, "probe output is not deterministic");
    let json: Value = serde_json::from_slice(&probe("json", &dir.path().join("r.json"))).unwrap();

    let mut rdr = csv::Reader::from_reader(csv_a.as_slice());
    let header: Vec<String> = rdr.headers().unwrap().iter().map(str::to_owned).collect();
    assert_eq!(header[0], "test_text");
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let items = json.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.len(), items.len());
    for (row, item) in rows.iter().zip(items) {
        assert_eq!(row.get(0).unwrap(), item["test_text"].as_str().unwrap());
        let col = |name: &str| row.get(header.iter().position(|h| h == name).unwrap()).unwrap();
        for anchor in ["c1", "c2"] {
            let from_csv: f64 = col(&format!("posterior_{anchor}")).parse().unwrap();
            assert_eq!(from_csv, item["posteriors"][anchor].as_f64().unwrap());
        }
        assert_eq!(col("tendency"), item["tendency"].as_str().unwrap());
    }
}

#[test]
fn init_import_validate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let session = dir.path().join("s");
    let f = separable(5, 16, 2);
    let o = run(&[
        "init",
        "--session",
        p(&session),
        "--anchor",
        &f.anchors[0].prompt,
        "--anchor",
        &f.anchors[1].prompt,
        "--n",
        "5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(session.join("session.json").is_file());

    let again = run(&["init", "--session", p(&session), "--anchor", "a", "--anchor", "b"]);
    assert_eq!(code(&again), 2);

    let table = dir.path().join("images.embeddings.json");
    f.image_table().write(&table).unwrap();
    for (anchor, images) in &f.images {
        let folder = dir.path().join(&anchor.0);
        std::fs::create_dir(&folder).unwrap();
        for img in images {
            std::fs::write(folder.join(format!("{}.png", img.id.0)), &img.bytes).unwrap();
        }
        let o = run(&[
            "import",
            "--session",
            p(&session),
            "--anchor",
            &anchor.0,
            "--embeddings",
            p(&table),
            p(&folder),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("imported 5 images"));
    }

    let provider = dir.path().join("provider.embeddings.json");
    f.provider_table().write(&provider).unwrap();
    let o = run(&[
        "validate",
        "--session",
        p(&session),
        "--concept",
        &f.probes[0],
        "--embedder-file",
        p(&provider),
        "--json",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["separated"], Value::Bool(true));
    assert_eq!(v["d_statistic"].as_f64(), Some(1.0));

    let text = run(&[
        "validate",
        "--session",
        p(&session),
        "--concept",
        &f.probes[0],
        "--embedder-file",
        p(&provider),
    ]);
    let line = String::from_utf8_lossy(&text.stdout);
    assert!(line.starts_with("D(5) = 1.0000, p = "), "{line}");
    assert!(line.trim_end().ends_with(": separated"), "{line}");
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), "separable");
    let session = dir.path().join("session");

    // No embedder configured and the concept is not cached.
    let o = run(&[
        "validate",
        "--session",
        p(&session),
        "--concept",
        "picture that shows a cat",
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(&[
        "validate",
        "--session",
        p(&dir.path().join("missing")),
        "--concept",
        "x",
    ]);
    assert_eq!(code(&o), 4);

    let o = run(&[
        "probe",
        "--session",
        p(&session),
        "--concepts",
        p(&dir.path().join("nope.txt")),
    ]);
    assert_eq!(code(&o), 2);

    let o = run(&["probe", "--bogus-flag"]);
    assert_eq!(code(&o), 2);

    let o = run(&["serve"]);
    assert_eq!(code(&o), 2, "serve without --session-dir");
}

#[test]
fn serve_reports_address_and_degraded_mode() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), "separable");
    let mut child = bin()
        .args([
            "serve",
            "--port",
            "0",
            "--session-dir",
            p(&dir.path().join("session")),
            "--embedder-url",
            "http://127.0.0.1:9",
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let url = line.trim().rsplit(' ').next().unwrap().to_owned();
    assert!(url.starts_with("http://127.0.0.1:"), "{line}");
    assert!(!url.ends_with(":0"));

    let mut resp = ureq::get(format!("{url}/api/v1/sessions")).call().unwrap();
    let sessions: Value = resp.body_mut().read_json().unwrap();
    assert_eq!(sessions.as_array().unwrap().len(), 1);

    child.kill().unwrap();
    child.wait().unwrap();
    let mut err = String::new();
    child.stderr.take().unwrap().read_to_string(&mut err).unwrap();
    assert!(err.contains("degraded"), "{err}");
}
