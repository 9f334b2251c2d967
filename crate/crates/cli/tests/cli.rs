use std::path::Path;
use std::process::{Command, Output};

fn mc(home: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mc"))
        .arg("--home")
        .arg(home)
        .args(args)
        .env_remove("MC_HOME")
        .output()
        .expect("mc runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const DEMO: &[&str] = &["demo", "--seed", "7", "--records", "600", "--rounds", "1"];

#[test]
fn demo_twice_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let out_a = stdout(&mc(a.path(), DEMO));
    let out_b = stdout(&mc(b.path(), DEMO));
    assert_eq!(out_a, out_b);
    assert!(out_a.contains("== validation comparison"));
    assert_eq!(tree(&a.path().join("projects")), tree(&b.path().join("projects")));
}

#[test]
fn model_export_import_and_json_envelope() {
    let home = tempfile::tempdir().unwrap();
    stdout(&mc(home.path(), DEMO));
    let model = home.path().join("student.mcdm");
    let model_arg = model.to_str().unwrap();
    stdout(&mc(home.path(), &["export-model", "--project", "stop_sign", "--out", model_arg]));
    assert!(std::fs::read(&model).unwrap().starts_with(b"MCDM"));
    let imported = stdout(&mc(home.path(), &["--format", "json", "import-model", "--project", "stop_sign", model_arg]));
    let v: serde_json::Value = serde_json::from_str(&imported).unwrap();
    assert_eq!(v["schema"], "mc.api");
    assert_eq!(v["status"], "ok");
    let metrics = stdout(&mc(home.path(), &["metrics", "--project", "stop_sign"]));
    assert!(metrics.starts_with("strategy\tflags"), "{metrics}");
    assert!(metrics.contains("round\tsampler"));
}

#[test]
fn errors_map_to_exit_codes() {
    let home = tempfile::tempdir().unwrap();
    let missing = mc(home.path(), &["show", "--project", "nope"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("does not exist"));
    let no_labels = mc(home.path(), &["label", "--project", "nope"]);
    assert!(!no_labels.status.success());
    let config = home.path().join("remote.toml");
    std::fs::write(&config, "[backends]\nmode = \"remote\"\n").unwrap();
    let remote = mc(home.path(), &["--config", config.to_str().unwrap(), "list"]);
    assert!(!remote.status.success());
    assert!(String::from_utf8_lossy(&remote.stderr).contains("endpoint"));
}

#[test]
fn manual_workflow_reaches_strategy_selection() {
    // the demo leaves a corpus file and LLM fixtures behind; drive a fresh
    // store with them step by step
    let demo = tempfile::tempdir().unwrap();
    stdout(&mc(demo.path(), &["demo", "--seed", "2", "--records", "400", "--rounds", "0"]));
    let home = tempfile::tempdir().unwrap();
    let config = home.path().join("mc.toml");
    let fixtures = demo.path().join("fixtures").display().to_string();
    std::fs::write(&config, format!("[backends]\nmock_seed = 2\nfixtures_dir = {fixtures:?}\n")).unwrap();
    let cfg = config.to_str().unwrap();
    let run = |args: &[&str]| stdout(&mc(home.path(), &[&["--config", cfg], args].concat()));
    let corpus = demo.path().join("input").join("synthetic.tsv");
    run(&["ingest", "--name", "synthetic", corpus.to_str().unwrap()]);
    run(&["create", "--name", "stop sign", "--corpus", "synthetic", "--seed", "2"]);
    let listed = run(&["--format", "json", "list"]);
    assert!(listed.contains("stop_sign"), "{listed}");
    let early = mc(home.path(), &["--config", cfg, "select-strategy", "--project", "stop_sign"]);
    assert_eq!(early.status.code(), Some(4));
    run(&["mine", "--project", "stop_sign", "--k", "20"]);
    let queue: serde_json::Value =
        serde_json::from_str(&run(&["--format", "json", "queue", "--project", "stop_sign", "--n", "5"])).unwrap();
    let ids: Vec<&str> = queue["result"]["queue"].as_array().unwrap().iter().map(|q| q["image_id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 5);
    run(&["label", "--project", "stop_sign", "--positive", ids[0], "--negative", &ids[1..].join(",")]);
    let shown: serde_json::Value = serde_json::from_str(&run(&["--format", "json", "show", "--project", "stop_sign"])).unwrap();
    assert_eq!(shown["result"]["validation"]["total"], 5);
}

#[test]
fn serve_answers_http_requests() {
    use std::io::{BufRead, BufReader, Read, Write};
    let home = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_mc"))
        .arg("--home")
        .arg(home.path())
        .args(["serve", "--addr", "127.0.0.1:0"])
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("listening line").to_string();
    let get = |path: &str| {
        let mut s = std::net::TcpStream::connect(&addr).unwrap();
        write!(s, "GET {path} HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
        let mut out = String::new();
        s.read_to_string(&mut out).unwrap();
        out
    };
    let ok = get("/projects");
    let missing = get("/projects/nope");
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(ok.starts_with("HTTP/1.1 200"), "{ok}");
    assert!(ok.contains("\"schema\":\"mc.api\""), "{ok}");
    assert!(missing.starts_with("HTTP/1.1 404"), "{missing}");
}
