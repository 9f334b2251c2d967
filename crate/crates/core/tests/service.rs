use std::path::Path;

use mc_core::service::config::ServiceConfig;
use mc_core::service::demo::{run_demo, DemoOptions};
use mc_core::service::{Api, CrashPhase, CrashPoint, ErrorCode, Request, Response, ValidationLabel};

fn small() -> DemoOptions {
    DemoOptions { seed: 3, records: 600, per_query_k: 30, validation: 60, annotate: 120, rounds: 2, round_n: 40 }
}

fn api(home: &Path) -> Api {
    let config = ServiceConfig { home: Some(home.to_path_buf()), ..Default::default() };
    Api::new(home, config.gateway().unwrap())
}

fn code(r: Response) -> ErrorCode {
    r.into_result().unwrap_err().code
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

#[test]
fn demo_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_demo(a.path(), &small(), None).unwrap();
    let rb = run_demo(b.path(), &small(), None).unwrap();
    assert_eq!(ra.render(), rb.render());
    assert_eq!(tree(&a.path().join("projects")), tree(&b.path().join("projects")));
    // a finished demo is a fixed point
    let again = run_demo(a.path(), &small(), None).unwrap();
    assert_eq!(again, ra);
    let methods: Vec<&str> = ra.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["zero-shot name", "zero-shot description", "vqa prompt", "teacher", "student"]);
}

#[test]
fn unknown_ids_are_not_found_without_writes() {
    let home = tempfile::tempdir().unwrap();
    run_demo(home.path(), &DemoOptions { rounds: 0, ..small() }, None).unwrap();
    let api = api(home.path());
    assert!(api.handle(Request::GetProject { project: "stop_sign".into() }).into_result().is_ok());
    let before = tree(&home.path().join("projects"));
    let r = api.handle(Request::SubmitValidationLabels {
        project: "stop_sign".into(),
        labels: vec![
            ValidationLabel { image_id: "img-00001".into(), positive: true },
            ValidationLabel { image_id: "nope".into(), positive: false },
        ],
    });
    assert_eq!(code(r), ErrorCode::NotFound);
    assert_eq!(code(api.handle(Request::GetProject { project: "missing".into() })), ErrorCode::NotFound);
    assert_eq!(code(api.route("GET", "/projects/missing/metrics", "")), ErrorCode::NotFound);
    assert_eq!(code(api.route("DELETE", "/projects", "")), ErrorCode::NotFound);
    assert_eq!(tree(&home.path().join("projects")), before);
}

#[test]
fn strategy_selection_needs_validation_labels() {
    let home = tempfile::tempdir().unwrap();
    let opts = small();
    // ingest and create through the demo path, then stop before labeling
    run_demo(home.path(), &opts, Some(CrashPoint { commit: 3, phase: CrashPhase::BeforeJournal })).unwrap_err();
    let api = api(home.path());
    let err = api.handle(Request::RunStrategySelection { project: "stop_sign".into() }).into_result().unwrap_err();
    assert_eq!(err.code, ErrorCode::Precondition);
    assert!(err.message.contains("validation labels"), "{}", err.message);
    assert_eq!(code(api.handle(Request::RunAlRound {
        project: "stop_sign".into(),
        sampler: mc_core::active_learning::Sampler::Margin,
        n: 5,
        strata: 10,
    })), ErrorCode::Precondition);
    assert_eq!(code(api.handle(Request::ExportModel { project: "stop_sign".into() })), ErrorCode::Precondition);
}

#[test]
fn export_import_round_trip() {
    let home = tempfile::tempdir().unwrap();
    run_demo(home.path(), &DemoOptions { rounds: 0, ..small() }, None).unwrap();
    let api = api(home.path());
    let exported = api.route("GET", "/projects/stop_sign/model", "").into_result().unwrap();
    let hex = exported["model_hex"].as_str().unwrap().to_string();
    let body = serde_json::json!({ "model_hex": hex }).to_string();
    let imported = api.route("PUT", "/projects/stop_sign/model", &body).into_result().unwrap();
    assert_eq!(imported["model_ref"], exported["model_ref"]);
    let again = api.handle(Request::ExportModel { project: "stop_sign".into() }).into_result().unwrap();
    assert_eq!(again["model_hex"].as_str().unwrap(), hex);
    assert_eq!(code(api.handle(Request::ImportModel { project: "stop_sign".into(), model_hex: "00ff".into() })), ErrorCode::InvalidInput);
}

#[test]
fn crash_then_resume_matches_clean_run() {
    let clean = tempfile::tempdir().unwrap();
    let reference = run_demo(clean.path(), &small(), None).unwrap();
    for (commit, phase) in [(2, CrashPhase::TornJournal), (5, CrashPhase::MidApply), (6, CrashPhase::BeforeJournal)] {
        let home = tempfile::tempdir().unwrap();
        let crash = CrashPoint { commit, phase };
        let err = run_demo(home.path(), &small(), Some(crash)).unwrap_err();
        assert!(err.to_string().contains("injected crash"), "{err}");
        let resumed = run_demo(home.path(), &small(), None).unwrap();
        assert_eq!(resumed, reference, "{crash:?}");
    }
}

#[test]
fn envelope_is_versioned() {
    let home = tempfile::tempdir().unwrap();
    let api = api(home.path());
    let r = api.route("GET", "/projects", "");
    assert_eq!(r.http_status(), 200);
    let v = serde_json::to_value(&r).unwrap();
    assert_eq!(v["schema"], "mc.api");
    assert_eq!(v["version"], 1);
    assert_eq!(v["status"], "ok");
    let bad = api.route("POST", "/projects", "{\"name\": 3}");
    assert_eq!(bad.http_status(), 400);
    let req: Request = serde_json::from_str(r#"{"op":"run_mining","project":"x"}"#).unwrap();
    assert_eq!(req, Request::RunMining { project: "x".into(), per_query_k: 50, mutation_rounds: 1 });
}
