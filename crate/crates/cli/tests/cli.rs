#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{chat_reply, fixture_dir, MockServer, Reply};
use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_maplabel"));
    // Keep the caller's environment from leaking into configuration.
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("ALP_")) {
        cmd.env_remove(k);
    }
    cmd.env_remove("RUST_LOG");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn maplabel");
    eprintln!("stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    out
}

fn ok(cmd: &mut Command) -> Output {
    let out = run(cmd);
    assert!(out.status.success(), "command failed: {cmd:?}");
    out
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// A writable copy of the three-map fixture dataset.
fn fixture_copy(dir: &Path) -> PathBuf {
    let ds = dir.join("ds");
    copy_dir(&fixture_dir().join("dataset"), &ds);
    ds
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn read_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn bbox_center(points: &[Value]) -> (f64, f64) {
    let xs: Vec<f64> = points.iter().map(|p| p[0].as_f64().unwrap()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p[1].as_f64().unwrap()).collect();
    let mid = |v: &[f64]| (v.iter().cloned().fold(f64::INFINITY, f64::min) + v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)) / 2.0;
    (mid(&xs), mid(&ys))
}

/// Recomputes centroid-baseline RMSE straight from the files on disk.
fn oracle_centroid_rmse(ds: &Path) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for entry in fs::read_dir(ds.join("maps")).unwrap() {
        let dir = entry.unwrap().path();
        let map = read_json(&dir.join("map.json"));
        let labels = read_json(&dir.join("ground_truth.json"));
        for label in labels.as_array().unwrap() {
            let id = label["landmark_id"].as_str().unwrap();
            let lm = map["landmarks"].as_array().unwrap().iter().find(|l| l["id"] == id).unwrap();
            let (px, py) = bbox_center(lm["boundary"].as_array().unwrap());
            let b = &label["box"];
            let corners = [b["min"].clone(), b["max"].clone()];
            let (tx, ty) = bbox_center(&corners);
            sum += (px - tx).powi(2) + (py - ty).powi(2);
            n += 1;
        }
    }
    ((sum / n as f64).sqrt(), n)
}

#[test]
fn centroid_place_then_eval_matches_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = fixture_copy(tmp.path());
    ok(bin().arg("ground-truth").arg(&ds));
    let results = tmp.path().join("centroid.jsonl");
    ok(bin().args(["place"]).arg(&ds).args(["--method", "centroid", "--out"]).arg(&results));
    assert_eq!(read_lines(&results).len(), 12);

    let report = tmp.path().join("report.json");
    let csv = tmp.path().join("rows.csv");
    let out = ok(bin().arg("eval").arg(&ds).arg(&results).arg("--json").arg(&report).arg("--csv").arg(&csv));
    let r = read_json(&report);
    let (oracle, n) = oracle_centroid_rmse(&ds);
    assert_eq!(n, 11);
    assert_eq!(r["n_scored"], 11);
    assert_eq!(r["n_missing_gt"], 1);
    assert!((r["overall_rmse"].as_f64().unwrap() - oracle).abs() < 1e-9, "{} vs {oracle}", r["overall_rmse"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("overall"));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 12, "header plus 11 rows");
}

#[test]
fn eval_without_results_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = fixture_copy(tmp.path());
    let out = run(bin().arg("eval").arg(&ds));
    assert_eq!(out.status.code(), Some(2));

    let out = run(bin().arg("eval").arg(&ds).arg("--error-json"));
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "usage");
}

#[test]
fn missing_dataset_reports_json_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(bin()
        .arg("place")
        .arg(tmp.path().join("nope"))
        .args(["--method", "centroid", "--out"])
        .arg(tmp.path().join("r.jsonl"))
        .arg("--error-json"));
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "dataset");
    assert!(!tmp.path().join("r.jsonl").exists());
}

/// Answers every chat request with a fixed point, except for one landmark
/// whose answer never parses.
fn mock_llm() -> MockServer {
    MockServer::start(|_, req| {
        let body: Value = serde_json::from_str(&req.body).unwrap();
        let prompt = body["messages"][0]["content"].as_str().unwrap();
        if prompt.contains("Landmark name: Mitte") {
            return chat_reply("I cannot tell.");
        }
        chat_reply("The label goes at (120, 80).")
    })
}

#[test]
fn full_pipeline_with_mock_llm() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let ds = fixture_copy(root);
    let server = mock_llm();
    let endpoint = format!("{}/v1/chat/completions", server.url);

    ok(bin().arg("ground-truth").arg(&ds));
    assert!(ds.join("coverage.json").exists());
    assert_eq!(read_json(&ds.join("coverage.json"))["landmarks_with_label"], 11);

    let store = root.join("guidelines.index.json");
    ok(bin()
        .arg("index")
        .arg("--guidelines")
        .arg(fixture_dir().join("guidelines.md"))
        .arg("--out")
        .arg(&store)
        .args(["--embedder", "hashing"]));

    let results = root.join("llm.jsonl");
    let place = |out: &Path| {
        let mut cmd = bin();
        cmd.arg("place")
            .arg(&ds)
            .arg("--store")
            .arg(&store)
            .args(["--method", "llm", "--format", "xml", "--neighbors", "--endpoint", &endpoint, "--model", "mock-model"])
            .args(["--set", "llm.backoff_base_ms=1", "--out"])
            .arg(out);
        ok(&mut cmd);
    };
    place(&results);
    let lines = read_lines(&results);
    assert_eq!(lines.len(), 12);
    let failed: Vec<&Value> = lines.iter().filter(|l| l["predicted"].is_null()).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0]["landmark_id"], "berlin-001-node-305");
    assert_eq!(failed[0]["attempts"], 3, "initial call plus two retries");
    assert!(lines.iter().all(|l| l["coord_format"] == "XML"));
    // 11 first-try answers plus 3 calls for the unparseable one.
    assert_eq!(server.hits(), 14);
    assert!(server.requests().iter().all(|r| r.body.contains("\"mock-model\"")));

    let manifest = read_json(&root.join("llm.jsonl.manifest.json"));
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["errors"].as_array().unwrap().len(), 0);
    assert_eq!(manifest["model_id"], "mock-model");
    assert_eq!(manifest["template_version"], "alp-prompt-v1");
    assert_eq!(manifest["dataset_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["store_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["summary"]["failed"], 1);
    assert!(manifest["finished_at"].is_string());

    // Reruns produce identical results.
    let again = root.join("llm-again.jsonl");
    place(&again);
    assert_eq!(fs::read(&results).unwrap(), fs::read(&again).unwrap());

    let centroid = root.join("centroid.jsonl");
    ok(bin().arg("place").arg(&ds).args(["--method", "centroid", "--out"]).arg(&centroid));
    let report = root.join("compare.json");
    let out = ok(bin().arg("eval").arg(&ds).arg(&results).arg(&centroid).arg("--json").arg(&report));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("llm") && stdout.contains("centroid"));
    let runs = read_json(&report)["runs"].as_array().unwrap().clone();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0]["report"]["n_parse_failures"], 1);
    assert_eq!(runs[0]["report"]["n_scored"], 10);

    let tuning = root.join("train.jsonl");
    ok(bin().arg("export-tuning").arg(&ds).arg("--store").arg(&store).arg("--out").arg(&tuning));
    let pairs = read_lines(&tuning);
    assert_eq!(pairs.len(), 8, "70% of 11 labeled landmarks");
    assert!(pairs.iter().all(|p| p["instruction"].as_str().unwrap().contains("Landmark name:")));

    let svg_dir = root.join("svg");
    ok(bin().arg("render").arg(&ds).arg("--results").arg(&results).arg("--out-dir").arg(&svg_dir));
    for map in ["sf-001", "sf-002", "berlin-001"] {
        let svg = fs::read_to_string(svg_dir.join(format!("{map}.svg"))).unwrap();
        assert!(svg.starts_with("<?xml"));
    }
    assert_eq!(read_json(&svg_dir.join("render.manifest.json"))["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn unreachable_llm_fails_the_run_and_records_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let ds = fixture_copy(root);
    let server = MockServer::start(|_, _| Reply::json(400, r#"{"error":"bad model"}"#));
    let store = root.join("store.json");
    ok(bin()
        .arg("index")
        .arg("--guidelines")
        .arg(fixture_dir().join("guidelines.md"))
        .arg("--out")
        .arg(&store)
        .args(["--embedder", "hashing"]));
    let results = root.join("r.jsonl");
    let out = run(bin()
        .arg("place")
        .arg(&ds)
        .arg("--store")
        .arg(&store)
        .args(["--method", "llm", "--error-json", "--out"])
        .arg(&results)
        .env("ALP_LLM_ENDPOINT_URL", format!("{}/v1/chat/completions", server.url)));
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(server.hits(), 12, "client errors are not retried");
    assert_eq!(read_lines(&results).len(), 12);
    let manifest = read_json(&root.join("r.jsonl.manifest.json"));
    assert_eq!(manifest["status"], "error");
    assert_eq!(manifest["errors"].as_array().unwrap().len(), 1);
}

#[test]
fn environment_overrides_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let ds = fixture_copy(root);
    let config = root.join("alp.toml");
    fs::write(&config, "[split]\nseed = 11\n[anchor]\nanchor = \"bottom\"\n").unwrap();
    let out = root.join("a.jsonl");
    ok(bin()
        .arg("--config")
        .arg(&config)
        .arg("place")
        .arg(&ds)
        .args(["--method", "anchor", "--anchor", "left", "--out"])
        .arg(&out)
        .env("ALP_ANCHOR_ANCHOR", "right")
        .env("ALP_ANCHOR_OFFSET_PX", "4"));
    let cfg = &read_json(&root.join("a.jsonl.manifest.json"))["config"];
    assert_eq!(cfg["anchor"]["anchor"], "right");
    assert_eq!(cfg["anchor"]["offset_px"], 4.0);
    assert_eq!(cfg["split"]["seed"], 11);

    // sf-001-way-101 spans x 100..180, y 100..160: right anchor at offset 4.
    let line = read_lines(&out).into_iter().find(|l| l["landmark_id"] == "sf-001-way-101").unwrap();
    assert_eq!(line["predicted"], serde_json::json!([184.0, 130.0]));

    let bad = run(bin().arg("place").arg(&ds).args(["--method", "centroid", "--out"]).arg(&out).env("ALP_LLM_TEMPRATURE", "1"));
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn ingest_builds_a_dataset_from_the_map_api() {
    let body = fs::read_to_string(fixture_dir().join("overpass_north_beach.json")).unwrap();
    let server = MockServer::start(move |_, _| Reply::json(200, body.clone()));
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("nb");
    ok(bin()
        .arg("ingest")
        .args(["--bbox", "37.795,-122.415,37.805,-122.4", "--width", "800", "--height", "600"])
        .args(["--city", "San Francisco", "--map-id", "nb", "--endpoint", &server.url, "--out"])
        .arg(&out));
    let map = read_json(&out.join("maps/nb/map.json"));
    let ids: Vec<&str> = map["landmarks"].as_array().unwrap().iter().map(|l| l["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["nb-node-1098765", "nb-relation-4455", "nb-way-28765432"]);
    assert_eq!(read_json(&out.join("manifest.json"))["cities"], serde_json::json!(["San Francisco"]));
    assert_eq!(read_json(&out.join("ingest.manifest.json"))["status"], "ok");
    assert!(server.requests()[0].body.contains("nwr"));

    // Re-ingesting the same map replaces it rather than duplicating it.
    ok(bin()
        .arg("ingest")
        .args(["--bbox", "37.795,-122.415,37.805,-122.4", "--width", "800", "--height", "600"])
        .args(["--city", "San Francisco", "--map-id", "nb", "--endpoint", &server.url, "--out"])
        .arg(&out));
    let ds = maplabel::ingest::load_dataset(&out).unwrap();
    assert_eq!(ds.maps.len(), 1);
    assert_eq!(ds.landmarks().count(), 3);
}

#[cfg(unix)]
#[test]
fn interrupt_keeps_partial_results() {
    use std::time::Duration;
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let ds = fixture_copy(root);
    let server = MockServer::start(|_, _| chat_reply("(10, 10)").delayed(Duration::from_millis(150)));
    let store = root.join("store.json");
    ok(bin()
        .arg("index")
        .arg("--guidelines")
        .arg(fixture_dir().join("guidelines.md"))
        .arg("--out")
        .arg(&store)
        .args(["--embedder", "hashing"]));
    let results = root.join("r.jsonl");
    let child = bin()
        .arg("place")
        .arg(&ds)
        .arg("--store")
        .arg(&store)
        .args(["--method", "llm", "--set", "llm.max_in_flight=1", "--out"])
        .arg(&results)
        .env("ALP_LLM_ENDPOINT_URL", format!("{}/v1/chat/completions", server.url))
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    std::thread::sleep(Duration::from_millis(700));
    let killed = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(killed.success());
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(130));
    let n = read_lines(&results).len();
    assert!(n > 0 && n < 12, "{n} partial results");
    let manifest = read_json(&root.join("r.jsonl.manifest.json"));
    assert_eq!(manifest["status"], "cancelled");
    assert_eq!(manifest["errors"][0]["kind"], "cancelled");
}
