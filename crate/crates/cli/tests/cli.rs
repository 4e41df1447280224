mod common;

use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use axum::http::StatusCode;
use common::*;
use geoaqp::query::QueryResult;
use geoaqp_cli::server::{QueryResponse, ServiceState};
use serde_json::json;

fn geoaqp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoaqp"))
        .args(args)
        .env("DEEPSPACE_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_json(path: &Path, value: &serde_json::Value) {
    std::fs::write(path, value.to_string()).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[tokio::test]
async fn pipeline_and_http_agree() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    write_json(&p("synth.json"), &serde_json::to_value(synth_config()).unwrap());
    write_json(&p("train.json"), &serde_json::to_value(train_config()).unwrap());
    write_json(
        &p("workload.json"),
        &json!({ "min_level": 4, "max_level": 7, "geo_queries": 20, "predicate_queries": 20 }),
    );

    ok(&geoaqp(&["synth", "--config", s(&p("synth.json")), "--out", s(&p("data.csv")), "--schema-out", s(&p("schema.json"))]));

    let log = ok(&geoaqp(&[
        "train", "--schema", s(&p("schema.json")), "--data", s(&p("data.csv")), "--config", s(&p("train.json")), "--out", s(&p("model.bin")),
    ]));
    let events: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events[0]["event"], "loaded");
    assert_eq!(events[0]["rows"], 3000);
    assert_eq!(events.iter().filter(|e| e["event"] == "epoch").count(), 2);
    assert_eq!(events.last().unwrap()["event"], "done");

    let query = json!({
        "predicates": [
            { "type": "cell_contains", "cell": "2130" },
            { "type": "equals", "attribute": "hour", "value": 18 }
        ],
        "aggregate": { "function": "MEAN", "attribute": "total_fare" }
    });
    write_json(&p("q.json"), &query);
    let cli_text = ok(&geoaqp(&["query", "--model", s(&p("model.bin")), "--query", s(&p("q.json"))]));
    let cli: QueryResult = serde_json::from_str(&cli_text).unwrap();

    let model = geoaqp::model::io::load(p("model.bin")).unwrap();
    let state = Arc::new(ServiceState::new(model, Vec::new()).unwrap());
    let (status, body) = call(&state, "POST", "/query", &query.to_string()).await;
    assert_eq!(status, StatusCode::OK);
    let http: QueryResponse = serde_json::from_value(body).unwrap();
    // Shortest round-trip formatting makes bit equality the same as
    // textual equality of the numbers.
    assert_eq!(http.result.estimate.to_bits(), cli.estimate.to_bits());
    assert_eq!(http.result.selectivity.to_bits(), cli.selectivity.to_bits());
    assert_eq!(serde_json::to_string_pretty(&http.result).unwrap() + "\n", cli_text);

    ok(&geoaqp(&[
        "workload", "--schema", s(&p("schema.json")), "--data", s(&p("data.csv")), "--config", s(&p("workload.json")), "--seed", "3", "--out", s(&p("w.jsonl")),
    ]));
    assert_eq!(std::fs::read_to_string(p("w.jsonl")).unwrap().lines().count(), 40);
    let report = ok(&geoaqp(&[
        "eval", "--model", s(&p("model.bin")), "--schema", s(&p("schema.json")), "--data", s(&p("data.csv")),
        "--workload", s(&p("w.jsonl")), "--rates", "1.0,0.1", "--out", s(&p("report")),
    ]));
    assert!(report.contains("sample 100%"));
    for f in ["queries.csv", "summary.csv", "state_size.csv", "report.txt"] {
        assert!(p("report").join(f).exists(), "{f}");
    }
    let summary = std::fs::read_to_string(p("report").join("summary.csv")).unwrap();
    let full = summary.lines().find(|l| l.starts_with("sample 100%,all,")).unwrap();
    let cols: Vec<&str> = full.split(',').collect();
    assert_eq!(cols[3], "1");
    assert_eq!(cols[4], "1");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    std::fs::write(p("bad.json"), "{ not json").unwrap();
    let out = geoaqp(&["synth", "--config", s(&p("bad.json")), "--out", s(&p("x.csv"))]);
    assert_eq!(out.status.code(), Some(2));

    write_json(&p("synth.json"), &json!({ "rows": 200, "geo_levels": 6 }));
    ok(&geoaqp(&["synth", "--config", s(&p("synth.json")), "--out", s(&p("d.csv")), "--schema-out", s(&p("schema.json"))]));
    let out = geoaqp(&["train", "--schema", s(&p("schema.json")), "--data", s(&p("missing.csv")), "--out", s(&p("m.bin"))]);
    assert_eq!(out.status.code(), Some(3));

    write_json(&p("train.json"), &json!({ "max_epochs": 3, "patience": 5 }));
    let out = geoaqp(&[
        "train", "--schema", s(&p("schema.json")), "--data", s(&p("d.csv")), "--config", s(&p("train.json")), "--out", s(&p("m.bin")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // Fares near the f64 limit overflow the standardization and the loss.
    let csv = std::fs::read_to_string(p("d.csv")).unwrap();
    let mut lines = csv.lines();
    let mut huge = format!("{}\n", lines.next().unwrap());
    for (i, line) in lines.enumerate() {
        let (head, _) = line.rsplit_once(',').unwrap();
        huge += &format!("{head},{}1.7e308\n", if i % 2 == 0 { "-" } else { "" });
    }
    std::fs::write(p("huge.csv"), huge).unwrap();
    write_json(&p("train.json"), &json!({ "hidden_sizes": [8], "max_epochs": 2, "patience": 1 }));
    let out = geoaqp(&[
        "train", "--schema", s(&p("schema.json")), "--data", s(&p("huge.csv")), "--config", s(&p("train.json")), "--out", s(&p("m.bin")),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    let out = Command::new(env!("CARGO_BIN_EXE_geoaqp"))
        .args(["synth", "--out", s(&p("y.csv"))])
        .env("DEEPSPACE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
