//! The annotation service over a real socket, driven by a plain HTTP client.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use madeval::clock::SystemClock;
use madeval::config::CompetitionConfig;
use madeval::pipeline::Pipeline;
use madeval::server::router;
use madeval::{Instruction, Scenario};

const CONFIG: &str = r#"
seed = 9
[selection]
k = 3
[elo]
replicates = 50
[[models]]
id = "red"
provider = "stub"
[[models]]
id = "green"
provider = "stub"
[[models]]
id = "blue"
provider = "stub"
"#;

struct Service {
    base: String,
    _runtime: tokio::runtime::Runtime,
}

fn start(p: &Pipeline, ui_dir: Option<&Path>) -> Service {
    let queue = p.open_queue(Arc::new(SystemClock)).unwrap();
    let app = router(Arc::new(Mutex::new(queue)), ui_dir.map(Path::to_path_buf));
    let runtime = tokio::runtime::Runtime::new().unwrap();
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind(SocketAddr::from(([127, 0, 0, 1], 0))))
        .unwrap();
    let addr = listener.local_addr().unwrap();
    runtime.spawn(async move { axum::serve(listener, app).await.unwrap() });
    Service {
        base: format!("http://{addr}"),
        _runtime: runtime,
    }
}

fn competition(dir: &Path) -> Pipeline {
    let cfg = CompetitionConfig::from_toml(CONFIG, Path::new("http.toml")).unwrap();
    let p = Pipeline::new(dir, cfg);
    let pool: Vec<Instruction> = (0..8)
        .map(|i| Instruction::seed(Scenario::Coding, format!("Write a function that returns {i} squared.")).unwrap())
        .collect();
    p.init(&pool).unwrap();
    p.collect_responses().unwrap();
    p.select().unwrap();
    p.enqueue().unwrap();
    p
}

#[test]
fn annotators_judge_every_task_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let p = competition(dir.path());
    let svc = start(&p, None);
    let client = Client::new();

    let mut seen = 0;
    let choices = ["left", "right", "tie"];
    loop {
        let res = client
            .get(format!("{}/api/tasks/next", svc.base))
            .query(&[("annotator", "ann-1")])
            .send()
            .unwrap();
        if res.status() == StatusCode::NO_CONTENT {
            break;
        }
        assert_eq!(res.status(), StatusCode::OK);
        let task: Value = res.json().unwrap();
        // Annotators never see which model wrote which side.
        for key in task.as_object().unwrap().keys() {
            assert!(
                ["task_id", "instruction", "reference_answer", "response_left", "response_right", "lease_expires_at"]
                    .contains(&key.as_str()),
                "unexpected field {key}"
            );
        }
        let body = json!({
            "task_id": task["task_id"],
            "annotator_id": "ann-1",
            "choice": choices[seen % 3],
        });
        let ack: Value = client
            .post(format!("{}/api/judgments", svc.base))
            .json(&body)
            .send()
            .unwrap()
            .json()
            .unwrap();
        assert_eq!(ack["duplicate"], false);
        // Resubmitting is acknowledged without being counted twice.
        let again: Value = client
            .post(format!("{}/api/judgments", svc.base))
            .json(&body)
            .send()
            .unwrap()
            .json()
            .unwrap();
        assert_eq!(again["duplicate"], true);
        seen += 1;
    }
    assert_eq!(seen, 9);

    let progress: Value = client.get(format!("{}/api/progress", svc.base)).send().unwrap().json().unwrap();
    assert_eq!(progress["total"]["done"], 9);
    assert_eq!(progress["total"]["remaining"], 0);
    assert_eq!(progress["judgments"], 9);

    let export = client.get(format!("{}/api/export", svc.base)).send().unwrap();
    assert_eq!(export.headers()["content-type"], "application/x-ndjson");
    let lines = export.text().unwrap().lines().filter(|l| l.starts_with('{')).count();
    assert_eq!(lines, 9);

    // Judgments collected over HTTP are on disk for the ranking stage.
    let table = p.rank().unwrap();
    assert_eq!(table.rows.len(), 3);
}

#[test]
fn bad_requests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = competition(dir.path());
    let svc = start(&p, None);
    let client = Client::new();

    let missing = client.get(format!("{}/api/tasks/next", svc.base)).send().unwrap();
    assert_eq!(missing.status(), StatusCode::BAD_REQUEST);
    let empty = client
        .get(format!("{}/api/tasks/next?annotator=", svc.base))
        .send()
        .unwrap();
    assert_eq!(empty.status(), StatusCode::BAD_REQUEST);
    let unknown = client
        .post(format!("{}/api/judgments", svc.base))
        .json(&json!({"task_id": 999, "annotator_id": "a", "choice": "tie"}))
        .send()
        .unwrap();
    assert_eq!(unknown.status(), StatusCode::NOT_FOUND);
    let malformed = client
        .post(format!("{}/api/judgments", svc.base))
        .json(&json!({"task_id": 1, "annotator_id": "a", "choice": "both"}))
        .send()
        .unwrap();
    assert!(malformed.status().is_client_error());

    let index = client.get(format!("{}/", svc.base)).send().unwrap().text().unwrap();
    assert!(index.contains("annotation service"));
}

#[test]
fn static_ui_is_served_at_root() {
    let dir = tempfile::tempdir().unwrap();
    let p = competition(dir.path());
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<h1>judge</h1>").unwrap();
    std::fs::write(ui.path().join("app.js"), "console.log(1)").unwrap();
    let svc = start(&p, Some(ui.path()));
    let client = Client::new();
    assert_eq!(client.get(format!("{}/", svc.base)).send().unwrap().text().unwrap(), "<h1>judge</h1>");
    assert_eq!(client.get(format!("{}/app.js", svc.base)).send().unwrap().text().unwrap(), "console.log(1)");
    let api = client.get(format!("{}/api/progress", svc.base)).send().unwrap();
    assert_eq!(api.status(), StatusCode::OK);
}
