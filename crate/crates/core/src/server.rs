//! HTTP front for a [`TaskQueue`].
//!
//! | method | path                          | body / reply                          |
//! |--------|-------------------------------|---------------------------------------|
//! | GET    | `/api/tasks/next?annotator=ID`| `TaskPayload`, or 204 when none left  |
//! | POST   | `/api/judgments`              | `{task_id, annotator_id, choice}` → `Ack` |
//! | GET    | `/api/progress`               | `Progress`                            |
//! | GET    | `/api/export`                 | judgments as JSON lines               |
//!
//! Everything else is served from the UI directory, if one is configured.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::annotation::{AnnotationError, TaskQueue};
use crate::model::Choice;

pub type SharedQueue = Arc<Mutex<TaskQueue>>;

const PLACEHOLDER: &str = "<!doctype html><title>annotation</title>\
<p>The annotation service is running. Build the UI bundle and pass its directory with <code>--ui-dir</code>.</p>";

#[derive(Deserialize)]
struct NextQuery {
    annotator: String,
}

#[derive(Deserialize)]
pub struct SubmitBody {
    pub task_id: u64,
    pub annotator_id: String,
    pub choice: Choice,
}

struct ApiError(AnnotationError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            AnnotationError::NotFound(_) => StatusCode::NOT_FOUND,
            AnnotationError::LeaseExpired { .. } => StatusCode::CONFLICT,
            AnnotationError::EmptyAnnotator => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

async fn next_task(State(q): State<SharedQueue>, Query(p): Query<NextQuery>) -> Result<Response, ApiError> {
    let next = q.lock().unwrap().next_task(&p.annotator).map_err(ApiError)?;
    Ok(match next {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn submit(State(q): State<SharedQueue>, Json(b): Json<SubmitBody>) -> Result<Response, ApiError> {
    let ack = q
        .lock()
        .unwrap()
        .submit(b.task_id, &b.annotator_id, b.choice)
        .map_err(ApiError)?;
    Ok(Json(ack).into_response())
}

async fn progress(State(q): State<SharedQueue>) -> Response {
    Json(q.lock().unwrap().progress()).into_response()
}

async fn export(State(q): State<SharedQueue>) -> Result<Response, ApiError> {
    let body = q.lock().unwrap().export_judgments().map_err(ApiError)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

pub fn router(queue: SharedQueue, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/judgments", post(submit))
        .route("/api/progress", get(progress))
        .route("/api/export", get(export))
        .with_state(queue);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER) })),
    }
}

/// Serves until the process is stopped.
pub async fn serve(queue: SharedQueue, ui_dir: Option<PathBuf>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(queue, ui_dir)).await
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{LeaseConfig, Task};
    use crate::clock::ManualClock;
    use crate::model::{canonical_pair, InstructionId, ModelId};
    use axum::body::{to_bytes, Body};
    use axum::http::Request;
    use tower::ServiceExt;

    fn app() -> Router {
        let pair = canonical_pair(&ModelId::from("m-one"), &ModelId::from("m-two")).unwrap();
        let tasks = (1..=2)
            .map(|i| Task {
                id: i,
                pair: pair.clone(),
                instruction_id: InstructionId::from(format!("x{i}")),
                instruction: "Say hi".into(),
                reference_answer: None,
                response_left: "hi".into(),
                response_right: "hello".into(),
                left_is: ModelId::from("m-two"),
            })
            .collect();
        let clock = Arc::new(ManualClock::new(chrono::DateTime::UNIX_EPOCH));
        let q = TaskQueue::new(tasks, LeaseConfig::default(), clock).unwrap();
        router(Arc::new(Mutex::new(q)), None)
    }

    async fn call(app: &Router, req: Request<Body>) -> (StatusCode, String) {
        let res = app.clone().oneshot(req).await.unwrap();
        let status = res.status();
        let body = to_bytes(res.into_body(), usize::MAX).await.unwrap();
        (status, String::from_utf8(body.to_vec()).unwrap())
    }

    fn get_req(uri: &str) -> Request<Body> {
        Request::get(uri).body(Body::empty()).unwrap()
    }

    fn post_req(body: &str) -> Request<Body> {
        Request::post("/api/judgments")
            .header("content-type", "application/json")
            .body(Body::from(body.to_owned()))
            .unwrap()
    }

    #[tokio::test]
    async fn full_round_trip() {
        let app = app();
        let (s, body) = call(&app, get_req("/api/tasks/next?annotator=a1")).await;
        assert_eq!(s, StatusCode::OK);
        assert!(!body.contains("m-one") && !body.contains("m-two"));
        let id = serde_json::from_str::<serde_json::Value>(&body).unwrap()["task_id"].as_u64().unwrap();

        let submit = format!(r#"{{"task_id":{id},"annotator_id":"a1","choice":"left"}}"#);
        let (s, body) = call(&app, post_req(&submit)).await;
        assert_eq!(s, StatusCode::OK);
        assert!(body.contains("\"duplicate\":false"));
        let (_, body) = call(&app, post_req(&submit)).await;
        assert!(body.contains("\"duplicate\":true"));

        let (s, body) = call(&app, get_req("/api/progress")).await;
        assert_eq!(s, StatusCode::OK);
        assert!(body.contains("\"done\":1"));

        let (_, body) = call(&app, get_req("/api/export")).await;
        let lines: Vec<&str> = body.lines().collect();
        assert_eq!(lines.len(), 2);
        // m-two was on the left and won, so model_b won.
        assert!(lines[1].contains("\"outcome\":0.0"));
    }

    #[tokio::test]
    async fn status_codes() {
        let app = app();
        let (s, _) = call(&app, post_req(r#"{"task_id":42,"annotator_id":"a","choice":"tie"}"#)).await;
        assert_eq!(s, StatusCode::NOT_FOUND);
        let (s, _) = call(&app, post_req(r#"{"task_id":1,"annotator_id":"a","choice":"tie"}"#)).await;
        assert_eq!(s, StatusCode::CONFLICT);
        let (s, _) = call(&app, post_req(r#"{"task_id":1,"annotator_id":"a","choice":"maybe"}"#)).await;
        assert!(s.is_client_error());
        let (s, _) = call(&app, get_req("/api/tasks/next")).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);

        call(&app, get_req("/api/tasks/next?annotator=a")).await;
        call(&app, get_req("/api/tasks/next?annotator=b")).await;
        let (s, body) = call(&app, get_req("/api/tasks/next?annotator=c")).await;
        assert_eq!((s, body.as_str()), (StatusCode::NO_CONTENT, ""));

        let (s, body) = call(&app, get_req("/")).await;
        assert_eq!(s, StatusCode::OK);
        assert!(body.contains("annotation service"));
    }
}
