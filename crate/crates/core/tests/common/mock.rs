//! Local OpenAI-compatible server whose behaviour is chosen by the request's
//! `model` field.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

#[derive(Default)]
pub struct Counters {
    pub requests: AtomicUsize,
    pub flaky: AtomicUsize,
}

/// Completions used by the `ok` model: one step per line.
pub const SOLUTION: &str = "Add 2 and 3 to get 5.\nDouble it to get 10.\nAnswer: 10";

async fn chat(State(c): State<Arc<Counters>>, Json(body): Json<Value>) -> Response {
    c.requests.fetch_add(1, Ordering::SeqCst);
    let n = body["n"].as_u64().unwrap_or(1) as usize;
    let ok = |n: usize| {
        let choices: Vec<Value> = (0..n)
            .map(|i| json!({"index": i, "message": {"role": "assistant", "content": SOLUTION}, "finish_reason": "stop"}))
            .collect();
        Json(json!({"id": "x", "object": "chat.completion", "choices": choices})).into_response()
    };
    match body["model"].as_str().unwrap_or("") {
        "ok" => ok(n),
        "flaky" => {
            if c.flaky.fetch_add(1, Ordering::SeqCst) < 2 {
                (StatusCode::TOO_MANY_REQUESTS, "slow down").into_response()
            } else {
                ok(n)
            }
        }
        "broken" => (StatusCode::OK, "{\"choices\": [ {\"message\": ").into_response(),
        "down" => (StatusCode::INTERNAL_SERVER_ERROR, "boom").into_response(),
        "short" => ok(1),
        _ => (StatusCode::BAD_REQUEST, "unknown model").into_response(),
    }
}

pub struct MockServer {
    pub addr: SocketAddr,
    pub counters: Arc<Counters>,
}

impl MockServer {
    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn requests(&self) -> usize {
        self.counters.requests.load(Ordering::SeqCst)
    }
}

/// Starts the server on its own thread and runtime; it lives for the rest
/// of the test process.
pub fn start() -> MockServer {
    let counters = Arc::new(Counters::default());
    let (tx, rx) = std::sync::mpsc::channel();
    let state = counters.clone();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            let app = Router::new().route("/v1/chat/completions", post(chat)).with_state(state);
            axum::serve(listener, app).await.unwrap();
        });
    });
    MockServer { addr: rx.recv().unwrap(), counters }
}
