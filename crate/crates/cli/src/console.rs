//! Operator console service: state document, command intake and a
//! server-sent event stream, plus whatever static assets are configured.

use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::Sender;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use laserguide::operate::Command;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::watch;

/// Version of the state document and command schemas.
pub const API_VERSION: u32 = 1;

#[derive(Clone)]
pub struct ConsoleShared {
    pub state: watch::Receiver<Value>,
    pub commands: Arc<Mutex<Option<Sender<Command>>>>,
    pub received: Arc<AtomicU64>,
    pub assets: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
pub struct CommandRequest {
    pub command: String,
    #[serde(default)]
    pub client_ts: Option<f64>,
}

fn error(status: StatusCode, code: &str, text: String) -> Response {
    (status, Json(json!({ "ok": false, "code": code, "error": text }))).into_response()
}

async fn get_state(State(s): State<ConsoleShared>) -> Json<Value> {
    Json(s.state.borrow().clone())
}

async fn post_command(State(s): State<ConsoleShared>, body: axum::body::Bytes) -> Response {
    let req: CommandRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, "malformed", e.to_string()),
    };
    let cmd: Command = match req.command.parse() {
        Ok(c) => c,
        Err(e) => return error(StatusCode::BAD_REQUEST, "unknown-command", e),
    };
    let sent = match s.commands.lock().expect("command lock").as_ref() {
        Some(tx) => tx.send(cmd).is_ok(),
        None => false,
    };
    if !sent {
        return error(
            StatusCode::CONFLICT,
            "run-finished",
            "the run is no longer accepting commands".into(),
        );
    }
    let seq = s.received.fetch_add(1, Ordering::SeqCst) + 1;
    log::info!("console command #{seq}: {} (client_ts {:?})", cmd.name(), req.client_ts);
    (
        StatusCode::ACCEPTED,
        Json(json!({ "ok": true, "seq": seq, "command": cmd.name() })),
    )
        .into_response()
}

fn event_stream(rx: watch::Receiver<Value>) -> impl Stream<Item = Result<Event, Infallible>> {
    let first = rx.borrow().clone();
    let initial = stream::once(async move { Ok(Event::default().event("state").json_data(first).expect("json")) });
    let updates = stream::unfold(rx, |mut rx| async move {
        rx.changed().await.ok()?;
        let doc = rx.borrow_and_update().clone();
        Some((Ok(Event::default().event("state").json_data(doc).expect("json")), rx))
    });
    initial.chain(updates)
}

async fn get_events(State(s): State<ConsoleShared>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    Sse::new(event_stream(s.state.clone())).keep_alive(KeepAlive::new().interval(Duration::from_secs(2)))
}

async fn health(State(s): State<ConsoleShared>) -> Json<Value> {
    let accepting = s.commands.lock().expect("command lock").is_some();
    Json(json!({ "ok": true, "version": API_VERSION, "accepting_commands": accepting }))
}

const FALLBACK_INDEX: &str = r#"<!doctype html>
<html><head><meta charset="utf-8"><title>laserguide</title></head>
<body>
<h1>laserguide run service</h1>
<p>No console assets configured (<code>--console-assets DIR</code>).</p>
<ul>
<li><a href="/api/state">GET /api/state</a> &mdash; state document</li>
<li>POST /api/command &mdash; <code>{"command": "NEXT"}</code></li>
<li><a href="/api/events">GET /api/events</a> &mdash; server-sent state updates</li>
</ul>
</body></html>
"#;

fn content_type(name: &str) -> &'static str {
    match name.rsplit('.').next() {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

async fn asset(s: &ConsoleShared, name: &str) -> Response {
    let Some(dir) = &s.assets else {
        return if name == "index.html" {
            Html(FALLBACK_INDEX).into_response()
        } else {
            StatusCode::NOT_FOUND.into_response()
        };
    };
    // Flat asset directory; no path traversal.
    if name.contains("..") || name.contains('/') || name.contains('\\') {
        return StatusCode::NOT_FOUND.into_response();
    }
    match tokio::fs::read(dir.join(name)).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(name))], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn index(State(s): State<ConsoleShared>) -> Response {
    asset(&s, "index.html").await
}

async fn static_file(State(s): State<ConsoleShared>, Path(name): Path<String>) -> Response {
    asset(&s, &name).await
}

pub fn router(shared: ConsoleShared) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/api/state", get(get_state))
        .route("/api/command", post(post_command))
        .route("/api/events", get(get_events))
        .route("/api/health", get(health))
        .route("/{name}", get(static_file))
        .with_state(shared)
}

/// Adds the service's own counters to a status document.
pub fn decorate(mut doc: Value, received: u64, accepting: bool) -> Value {
    if let Some(o) = doc.as_object_mut() {
        o.insert("api_version".into(), json!(API_VERSION));
        o.insert("commands_received".into(), json!(received));
        o.insert("accepting_commands".into(), json!(accepting));
    }
    doc
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpStream;

    fn http(addr: &str, req: &str) -> (u16, String) {
        let mut s = TcpStream::connect(addr).unwrap();
        s.write_all(req.as_bytes()).unwrap();
        let mut out = String::new();
        s.read_to_string(&mut out).unwrap();
        let status = out[9..12].parse().unwrap();
        let body = out.split_once("\r\n\r\n").map(|x| x.1.to_string()).unwrap_or_default();
        (status, body)
    }

    fn post(addr: &str, body: &str) -> (u16, String) {
        http(
            addr,
            &format!(
                "POST /api/command HTTP/1.1\r\nHost: x\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            ),
        )
    }

    #[test]
    fn service_round_trip() {
        let rt = tokio::runtime::Runtime::new().unwrap();
        let (state_tx, state_rx) = watch::channel(json!({ "phase": "IDLE" }));
        let (tx, rx) = std::sync::mpsc::channel();
        let shared = ConsoleShared {
            state: state_rx,
            commands: Arc::new(Mutex::new(Some(tx))),
            received: Arc::new(AtomicU64::new(0)),
            assets: None,
        };
        let commands = shared.commands.clone();
        let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        rt.spawn(async move { axum::serve(listener, router(shared)).await.unwrap() });

        let (code, body) = http(&addr, "GET /api/state HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n");
        assert_eq!(code, 200);
        assert!(body.contains("IDLE"));

        for (i, c) in ["NEXT", "stop", "PREV"].iter().enumerate() {
            let (code, body) = post(&addr, &format!(r#"{{"command":"{c}","client_ts":1.5}}"#));
            assert_eq!(code, 202);
            assert!(body.contains(&format!("\"seq\":{}", i + 1)));
        }
        assert_eq!(
            rx.try_iter().collect::<Vec<_>>(),
            vec![Command::Next, Command::Stop, Command::Prev]
        );
        assert_eq!(post(&addr, r#"{"command":"JUMP"}"#).0, 400);
        assert_eq!(post(&addr, "not json").0, 400);

        // SSE: initial document, then one event per update.
        let mut s = TcpStream::connect(&addr).unwrap();
        s.write_all(b"GET /api/events HTTP/1.1\r\nHost: x\r\n\r\n").unwrap();
        let mut r = BufReader::new(s);
        let mut data = Vec::new();
        let mut line = String::new();
        while data.len() < 2 {
            line.clear();
            r.read_line(&mut line).unwrap();
            if let Some(d) = line.strip_prefix("data: ") {
                data.push(d.trim().to_string());
                if data.len() == 1 {
                    state_tx.send(json!({ "phase": "MOVING" })).unwrap();
                }
            }
        }
        assert!(data[0].contains("IDLE") && data[1].contains("MOVING"));

        commands.lock().unwrap().take();
        assert_eq!(post(&addr, r#"{"command":"NEXT"}"#).0, 409);
        let (code, body) = http(&addr, "GET / HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n");
        assert_eq!(code, 200);
        assert!(body.contains("/api/state"));
        assert_eq!(
            http(
                &addr,
                "GET /..%2Fsecret HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n"
            )
            .0,
            404
        );
    }
}
