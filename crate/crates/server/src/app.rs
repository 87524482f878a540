//! HTTP and WebSocket routes.
//!
//! - `POST /sessions` with a [`SessionConfig`] body opens a session.
//! - `GET /sessions/{id}` reports its status, `GET /sessions/{id}/dataset`
//!   returns its records as JSON lines, `DELETE /sessions/{id}` closes it.
//! - `GET /sessions/{id}/ws` attaches the overseer connection.
//! - Anything else is served from the UI directory when one is given.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use tower_http::services::ServeDir;

use crate::protocol::{ClientMessage, ErrorCode, ServerMessage, SessionConfig, SessionId};
use crate::session::{launch, DatasetLog, SessionCore, SessionStatus};

/// Every open session, plus the log they all append to.
#[derive(Default)]
pub struct Registry {
    sessions: Mutex<HashMap<SessionId, Arc<SessionCore>>>,
    next_id: AtomicU64,
    log: Option<Arc<DatasetLog>>,
}

impl Registry {
    pub fn new(log: Option<DatasetLog>) -> Self {
        Self {
            sessions: Mutex::default(),
            next_id: AtomicU64::new(1),
            log: log.map(Arc::new),
        }
    }

    fn map(&self) -> std::sync::MutexGuard<'_, HashMap<SessionId, Arc<SessionCore>>> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn open(&self, config: SessionConfig) -> Result<Arc<SessionCore>, ServerMessage> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed).max(1);
        let launched = launch(id, config, self.log.clone())
            .map_err(|e| ServerMessage::error(ErrorCode::InvalidConfig, e))?;
        self.map().insert(id, Arc::clone(&launched.core));
        Ok(launched.core)
    }

    pub fn get(&self, id: SessionId) -> Option<Arc<SessionCore>> {
        self.map().get(&id).cloned()
    }

    pub fn close(&self, id: SessionId) -> bool {
        match self.map().remove(&id) {
            Some(core) => {
                core.close();
                true
            }
            None => false,
        }
    }

    pub fn statuses(&self) -> Vec<SessionStatus> {
        let mut all: Vec<SessionStatus> = self.map().values().map(|c| c.status()).collect();
        all.sort_by_key(|s| s.session_id);
        all
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    /// Static client bundle served at `/`.
    pub ui_dir: Option<PathBuf>,
    /// Shared JSON-lines log of every session's records.
    pub dataset_log: Option<PathBuf>,
}

pub fn router(registry: Arc<Registry>, ui_dir: Option<&std::path::Path>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(session_status).delete(close_session))
        .route("/sessions/{id}/dataset", get(session_dataset))
        .route("/sessions/{id}/ws", get(session_socket))
        .with_state(registry);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

fn error_response(status: StatusCode, msg: ServerMessage) -> Response {
    (status, Json(msg)).into_response()
}

fn unknown(id: SessionId) -> ServerMessage {
    ServerMessage::error(ErrorCode::UnknownSession, format!("no session {id}"))
}

async fn create_session(State(registry): State<Arc<Registry>>, body: Bytes) -> Response {
    let config: SessionConfig = match serde_json::from_slice(&body) {
        Ok(c) => c,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, ServerMessage::error(ErrorCode::InvalidConfig, e.to_string())),
    };
    match registry.open(config) {
        Ok(core) => (StatusCode::CREATED, Json(serde_json::json!({ "session_id": core.id }))).into_response(),
        Err(msg) => error_response(StatusCode::BAD_REQUEST, msg),
    }
}

async fn list_sessions(State(registry): State<Arc<Registry>>) -> Json<Vec<SessionStatus>> {
    Json(registry.statuses())
}

async fn session_status(State(registry): State<Arc<Registry>>, Path(id): Path<SessionId>) -> Response {
    match registry.get(id) {
        Some(core) => Json(core.status()).into_response(),
        None => error_response(StatusCode::NOT_FOUND, unknown(id)),
    }
}

async fn session_dataset(State(registry): State<Arc<Registry>>, Path(id): Path<SessionId>) -> Response {
    match registry.get(id) {
        Some(core) => ([(header::CONTENT_TYPE, "application/x-ndjson")], core.dataset_jsonl()).into_response(),
        None => error_response(StatusCode::NOT_FOUND, unknown(id)),
    }
}

async fn close_session(State(registry): State<Arc<Registry>>, Path(id): Path<SessionId>) -> Response {
    if registry.close(id) {
        StatusCode::NO_CONTENT.into_response()
    } else {
        error_response(StatusCode::NOT_FOUND, unknown(id))
    }
}

async fn session_socket(
    State(registry): State<Arc<Registry>>,
    Path(id): Path<SessionId>,
    ws: WebSocketUpgrade,
) -> Response {
    ws.on_upgrade(move |socket| overseer_connection(socket, registry, id))
}

fn encode(msg: &ServerMessage) -> Message {
    Message::Text(serde_json::to_string(msg).expect("messages serialize").into())
}

async fn reject(mut socket: WebSocket, msg: ServerMessage) {
    let _ = socket.send(encode(&msg)).await;
    let _ = socket.send(Message::Close(None)).await;
}

async fn overseer_connection(socket: WebSocket, registry: Arc<Registry>, id: SessionId) {
    let Some(core) = registry.get(id) else {
        return reject(socket, unknown(id)).await;
    };
    let (tx, mut rx) = tokio::sync::mpsc::unbounded_channel();
    let conn = match core.attach(tx) {
        Ok(conn) => conn,
        Err(msg) => return reject(socket, msg).await,
    };
    let (mut sink, mut stream) = socket.split();
    let writer = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            if sink.send(encode(&msg)).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    while let Some(Ok(frame)) = stream.next().await {
        let text = match frame {
            Message::Text(t) => t,
            Message::Close(_) => break,
            _ => continue,
        };
        let reply = match serde_json::from_str::<ClientMessage>(text.as_str()) {
            Err(e) => Some(ServerMessage::error(ErrorCode::InvalidMessage, e.to_string())),
            Ok(ClientMessage::DecisionResponse {
                id,
                verdict,
                replacement,
            }) => core.respond(id, verdict, replacement).err(),
            Ok(ClientMessage::Relabel { record, blocked }) => Some(match core.relabel(record, blocked) {
                Ok(()) => ServerMessage::Relabeled { record, blocked },
                Err(msg) => msg,
            }),
        };
        if let Some(msg) = reply {
            core.send_to(conn, msg);
        }
    }
    core.detach(conn);
    // Detaching dropped the sender, so the writer drains and stops.
    let _ = writer.await;
}
