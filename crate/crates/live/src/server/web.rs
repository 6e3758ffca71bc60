//! Viewer endpoint: WebSocket state channel, slice PNGs, meshes.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, watch};

use super::{Shared, ANATOMY_MESH_URL, COLLECTING_SYSTEM_MESH_URL};
use crate::protocol::{Command, ServerMsg};

pub(crate) async fn serve(listener: TcpListener, shared: Shared, mut stop: watch::Receiver<bool>) {
    let app = Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/ws", get(ws_upgrade))
        .route("/snapshot", get(snapshot))
        .route("/slices/{file}", get(slice_png))
        .route(ANATOMY_MESH_URL, get(anatomy_mesh))
        .route(COLLECTING_SYSTEM_MESH_URL, get(collecting_system_mesh))
        .with_state(shared);
    let shutdown = async move {
        let _ = stop.changed().await;
    };
    if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
        tracing::error!("viewer endpoint failed: {e}");
    }
}

fn obj_response(bytes: Option<Arc<[u8]>>) -> Response {
    match bytes {
        Some(b) => ([(header::CONTENT_TYPE, "text/plain")], Bytes::from(b.to_vec())).into_response(),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn anatomy_mesh(State(shared): State<Shared>) -> Response {
    obj_response(shared.anatomy_obj.clone())
}

async fn collecting_system_mesh(State(shared): State<Shared>) -> Response {
    obj_response(shared.collecting_system_obj.clone())
}

async fn slice_png(State(shared): State<Shared>, Path(file): Path<String>) -> Response {
    let Some(id) = file.strip_suffix(".png") else {
        return StatusCode::NOT_FOUND.into_response();
    };
    let png = shared.slices.lock().expect("slice cache lock").get(id);
    match png {
        Some(png) => ([(header::CONTENT_TYPE, "image/png")], Bytes::from(png.to_vec())).into_response(),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn snapshot(State(shared): State<Shared>) -> Response {
    match shared.subscribe().await {
        Some((line, _)) => ([(header::CONTENT_TYPE, "application/json")], line).into_response(),
        None => StatusCode::SERVICE_UNAVAILABLE.into_response(),
    }
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(shared): State<Shared>) -> Response {
    ws.on_upgrade(move |socket| viewer(socket, shared))
}

/// One viewer: snapshot first, then every broadcast message in order. A
/// viewer that falls too far behind gets a fresh snapshot instead of the
/// messages it missed.
async fn viewer(socket: WebSocket, shared: Shared) {
    let (mut sink, mut incoming) = socket.split();
    let Some((line, mut updates)) = shared.subscribe().await else {
        return;
    };
    if sink.send(Message::Text(line.into())).await.is_err() {
        return;
    }
    let (reply_tx, mut replies) = mpsc::unbounded_channel::<ServerMsg>();
    loop {
        let out: String = tokio::select! {
            update = updates.recv() => match update {
                Ok(line) => line.to_string(),
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    tracing::debug!(missed = n, "viewer lagged, resending snapshot");
                    let Some((line, rx)) = shared.subscribe().await else { break };
                    updates = rx;
                    line
                }
                Err(broadcast::error::RecvError::Closed) => break,
            },
            Some(reply) = replies.recv() => reply.to_line(),
            msg = incoming.next() => match msg {
                Some(Ok(Message::Text(text))) => match serde_json::from_str::<Command>(&text) {
                    Ok(Command::Resync { req_id }) => {
                        let Some((line, rx)) = shared.subscribe().await else { break };
                        updates = rx;
                        let _ = reply_tx.send(ServerMsg::ok(req_id, None));
                        line
                    }
                    Ok(cmd) => {
                        let (shared, tx) = (shared.clone(), reply_tx.clone());
                        tokio::spawn(async move {
                            let _ = tx.send(shared.command(cmd).await);
                        });
                        continue;
                    }
                    Err(e) => ServerMsg::err(0, format!("bad command: {e}")).to_line(),
                },
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => continue,
            },
        };
        if sink.send(Message::Text(out.into())).await.is_err() {
            break;
        }
    }
}
