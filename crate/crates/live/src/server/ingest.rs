//! OpenIGTLink listener: one task per tracker connection, poses forwarded to
//! the owner in arrival order.

use std::net::SocketAddr;

use scopenav_core::igtl::{Body, FrameDecoder};
use tokio::io::AsyncReadExt;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinSet;

use super::owner::Input;
use crate::tracked_sample;

pub(crate) async fn accept_loop(listener: TcpListener, inputs: mpsc::Sender<Input>, mut stop: watch::Receiver<bool>) {
    let mut conns = JoinSet::new();
    loop {
        tokio::select! {
            _ = stop.changed() => break,
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    tracing::info!(%peer, "tracker connected");
                    conns.spawn(connection(stream, peer, inputs.clone()));
                }
                Err(e) => tracing::warn!("igtl accept failed: {e}"),
            },
            Some(_) = conns.join_next(), if !conns.is_empty() => {}
        }
    }
    conns.shutdown().await;
}

async fn connection(mut stream: TcpStream, peer: SocketAddr, inputs: mpsc::Sender<Input>) {
    let mut dec = FrameDecoder::new();
    let mut buf = vec![0u8; 64 * 1024];
    let (mut skipped, mut poses) = (0u64, 0u64);
    loop {
        let n = match stream.read(&mut buf).await {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) => {
                tracing::warn!(%peer, "igtl read failed: {e}");
                break;
            }
        };
        dec.push(&buf[..n]);
        loop {
            match dec.next_message() {
                Ok(None) => break,
                Ok(Some(msg)) => match &msg.body {
                    Body::Transform(t) => match tracked_sample(0.0, t) {
                        Some(sample) => {
                            poses += 1;
                            if inputs.send(Input::Pose(sample)).await.is_err() {
                                return;
                            }
                        }
                        None => {
                            skipped += 1;
                            tracing::warn!(%peer, device = %msg.header.device_name, "non-rigid transform skipped");
                        }
                    },
                    Body::Status(s) => tracing::info!(%peer, code = s.code, "status: {}", s.message),
                    other => tracing::debug!(%peer, "ignoring {} message", other.type_name()),
                },
                Err(e) => {
                    skipped += 1;
                    tracing::warn!(%peer, "malformed message skipped: {e}");
                    if !dec.skip_frame() {
                        tracing::warn!(%peer, "cannot find the next message boundary, closing");
                        return;
                    }
                }
            }
        }
    }
    if dec.buffered() > 0 {
        tracing::warn!(%peer, bytes = dec.buffered(), "connection closed mid-message");
    }
    tracing::info!(%peer, poses, skipped, "tracker disconnected");
}
