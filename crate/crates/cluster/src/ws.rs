//! WebSocket endpoint for the browser viewer. Downstream binary messages carry one
//! encoded FRAME_IMAGE frame each; downstream text messages carry JSON (`config` once
//! after the upgrade, then one `stats` object per frame). Upstream text messages are
//! JSON camera events.

use std::io::ErrorKind;
use std::net::TcpStream;
use std::time::Duration;

use anyhow::{bail, Context};
use clusterpt_core::protocol::{self, CameraEvent, Config, FrameImage, Message};
use clusterpt_core::Camera;
use serde::{Deserialize, Serialize};
use tungstenite::protocol::Role;
use tungstenite::{Message as WsMessage, WebSocket};

use crate::stats::FrameStats;

/// Upstream camera event as sent by the viewer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WsCameraEvent {
    pub frame_id: u64,
    pub position: [f32; 3],
    pub look_at: [f32; 3],
    pub up: [f32; 3],
    pub fov: f32,
}

impl From<WsCameraEvent> for CameraEvent {
    fn from(e: WsCameraEvent) -> CameraEvent {
        CameraEvent { frame_id: e.frame_id, position: e.position, look_at: e.look_at, up: e.up, fov: e.fov }
    }
}

impl From<CameraEvent> for WsCameraEvent {
    fn from(e: CameraEvent) -> WsCameraEvent {
        WsCameraEvent { frame_id: e.frame_id, position: e.position, look_at: e.look_at, up: e.up, fov: e.fov }
    }
}

/// First text message sent after the upgrade.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WsConfig {
    #[serde(rename = "type")]
    pub kind: String,
    pub width: u32,
    pub height: u32,
    pub strategy: String,
    pub participants: u32,
    pub total_spp: u32,
    pub camera: WsCameraEvent,
}

#[derive(Debug, Serialize)]
struct WsStats<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    #[serde(flatten)]
    stats: &'a FrameStats,
}

pub struct WsReader {
    ws: WebSocket<TcpStream>,
    last_id: Option<u64>,
    pub rejected: u64,
}

pub struct WsWriter {
    ws: WebSocket<TcpStream>,
}

/// What a poll of the upstream direction found.
#[derive(Debug, Clone, PartialEq)]
pub enum WsPoll {
    /// Latest valid camera among the drained events, if any arrived.
    Open(Option<Camera>),
    Closed,
}

/// Completes the upgrade handshake and splits the connection into a reader and a writer
/// sharing one socket.
pub fn accept(stream: TcpStream) -> anyhow::Result<(WsReader, WsWriter)> {
    stream.set_nodelay(true)?;
    let write_half = stream.try_clone()?;
    let ws = tungstenite::accept(stream).map_err(|e| anyhow::anyhow!("websocket handshake: {e}"))?;
    let writer = WebSocket::from_raw_socket(write_half, Role::Server, None);
    Ok((WsReader { ws, last_id: None, rejected: 0 }, WsWriter { ws: writer }))
}

impl WsReader {
    pub fn stream(&self) -> &TcpStream {
        self.ws.get_ref()
    }

    /// Drains upstream messages, waiting at most `wait` for the first one.
    pub fn poll(&mut self, wait: Duration) -> anyhow::Result<WsPoll> {
        let mut latest = None;
        let mut timeout = wait.max(Duration::from_micros(100));
        loop {
            self.ws.get_ref().set_read_timeout(Some(timeout))?;
            match self.ws.read() {
                Ok(WsMessage::Text(text)) => {
                    if let Some(c) = self.parse(&text) {
                        latest = Some(c);
                    }
                }
                Ok(WsMessage::Close(_)) => return Ok(WsPoll::Closed),
                Ok(_) => {}
                Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    return Ok(WsPoll::Open(latest));
                }
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => {
                    return Ok(WsPoll::Closed);
                }
                Err(tungstenite::Error::Io(e)) if e.kind() == ErrorKind::UnexpectedEof => return Ok(WsPoll::Closed),
                Err(tungstenite::Error::Protocol(_)) => return Ok(WsPoll::Closed),
                Err(e) => return Err(e).context("websocket read"),
            }
            timeout = Duration::from_micros(100);
        }
    }

    /// Valid events must have increasing frame ids and a usable camera; others are
    /// counted and dropped.
    fn parse(&mut self, text: &str) -> Option<Camera> {
        let event = match serde_json::from_str::<WsCameraEvent>(text) {
            Ok(e) => e,
            Err(e) => {
                log::warn!("viewer sent an unparsable event: {e}");
                self.rejected += 1;
                return None;
            }
        };
        if self.last_id.is_some_and(|l| event.frame_id <= l) {
            self.rejected += 1;
            return None;
        }
        let camera = CameraEvent::from(event).camera();
        if camera.validate().is_err() {
            self.rejected += 1;
            return None;
        }
        self.last_id = Some(event.frame_id);
        Some(camera)
    }
}

impl WsWriter {
    pub fn send_config(&mut self, config: &Config, total_spp: u32, camera: &Camera) -> anyhow::Result<()> {
        let c = WsConfig {
            kind: "config".into(),
            width: config.width,
            height: config.height,
            strategy: config.strategy.to_string(),
            participants: config.participants,
            total_spp,
            camera: CameraEvent::from_camera(0, camera).into(),
        };
        self.ws.send(WsMessage::Text(serde_json::to_string(&c)?))?;
        Ok(())
    }

    /// Sends one frame and its stats; returns the binary message size.
    pub fn send_frame(&mut self, frame: &FrameImage, stats: &FrameStats) -> anyhow::Result<usize> {
        let bytes = protocol::encode(&Message::FrameImage(frame.clone()))?;
        let n = bytes.len();
        self.ws.send(WsMessage::Binary(bytes))?;
        self.ws.send(WsMessage::Text(serde_json::to_string(&WsStats { kind: "stats", stats })?))?;
        Ok(n)
    }

    pub fn close(&mut self) {
        let _ = self.ws.close(None);
        let _ = self.ws.flush();
    }
}

/// Decodes a downstream binary message into its frame.
pub fn decode_binary(bytes: &[u8]) -> anyhow::Result<FrameImage> {
    match protocol::decode_exact(bytes)? {
        Message::FrameImage(f) => Ok(f),
        other => bail!("expected FRAME_IMAGE, got {}", other.name()),
    }
}
