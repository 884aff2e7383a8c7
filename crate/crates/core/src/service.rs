//! Websocket render service.
//!
//! Text frames carry JSON messages, binary frames carry images. A session
//! renders the most recent camera it received (older pending cameras are
//! dropped), always from a complete scene snapshot. Zoom requests run one at a
//! time on a blocking worker and publish their layer atomically; every session
//! is told about each commit.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc, watch};
use tokio_tungstenite::tungstenite::Message;

use crate::geometry::CameraSpec;
use crate::raster::{render_color, RenderConfig};
use crate::scene::SharedScene;
use crate::sceneio::{manifest, SceneManifest};
use crate::synth::{synthesize_into, DetailProvider, DetailRequest, SynthOptions, DEFAULT_ZOOM_FACTOR};

/// Bytes before the encoded image in a binary frame.
pub const FRAME_HEADER_BYTES: usize = 16;

/// Largest accepted render size per side.
pub const MAX_RENDER_SIDE: u32 = 8192;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("accept failed: {0}")]
    Accept(#[source] std::io::Error),
}

#[derive(Clone, Debug, Default)]
pub struct ServiceConfig {
    pub render: RenderConfig,
    pub synth: SynthOptions,
    /// Stream JPEG at this quality instead of PNG.
    pub jpeg_quality: Option<u8>,
}


#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ClientMessage {
    Camera(CameraSpec),
    Zoom {
        layer: usize,
        center: [f64; 2],
        #[serde(default = "default_factor")]
        factor: f64,
        #[serde(default)]
        prompt: String,
        #[serde(default)]
        seed: u64,
    },
    Layers,
}

fn default_factor() -> f64 {
    DEFAULT_ZOOM_FACTOR
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMessage {
    Committed { layer: usize, version: u64 },
    Error { code: String, msg: String },
    Layers(SceneManifest),
}

/// Frame header: frame id, scene version, width, height (u32 little-endian).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub frame_id: u32,
    pub version: u32,
    pub width: u32,
    pub height: u32,
}

impl FrameHeader {
    pub fn encode(&self) -> [u8; FRAME_HEADER_BYTES] {
        let mut out = [0; FRAME_HEADER_BYTES];
        for (k, v) in [self.frame_id, self.version, self.width, self.height].into_iter().enumerate() {
            out[4 * k..4 * k + 4].copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        let word = |k: usize| Some(u32::from_le_bytes(bytes.get(4 * k..4 * k + 4)?.try_into().ok()?));
        Some(Self {
            frame_id: word(0)?,
            version: word(1)?,
            width: word(2)?,
            height: word(3)?,
        })
    }
}

/// State shared by all sessions.
pub struct Service {
    scene: Arc<SharedScene>,
    provider: Arc<dyn DetailProvider>,
    config: ServiceConfig,
    busy: AtomicBool,
    commits: broadcast::Sender<ServerMessage>,
}

impl Service {
    pub fn new(scene: Arc<SharedScene>, provider: Arc<dyn DetailProvider>, config: ServiceConfig) -> Arc<Self> {
        let (commits, _) = broadcast::channel(64);
        Arc::new(Self {
            scene,
            provider,
            config,
            busy: AtomicBool::new(false),
            commits,
        })
    }

    pub fn scene(&self) -> &Arc<SharedScene> {
        &self.scene
    }

    /// Whether a synthesis job is running.
    pub fn is_busy(&self) -> bool {
        self.busy.load(Ordering::SeqCst)
    }

    /// Starts a synthesis job unless one is running. The job outlives the
    /// requesting session; its outcome goes to `reply` if that still exists.
    fn start_zoom(self: &Arc<Self>, request: DetailRequest, reply: mpsc::UnboundedSender<Message>) -> bool {
        if self.busy.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_err() {
            return false;
        }
        let service = Arc::clone(self);
        tokio::task::spawn_blocking(move || {
            let outcome = synthesize_into(&service.scene, &request, service.provider.as_ref(), &service.config.synth);
            service.busy.store(false, Ordering::SeqCst);
            match outcome {
                Ok((report, version)) => {
                    log::info!("committed layer {} at version {version}", report.layer);
                    let _ = service.commits.send(ServerMessage::Committed {
                        layer: report.layer,
                        version,
                    });
                }
                Err(e) => {
                    log::warn!("synthesis failed: {e}");
                    let _ = reply.send(text(&ServerMessage::Error {
                        code: "synthesis_failed".into(),
                        msg: e.to_string(),
                    }));
                }
            }
        });
        true
    }
}

fn text(msg: &ServerMessage) -> Message {
    Message::Text(serde_json::to_string(msg).expect("server messages serialize"))
}

fn error(code: &str, msg: impl Into<String>) -> Message {
    text(&ServerMessage::Error {
        code: code.into(),
        msg: msg.into(),
    })
}

pub async fn bind(addr: &str) -> Result<TcpListener, ServiceError> {
    TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind {
        addr: addr.to_string(),
        source,
    })
}

/// Accepts sessions until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    service: Arc<Service>,
    shutdown: impl Future<Output = ()>,
) -> Result<(), ServiceError> {
    tokio::pin!(shutdown);
    loop {
        tokio::select! {
            _ = &mut shutdown => return Ok(()),
            accepted = listener.accept() => {
                let (stream, peer) = accepted.map_err(ServiceError::Accept)?;
                tokio::spawn(session(stream, peer, Arc::clone(&service)));
            }
        }
    }
}

async fn session(stream: TcpStream, peer: SocketAddr, service: Arc<Service>) {
    let ws = match tokio_tungstenite::accept_async(stream).await {
        Ok(ws) => ws,
        Err(e) => {
            log::debug!("{peer}: handshake failed: {e}");
            return;
        }
    };
    log::debug!("{peer}: connected");
    let (mut sink, mut incoming) = ws.split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Message>();
    let writer = tokio::spawn(async move {
        while let Some(msg) = out_rx.recv().await {
            if sink.send(msg).await.is_err() {
                break;
            }
        }
    });

    // latest requested camera; the render loop only ever sees the newest one
    let (cam_tx, cam_rx) = watch::channel::<Option<CameraSpec>>(None);
    let renderer = tokio::spawn(render_loop(Arc::clone(&service), cam_rx, out_tx.clone()));

    let mut commits = service.commits.subscribe();
    loop {
        tokio::select! {
            msg = incoming.next() => {
                let Some(Ok(msg)) = msg else { break };
                match msg {
                    Message::Text(t) => handle_text(&service, &t, &cam_tx, &out_tx),
                    Message::Binary(_) => {
                        let _ = out_tx.send(error("bad_request", "binary client messages are not supported"));
                    }
                    Message::Close(_) => break,
                    _ => {}
                }
            }
            commit = commits.recv() => {
                match commit {
                    Ok(msg) => {
                        let _ = out_tx.send(text(&msg));
                        // show the new layer without waiting for camera input
                        cam_tx.send_modify(|_| {});
                    }
                    Err(broadcast::error::RecvError::Lagged(_)) => {}
                    Err(broadcast::error::RecvError::Closed) => break,
                }
            }
        }
    }
    drop(cam_tx);
    let _ = renderer.await;
    drop(out_tx);
    let _ = writer.await;
    log::debug!("{peer}: disconnected");
}

fn handle_text(
    service: &Arc<Service>,
    text_msg: &str,
    cam_tx: &watch::Sender<Option<CameraSpec>>,
    out: &mpsc::UnboundedSender<Message>,
) {
    let msg: ClientMessage = match serde_json::from_str(text_msg) {
        Ok(m) => m,
        Err(e) => {
            let _ = out.send(error("bad_request", e.to_string()));
            return;
        }
    };
    match msg {
        ClientMessage::Camera(spec) => {
            if spec.w == 0 || spec.h == 0 || spec.w > MAX_RENDER_SIDE || spec.h > MAX_RENDER_SIDE {
                let _ = out.send(error("bad_request", format!("render size {}x{} out of range", spec.w, spec.h)));
                return;
            }
            if let Err(e) = spec.to_camera() {
                let _ = out.send(error("bad_request", e.to_string()));
                return;
            }
            cam_tx.send_replace(Some(spec));
        }
        ClientMessage::Zoom {
            layer,
            center,
            factor,
            prompt,
            seed,
        } => {
            let request = DetailRequest {
                parent_layer: layer,
                zoom_center: center,
                zoom_factor: factor,
                prompt,
                seed,
            };
            if !service.start_zoom(request, out.clone()) {
                let _ = out.send(error("busy", "a synthesis job is already running"));
            }
        }
        ClientMessage::Layers => {
            let m = manifest(&service.scene.snapshot());
            let _ = out.send(text(&ServerMessage::Layers(m)));
        }
    }
}

async fn render_loop(
    service: Arc<Service>,
    mut cameras: watch::Receiver<Option<CameraSpec>>,
    out: mpsc::UnboundedSender<Message>,
) {
    let mut frame_id: u32 = 0;
    while cameras.changed().await.is_ok() {
        let Some(spec) = cameras.borrow_and_update().clone() else {
            continue;
        };
        let svc = Arc::clone(&service);
        let rendered = tokio::task::spawn_blocking(move || {
            let camera = spec.to_camera().ok()?;
            let snapshot = svc.scene.snapshot();
            let frame = render_color(&snapshot, &camera, &svc.config.render);
            let bytes = match svc.config.jpeg_quality {
                Some(q) => frame.color.to_jpeg_bytes(q),
                None => frame.color.to_png_bytes(),
            };
            Some((snapshot.version(), camera.width(), camera.height(), bytes))
        })
        .await;
        let Ok(Some((version, width, height, bytes))) = rendered else {
            let _ = out.send(error("render_failed", "render worker failed"));
            continue;
        };
        frame_id = frame_id.wrapping_add(1);
        let header = FrameHeader {
            frame_id,
            version: version as u32,
            width,
            height,
        };
        let mut payload = Vec::with_capacity(FRAME_HEADER_BYTES + bytes.len());
        payload.extend_from_slice(&header.encode());
        payload.extend_from_slice(&bytes);
        if out.send(Message::Binary(payload)).is_err() {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip() {
        let h = FrameHeader {
            frame_id: 7,
            version: 3,
            width: 256,
            height: 128,
        };
        let bytes = h.encode();
        assert_eq!(&bytes[..4], &7u32.to_le_bytes());
        assert_eq!(FrameHeader::decode(&bytes), Some(h));
        assert_eq!(FrameHeader::decode(&bytes[..15]), None);
    }

    #[test]
    fn client_messages_parse() {
        let cam: ClientMessage = serde_json::from_str(
            r#"{"type":"camera","pose":[1,0,0,0,0,1,0,0,0,0,1,0,0,0,0,1],"fx":100,"fy":100,"cx":8,"cy":8,"w":16,"h":16}"#,
        )
        .unwrap();
        assert!(matches!(cam, ClientMessage::Camera(ref c) if c.w == 16));
        let zoom: ClientMessage = serde_json::from_str(r#"{"type":"zoom","layer":0,"center":[3,4]}"#).unwrap();
        assert!(matches!(zoom, ClientMessage::Zoom { factor, .. } if factor == 8.0));
        assert!(matches!(serde_json::from_str(r#"{"type":"layers"}"#).unwrap(), ClientMessage::Layers));
        assert!(serde_json::from_str::<ClientMessage>(r#"{"type":"dance"}"#).is_err());
    }

    #[test]
    fn server_messages_serialize() {
        let s = serde_json::to_string(&ServerMessage::Committed { layer: 2, version: 5 }).unwrap();
        assert_eq!(s, r#"{"type":"committed","layer":2,"version":5}"#);
        let e = serde_json::to_string(&ServerMessage::Error {
            code: "busy".into(),
            msg: "x".into(),
        })
        .unwrap();
        assert_eq!(e, r#"{"type":"error","code":"busy","msg":"x"}"#);
    }
}
