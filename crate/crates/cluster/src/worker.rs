//! A worker: replicates the scene from forwarded updates, renders its share of every
//! frame and ships the radiance buffer back.
//!
//! Principal threads: the main thread (events and rendering) and one network thread
//! (sends buffers), joined by one ring queue so frame n is in flight while n + 1 renders.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use anyhow::bail;
use clusterpt_core::distribution::{plan, PlanOptions, WorkAssignment};
use clusterpt_core::pipeline::{Packet, PushError};
use clusterpt_core::protocol::{Config, Message, Role, Stats};
use clusterpt_core::scene_file::load_named_scene;
use clusterpt_core::{ring_queue, Consumer, RadianceBuffer, Scene};

use crate::net::{self, MsgReader, MsgWriter};
use crate::threads::ThreadRegistry;

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub connect: String,
    pub scene_dir: Option<PathBuf>,
    /// Render pool size; `None` uses every core.
    pub threads: Option<usize>,
    pub queue_capacity: usize,
    /// How long to keep retrying the initial connection.
    pub connect_timeout: Duration,
    pub registry: ThreadRegistry,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        WorkerConfig {
            connect: "127.0.0.1:7879".into(),
            scene_dir: None,
            threads: None,
            queue_capacity: 3,
            connect_timeout: Duration::from_secs(10),
            registry: ThreadRegistry::new(),
        }
    }
}

/// Closed interval in milliseconds since the worker started rendering.
pub type Span = (f64, f64);

#[derive(Debug, Clone, Default)]
pub struct WorkerReport {
    pub participant: u32,
    pub frames: u64,
    pub state_hash: [u8; 32],
    /// RADIANCE_BUFFER message size per frame.
    pub upstream_bytes: Vec<usize>,
    pub render_spans: Vec<Span>,
    pub send_spans: Vec<Span>,
    /// Why the master ended the session.
    pub shutdown_reason: String,
}

enum Outbound {
    Frame { buffer: RadianceBuffer, render_ms: f64, scene_update_ms: f64 },
    Refuse(String),
}

/// Connects, completes the handshake and runs until the master shuts the session down.
pub fn run_worker(config: WorkerConfig) -> anyhow::Result<WorkerReport> {
    let _main = config.registry.register("worker-main");
    let stream = net::connect_retry(&config.connect, config.connect_timeout)?;
    let (mut reader, mut writer) = net::split(stream)?;
    let (wire, assignment, mut scene) = handshake(&mut reader, &mut writer, config.scene_dir.as_deref())?;
    let participant = wire.participant;
    log::info!("worker joined as participant {participant} of {}", wire.participants);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.unwrap_or(0))
        .thread_name(|i| format!("worker-pool-{i}"))
        .build()?;
    let start = Instant::now();
    let (mut tx, rx) = ring_queue::<Packet<Outbound>>(config.queue_capacity);
    let sender = config.registry.spawn("worker-net", move || send_loop(participant, writer, rx, start))?;

    let mut render_spans = Vec::new();
    let mut pending_update_ms = 0.0;
    let outcome = (|| -> anyhow::Result<String> {
        loop {
            let msg = match reader.recv() {
                Ok(m) => m,
                Err(e) if net::is_disconnect(&e) => bail!("master connection lost"),
                Err(e) => return Err(e),
            };
            match msg {
                Message::SceneUpdate { update, .. } => {
                    let t = Instant::now();
                    if let Err(e) = scene.apply_update(&update) {
                        let reason = format!("scene update for frame {} rejected: {e}", update.frame_time);
                        push(&mut tx, Outbound::Refuse(reason.clone()))?;
                        bail!(reason);
                    }
                    pending_update_ms += t.elapsed().as_secs_f64() * 1000.0;
                }
                Message::CameraEvent(e) => {
                    if e.frame_id != scene.frame_time() {
                        let reason = format!("camera event for frame {} but scene is at {}", e.frame_id, scene.frame_time());
                        push(&mut tx, Outbound::Refuse(reason.clone()))?;
                        bail!(reason);
                    }
                    let camera = e.camera();
                    let t0 = start.elapsed().as_secs_f64() * 1000.0;
                    let out = pool.install(|| assignment.render_share(participant, &scene, &camera, wire.max_depth));
                    let t1 = start.elapsed().as_secs_f64() * 1000.0;
                    render_spans.push((t0, t1));
                    let item = Outbound::Frame { buffer: out.buffer, render_ms: t1 - t0, scene_update_ms: pending_update_ms };
                    pending_update_ms = 0.0;
                    push(&mut tx, item)?;
                }
                Message::Shutdown { reason } => return Ok(reason),
                other => bail!("unexpected {} from master", other.name()),
            }
        }
    })();
    let _ = tx.push_blocking(Packet::Stop, Some(Duration::from_secs(5)));
    drop(tx);
    let sent = sender.join().map_err(|_| anyhow::anyhow!("worker network thread panicked"))?;
    let shutdown_reason = outcome?;
    let (upstream_bytes, send_spans) = sent?;
    Ok(WorkerReport {
        participant,
        frames: render_spans.len() as u64,
        state_hash: scene.state_hash(),
        upstream_bytes,
        render_spans,
        send_spans,
        shutdown_reason,
    })
}

fn push(tx: &mut clusterpt_core::Producer<Packet<Outbound>>, item: Outbound) -> anyhow::Result<()> {
    match tx.push_blocking(Packet::Frame(item), None) {
        Ok(()) => Ok(()),
        Err(PushError::Disconnected(_)) => bail!("worker network thread stopped"),
        Err(PushError::Timeout(_)) => unreachable!("unbounded wait"),
    }
}

/// Worker side of the handshake: HELLO out, HELLO + CONFIG in, then HELLO as an
/// acknowledgement once the scene is loaded, or SHUTDOWN with the reason it could not be.
pub fn handshake(
    reader: &mut MsgReader,
    writer: &mut MsgWriter,
    scene_dir: Option<&std::path::Path>,
) -> anyhow::Result<(Config, WorkAssignment, Scene)> {
    writer.send(&net::hello(Role::Worker, 0))?;
    net::expect_hello(reader, writer, Role::Master)?;
    let config = match reader.recv()? {
        Message::Config(c) => c,
        Message::Shutdown { reason } => bail!("master refused: {reason}"),
        other => bail!("expected CONFIG, got {}", other.name()),
    };
    let refuse = |writer: &mut MsgWriter, reason: String| -> anyhow::Error {
        let _ = writer.send(&Message::Shutdown { reason: reason.clone() });
        anyhow::anyhow!(reason)
    };
    let assignment = match plan(
        config.strategy,
        config.participants,
        config.dims(),
        config.per_node_spp,
        PlanOptions { tile_size: config.tile_size, seed: config.seed },
    ) {
        Ok(a) => a,
        Err(e) => return Err(refuse(writer, format!("cannot plan the assignment: {e}"))),
    };
    if config.participant == 0 || config.participant >= config.participants {
        return Err(refuse(writer, format!("participant {} out of range", config.participant)));
    }
    let layout = assignment.stride.map_or((0, 0), |l| (l.w_n, l.h_n));
    if layout != config.layout {
        return Err(refuse(writer, format!("stride layout {:?} disagrees with {:?}", config.layout, layout)));
    }
    let scene = match load_named_scene(&config.scene, scene_dir) {
        Ok(s) => s,
        Err(e) => return Err(refuse(writer, format!("unknown scene {:?}: {e}", config.scene))),
    };
    writer.send(&net::hello(Role::Worker, config.participant))?;
    Ok((config, assignment, scene))
}

type SendLog = (Vec<usize>, Vec<Span>);

fn send_loop(
    participant: u32,
    mut writer: MsgWriter,
    mut rx: Consumer<Packet<Outbound>>,
    start: Instant,
) -> anyhow::Result<SendLog> {
    let mut bytes = Vec::new();
    let mut spans = Vec::new();
    loop {
        let item = match rx.pop_blocking(None) {
            Ok(Packet::Frame(item)) => item,
            Ok(Packet::Stop) | Err(_) => break,
        };
        match item {
            Outbound::Frame { buffer, render_ms, scene_update_ms } => {
                let t0 = start.elapsed().as_secs_f64() * 1000.0;
                let frame_id = buffer.frame_id;
                let n = writer.send(&Message::RadianceBuffer { participant, buffer })?;
                writer.send(&Message::Stats(Stats {
                    frame_id,
                    fields: vec![("render_ms".into(), render_ms), ("scene_update_ms".into(), scene_update_ms)],
                }))?;
                spans.push((t0, start.elapsed().as_secs_f64() * 1000.0));
                bytes.push(n);
            }
            Outbound::Refuse(reason) => {
                let _ = writer.send(&Message::Shutdown { reason });
            }
        }
    }
    Ok((bytes, spans))
}
