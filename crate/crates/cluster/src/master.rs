//! The master: accepts workers and one client, forwards events, renders participant
//! 0's share, merges, post-processes and streams frames.
//!
//! Principal threads: the main thread (events, forwarding, local render), one network
//! thread per worker (receives radiance buffers) and one post-processing thread.

use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context};
use clusterpt_core::distribution::{plan, PlanOptions, Strategy, WorkAssignment, DEFAULT_TILE_SIZE};
use clusterpt_core::pipeline::{Packet, PopError, PushError};
use clusterpt_core::protocol::{self, CameraEvent, Config, Encoding, FrameImage, Message, Role};
use clusterpt_core::render::DEFAULT_MAX_DEPTH;
use clusterpt_core::scene_file::load_named_scene;
use clusterpt_core::{ring_queue, tone_map, Camera, Consumer, Dims, Producer, RadianceBuffer, Scene};

use crate::net::{self, MsgReader, MsgWriter};
use crate::postprocess;
use crate::stats::{mean, write_stats, FpsWindow, FrameStats};
use crate::threads::ThreadRegistry;
use crate::ws::{self, WsPoll, WsReader, WsWriter};

/// Polling slice for blocking waits that must notice a cluster failure.
const POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Clone)]
pub struct MasterConfig {
    /// Client TCP listen address.
    pub listen: Option<String>,
    /// Viewer WebSocket listen address.
    pub ws_listen: Option<String>,
    /// One listen address per worker; worker `i` connecting to `workers[i]` becomes
    /// participant `i + 1`.
    pub workers: Vec<String>,
    pub strategy: Strategy,
    pub dims: Dims,
    /// Samples per pixel rendered by each participant.
    pub spp: u32,
    pub max_depth: u32,
    pub scene: String,
    pub scene_dir: Option<PathBuf>,
    pub encoding: Encoding,
    pub denoise: bool,
    pub stats_out: Option<PathBuf>,
    /// `None` runs until the client leaves.
    pub frames: Option<u64>,
    pub tile_size: (u32, u32),
    pub seed: u64,
    /// Render pool size; `None` uses every core.
    pub threads: Option<usize>,
    pub queue_capacity: usize,
    /// Lower bound on the frame abort timeout.
    pub abort_floor: Duration,
    pub registry: ThreadRegistry,
}

impl Default for MasterConfig {
    fn default() -> Self {
        MasterConfig {
            listen: Some("127.0.0.1:7878".into()),
            ws_listen: None,
            workers: Vec::new(),
            strategy: Strategy::Stride,
            dims: Dims::new(160, 90),
            spp: 8,
            max_depth: DEFAULT_MAX_DEPTH,
            scene: "gloss".into(),
            scene_dir: None,
            encoding: Encoding::Png,
            denoise: false,
            stats_out: None,
            frames: None,
            tile_size: DEFAULT_TILE_SIZE,
            seed: 0,
            threads: None,
            queue_capacity: 3,
            abort_floor: Duration::from_secs(30),
            registry: ThreadRegistry::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundAddrs {
    pub client: Option<SocketAddr>,
    pub ws: Option<SocketAddr>,
    pub workers: Vec<SocketAddr>,
}

impl BoundAddrs {
    /// The line the CLI prints once every listener is bound.
    pub fn ready_line(&self) -> String {
        let opt = |a: Option<SocketAddr>| a.map_or("-".to_string(), |a| a.to_string());
        let workers: Vec<String> = self.workers.iter().map(|a| a.to_string()).collect();
        format!(
            "READY client={} ws={} workers={}",
            opt(self.client),
            opt(self.ws),
            if workers.is_empty() { "-".to_string() } else { workers.join(",") }
        )
    }

    pub fn parse_ready_line(line: &str) -> Option<BoundAddrs> {
        let rest = line.trim().strip_prefix("READY ")?;
        let mut out = BoundAddrs { client: None, ws: None, workers: Vec::new() };
        for field in rest.split_whitespace() {
            let (k, v) = field.split_once('=')?;
            let addr = |v: &str| if v == "-" { Ok(None) } else { v.parse().map(Some) };
            match k {
                "client" => out.client = addr(v).ok()?,
                "ws" => out.ws = addr(v).ok()?,
                "workers" if v != "-" => {
                    out.workers = v.split(',').map(str::parse).collect::<Result<_, _>>().ok()?;
                }
                _ => {}
            }
        }
        Some(out)
    }
}

#[derive(Debug, Clone)]
pub struct MasterReport {
    pub frames: u64,
    pub stats: Vec<FrameStats>,
    /// Frames whose encoding failed; their STATS were still sent.
    pub dropped_frames: u64,
    pub state_hash: [u8; 32],
    pub config: Config,
}

pub struct Master {
    config: MasterConfig,
    assignment: WorkAssignment,
    scene: Scene,
    client: Option<TcpListener>,
    ws: Option<TcpListener>,
    workers: Vec<TcpListener>,
}

/// Failure state shared by every master thread. The first failure wins; all sockets are
/// shut down so blocked readers wake.
struct Shared {
    failed: AtomicBool,
    closing: AtomicBool,
    error: Mutex<Option<String>>,
    sockets: Mutex<Vec<TcpStream>>,
}

impl Shared {
    fn new() -> Shared {
        Shared {
            failed: AtomicBool::new(false),
            closing: AtomicBool::new(false),
            error: Mutex::new(None),
            sockets: Mutex::new(Vec::new()),
        }
    }

    fn track(&self, s: &TcpStream) {
        if let Ok(c) = s.try_clone() {
            self.sockets.lock().unwrap().push(c);
        }
    }

    fn fail(&self, msg: String) {
        {
            let mut e = self.error.lock().unwrap();
            if e.is_none() {
                log::error!("{msg}");
                *e = Some(msg);
            }
        }
        self.failed.store(true, Ordering::SeqCst);
        for s in self.sockets.lock().unwrap().iter() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    fn failed(&self) -> bool {
        self.failed.load(Ordering::SeqCst)
    }

    fn closing(&self) -> bool {
        self.closing.load(Ordering::SeqCst)
    }

    fn error(&self) -> Option<String> {
        self.error.lock().unwrap().clone()
    }
}

struct LocalFrame {
    frame_id: u64,
    buffer: RadianceBuffer,
    render_ms: f64,
    scene_update_ms: f64,
    distribution_overhead_ms: f64,
    render_start_ms: f64,
    render_end_ms: f64,
}

struct WorkerFrame {
    buffer: RadianceBuffer,
    render_ms: f64,
}

enum ClientIn {
    Tcp(MsgReader),
    Ws(WsReader),
}

enum ClientOut {
    Tcp(MsgWriter),
    Ws(WsWriter),
}

impl ClientIn {
    /// Camera for `frame`, or `None` once the client is done. A TCP client must send
    /// exactly one event per frame; a viewer free-runs and steers with whatever arrived.
    fn next_camera(&mut self, frame: u64, current: &Camera) -> anyhow::Result<Option<Camera>> {
        match self {
            ClientIn::Tcp(r) => match r.recv() {
                Ok(Message::CameraEvent(e)) if e.frame_id == frame => {
                    let c = e.camera();
                    c.validate().map_err(|err| anyhow!("client camera for frame {frame}: {err}"))?;
                    Ok(Some(c))
                }
                Ok(Message::CameraEvent(e)) => bail!("client sent event for frame {}, expected {frame}", e.frame_id),
                Ok(Message::Shutdown { reason }) => {
                    log::info!("client finished: {reason}");
                    Ok(None)
                }
                Ok(other) => bail!("unexpected {} from client", other.name()),
                Err(e) if net::is_disconnect(&e) => Ok(None),
                Err(e) => Err(e),
            },
            ClientIn::Ws(r) => match r.poll(Duration::from_millis(1))? {
                WsPoll::Open(c) => Ok(Some(c.unwrap_or(*current))),
                WsPoll::Closed => Ok(None),
            },
        }
    }
}

impl ClientOut {
    fn send(&mut self, frame: &FrameImage, stats: &FrameStats) -> anyhow::Result<usize> {
        match self {
            ClientOut::Tcp(w) => {
                let n = w.send(&Message::FrameImage(frame.clone()))?;
                w.send(&Message::Stats(stats.to_message()))?;
                Ok(n)
            }
            ClientOut::Ws(w) => w.send_frame(frame, stats),
        }
    }

    fn send_stats(&mut self, stats: &FrameStats) -> anyhow::Result<()> {
        match self {
            ClientOut::Tcp(w) => {
                w.send(&Message::Stats(stats.to_message()))?;
            }
            ClientOut::Ws(_) => {}
        }
        Ok(())
    }

    fn shutdown(&mut self, reason: &str) {
        match self {
            ClientOut::Tcp(w) => {
                let _ = w.send(&Message::Shutdown { reason: reason.into() });
            }
            ClientOut::Ws(w) => w.close(),
        }
    }

    fn encoding(&self, configured: Encoding) -> Encoding {
        match self {
            ClientOut::Tcp(_) => configured,
            ClientOut::Ws(_) => Encoding::Jpeg,
        }
    }
}

fn bind(addr: &str) -> anyhow::Result<TcpListener> {
    TcpListener::bind(addr).with_context(|| format!("bind {addr}"))
}

impl Master {
    /// Plans the work, loads the scene and binds every listener. Nothing is accepted
    /// until [`Master::run`].
    pub fn bind(config: MasterConfig) -> anyhow::Result<Master> {
        if config.listen.is_none() && config.ws_listen.is_none() {
            bail!("master needs a client listen address or a viewer listen address");
        }
        let assignment = plan(
            config.strategy,
            config.workers.len() as u32 + 1,
            config.dims,
            config.spp,
            PlanOptions { tile_size: config.tile_size, seed: config.seed },
        )?;
        let scene =
            load_named_scene(&config.scene, config.scene_dir.as_deref()).with_context(|| format!("scene {}", config.scene))?;
        let client = config.listen.as_deref().map(bind).transpose()?;
        let ws = config.ws_listen.as_deref().map(bind).transpose()?;
        let workers = config.workers.iter().map(|a| bind(a)).collect::<anyhow::Result<Vec<_>>>()?;
        Ok(Master { config, assignment, scene, client, ws, workers })
    }

    pub fn addrs(&self) -> BoundAddrs {
        BoundAddrs {
            client: self.client.as_ref().and_then(|l| l.local_addr().ok()),
            ws: self.ws.as_ref().and_then(|l| l.local_addr().ok()),
            workers: self.workers.iter().filter_map(|l| l.local_addr().ok()).collect(),
        }
    }

    pub fn run(self) -> anyhow::Result<MasterReport> {
        let _main = self.config.registry.register("master-main");
        let Master { config, assignment, mut scene, client, ws, workers } = self;
        let participants = assignment.participant_count();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads.unwrap_or(0))
            .thread_name(|i| format!("master-pool-{i}"))
            .build()?;
        let wire_config = |participant: u32| Config {
            width: config.dims.width,
            height: config.dims.height,
            strategy: config.strategy,
            layout: assignment.stride.map_or((0, 0), |l| (l.w_n, l.h_n)),
            tile_size: config.tile_size,
            per_node_spp: config.spp,
            participant,
            participants,
            max_depth: config.max_depth,
            seed: config.seed,
            scene: config.scene.clone(),
        };

        let shared = Arc::new(Shared::new());
        let mut links = Vec::with_capacity(workers.len());
        for (i, listener) in workers.iter().enumerate() {
            let participant = i as u32 + 1;
            let (stream, peer) = listener.accept().with_context(|| format!("accept worker {participant}"))?;
            log::info!("worker {participant} connected from {peer}");
            let (mut r, mut w) = net::split(stream)?;
            net::expect_hello(&mut r, &mut w, Role::Worker).with_context(|| format!("worker {participant}"))?;
            w.send(&net::hello(Role::Master, 0))?;
            w.send(&Message::Config(wire_config(participant)))?;
            match r.recv().with_context(|| format!("worker {participant} handshake"))? {
                Message::Hello(_) => {}
                Message::Shutdown { reason } => bail!("worker {participant} refused its configuration: {reason}"),
                other => bail!("worker {participant} sent {} during handshake", other.name()),
            }
            shared.track(r.stream());
            links.push((r, w));
        }
        drop(workers);

        let (mut client_in, mut client_out) = accept_client(client, ws, &wire_config(0), &assignment, scene.camera())?;
        match &client_in {
            ClientIn::Tcp(r) => shared.track(r.stream()),
            ClientIn::Ws(r) => shared.track(r.stream()),
        }
        let encoding = client_out.encoding(config.encoding);

        let start = Instant::now();
        let (local_tx, local_rx) = ring_queue::<Packet<LocalFrame>>(config.queue_capacity);
        let mut worker_rx = Vec::new();
        let mut net_threads = Vec::new();
        let mut worker_tx = Vec::new();
        for (i, (reader, writer)) in links.into_iter().enumerate() {
            let participant = i as u32 + 1;
            let (tx, rx) = ring_queue::<WorkerFrame>(config.queue_capacity);
            worker_rx.push(rx);
            worker_tx.push(writer);
            let shared = shared.clone();
            let dims = assignment.share_dims(participant);
            net_threads.push(
                config
                    .registry
                    .spawn(format!("master-net-{participant}"), move || worker_net(participant, dims, reader, tx, shared))?,
            );
        }

        let post = {
            let shared = shared.clone();
            let assignment = assignment.clone();
            let denoise = config.denoise;
            let floor = config.abort_floor;
            config.registry.spawn("master-post", move || {
                let r = post_loop(local_rx, worker_rx, &assignment, denoise, encoding, floor, start, &shared, &mut client_out);
                if let Err(e) = &r {
                    shared.fail(format!("{e:#}"));
                }
                let reason = shared.error().unwrap_or_else(|| "done".to_string());
                client_out.shutdown(&reason);
                r
            })?
        };

        let main_result = main_loop(
            &config,
            &assignment,
            &mut scene,
            &pool,
            &mut client_in,
            &mut worker_tx,
            local_tx,
            start,
            &shared,
        );
        if let Err(e) = &main_result {
            shared.fail(format!("{e:#}"));
        }
        let post_result = post.join().map_err(|_| anyhow!("post-processing thread panicked"))?;
        if let Err(e) = &post_result {
            shared.fail(format!("{e:#}"));
        }
        shared.closing.store(true, Ordering::SeqCst);
        let reason = shared.error().unwrap_or_else(|| "done".to_string());
        for w in &mut worker_tx {
            let _ = w.send(&Message::Shutdown { reason: reason.clone() });
        }
        for h in net_threads {
            let _ = h.join();
        }
        drop(worker_tx);
        if let Some(e) = shared.error() {
            bail!(e);
        }
        let frames = main_result?;
        let (stats, dropped_frames) = post_result?;
        if let Some(path) = &config.stats_out {
            write_stats(path, &stats).with_context(|| format!("write {}", path.display()))?;
        }
        Ok(MasterReport { frames, stats, dropped_frames, state_hash: scene.state_hash(), config: wire_config(0) })
    }
}

/// Waits for the client on whichever listener gets a connection first and completes
/// its handshake.
fn accept_client(
    tcp: Option<TcpListener>,
    ws: Option<TcpListener>,
    config: &Config,
    assignment: &WorkAssignment,
    camera: &Camera,
) -> anyhow::Result<(ClientIn, ClientOut)> {
    let (stream, is_ws) = match (&tcp, &ws) {
        (Some(t), None) => (t.accept()?.0, false),
        (None, Some(w)) => (w.accept()?.0, true),
        (Some(t), Some(w)) => {
            t.set_nonblocking(true)?;
            w.set_nonblocking(true)?;
            loop {
                match t.accept() {
                    Ok((s, _)) => break (s, false),
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {}
                    Err(e) => return Err(e.into()),
                }
                match w.accept() {
                    Ok((s, _)) => break (s, true),
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {}
                    Err(e) => return Err(e.into()),
                }
                std::thread::sleep(Duration::from_millis(5));
            }
        }
        (None, None) => bail!("no client listener"),
    };
    stream.set_nonblocking(false)?;
    if is_ws {
        let (r, mut w) = ws::accept(stream)?;
        w.send_config(config, assignment.total_spp(), camera)?;
        log::info!("viewer connected");
        return Ok((ClientIn::Ws(r), ClientOut::Ws(w)));
    }
    let (mut r, mut w) = net::split(stream)?;
    net::expect_hello(&mut r, &mut w, Role::Client).context("client")?;
    w.send(&net::hello(Role::Master, 0))?;
    w.send(&Message::Config(config.clone()))?;
    w.send(&Message::CameraEvent(CameraEvent::from_camera(0, camera)))?;
    log::info!("client connected");
    Ok((ClientIn::Tcp(r), ClientOut::Tcp(w)))
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1000.0
}

#[allow(clippy::too_many_arguments)]
fn main_loop(
    config: &MasterConfig,
    assignment: &WorkAssignment,
    scene: &mut Scene,
    pool: &rayon::ThreadPool,
    client: &mut ClientIn,
    workers: &mut [MsgWriter],
    mut local: Producer<Packet<LocalFrame>>,
    start: Instant,
    shared: &Shared,
) -> anyhow::Result<u64> {
    let result = frame_loop(config, assignment, scene, pool, client, workers, &mut local, start, shared);
    let _ = push_until(&mut local, Packet::Stop, shared);
    result
}

#[allow(clippy::too_many_arguments)]
fn frame_loop(
    config: &MasterConfig,
    assignment: &WorkAssignment,
    scene: &mut Scene,
    pool: &rayon::ThreadPool,
    client: &mut ClientIn,
    workers: &mut [MsgWriter],
    local: &mut Producer<Packet<LocalFrame>>,
    start: Instant,
    shared: &Shared,
) -> anyhow::Result<u64> {
    let mut camera = *scene.camera();
    let mut frame = 0u64;
    loop {
        if config.frames.is_some_and(|n| frame >= n) || shared.failed() {
            return Ok(frame);
        }
        let next = match client.next_camera(frame, &camera) {
            Ok(Some(c)) => c,
            Ok(None) => return Ok(frame),
            Err(e) => return Err(e.context(format!("client event for frame {frame}"))),
        };
        camera = next;

        let t_update = Instant::now();
        let update = scene.animation_update(frame);
        let forward_start = Instant::now();
        let update_bytes = protocol::encode(&Message::SceneUpdate { frame_id: frame, update: update.clone() })?;
        let camera_bytes = protocol::encode(&Message::CameraEvent(CameraEvent::from_camera(frame, &camera)))?;
        for (i, w) in workers.iter_mut().enumerate() {
            w.send_raw(&update_bytes)
                .and_then(|_| w.send_raw(&camera_bytes))
                .with_context(|| format!("forward frame {frame} to worker {}", i + 1))?;
        }
        let forward_ms = forward_start.elapsed().as_secs_f64() * 1000.0;
        let generate_ms = (forward_start - t_update).as_secs_f64() * 1000.0;
        let apply_start = Instant::now();
        scene.apply_update(&update).with_context(|| format!("scene update for frame {frame}"))?;
        let scene_update_ms = generate_ms + apply_start.elapsed().as_secs_f64() * 1000.0;

        let render_start_ms = ms_since(start);
        let t_render = Instant::now();
        let out = pool.install(|| assignment.render_share(0, scene, &camera, config.max_depth));
        let render_ms = t_render.elapsed().as_secs_f64() * 1000.0;
        let item = LocalFrame {
            frame_id: frame,
            buffer: out.buffer,
            render_ms,
            scene_update_ms,
            distribution_overhead_ms: forward_ms,
            render_start_ms,
            render_end_ms: ms_since(start),
        };
        if push_until(local, Packet::Frame(item), shared).is_err() {
            return Ok(frame);
        }
        frame += 1;
    }
}

fn is_ws_closed(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<tungstenite::Error>(),
            Some(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed | tungstenite::Error::Io(_))
        )
    })
}

/// Blocking push that gives up when the cluster fails or the consumer is gone.
fn push_until<T: Send>(tx: &mut Producer<T>, mut item: T, shared: &Shared) -> Result<(), T> {
    loop {
        match tx.push_blocking(item, Some(POLL)) {
            Ok(()) => return Ok(()),
            Err(PushError::Timeout(back)) if !shared.failed() => item = back,
            Err(PushError::Timeout(back) | PushError::Disconnected(back)) => return Err(back),
        }
    }
}

/// Blocking pop that gives up on failure or after `deadline`.
fn pop_until<T: Send>(rx: &mut Consumer<T>, deadline: Option<Instant>, shared: &Shared) -> Result<T, PopError> {
    loop {
        let slice = match deadline {
            Some(d) => d.saturating_duration_since(Instant::now()).min(POLL),
            None => POLL,
        };
        match rx.pop_blocking(Some(slice)) {
            Ok(v) => return Ok(v),
            Err(PopError::Timeout) => {
                if shared.failed() || deadline.is_some_and(|d| Instant::now() >= d) {
                    return Err(PopError::Timeout);
                }
            }
            Err(e) => return Err(e),
        }
    }
}

/// Network thread for one worker: reads RADIANCE_BUFFER + STATS pairs and queues them.
fn worker_net(participant: u32, dims: Dims, mut reader: MsgReader, mut tx: Producer<WorkerFrame>, shared: Arc<Shared>) {
    let result = (|| -> anyhow::Result<()> {
        loop {
            let buffer = match reader.recv() {
                Ok(Message::RadianceBuffer { participant: p, buffer }) => {
                    if p != participant {
                        bail!("buffer labelled participant {p}");
                    }
                    if buffer.dims != dims {
                        bail!("buffer is {}x{}, expected {}x{}", buffer.dims.width, buffer.dims.height, dims.width, dims.height);
                    }
                    buffer
                }
                Ok(Message::Shutdown { reason }) => bail!("worker shut down: {reason}"),
                Ok(other) => bail!("unexpected {}", other.name()),
                Err(e) => return Err(e),
            };
            let render_ms = match reader.recv()? {
                Message::Stats(s) if s.frame_id == buffer.frame_id => s.get("render_ms").unwrap_or(0.0),
                Message::Stats(s) => bail!("stats for frame {} after buffer for {}", s.frame_id, buffer.frame_id),
                other => bail!("expected STATS, got {}", other.name()),
            };
            if push_until(&mut tx, WorkerFrame { buffer, render_ms }, &shared).is_err() {
                return Ok(());
            }
        }
    })();
    if let Err(e) = result {
        if !(shared.closing() || shared.failed()) {
            shared.fail(format!("worker {participant}: {e:#}"));
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn post_loop(
    mut local: Consumer<Packet<LocalFrame>>,
    mut workers: Vec<Consumer<WorkerFrame>>,
    assignment: &WorkAssignment,
    denoise: bool,
    encoding: Encoding,
    abort_floor: Duration,
    start: Instant,
    shared: &Shared,
    client: &mut ClientOut,
) -> anyhow::Result<(Vec<FrameStats>, u64)> {
    let mut rows = Vec::new();
    let mut dropped = 0;
    let mut window = FpsWindow::new(30);
    loop {
        let lf = match pop_until(&mut local, None, shared) {
            Ok(Packet::Frame(f)) => f,
            Ok(Packet::Stop) => break,
            Err(_) if shared.failed() => break,
            Err(e) => bail!("local render queue: {e:?}"),
        };
        let timeout = window
            .mean_period_ms()
            .map_or(abort_floor, |p| Duration::from_secs_f64(p * 10.0 / 1000.0).max(abort_floor));
        let deadline = Instant::now() + timeout;
        let mut parts = Vec::with_capacity(workers.len());
        for (i, rx) in workers.iter_mut().enumerate() {
            match pop_until(rx, Some(deadline), shared) {
                Ok(wf) => parts.push(wf),
                Err(_) if shared.failed() => return Ok((rows, dropped)),
                Err(PopError::Timeout) => {
                    bail!("frame {} aborted: worker {} sent no buffer within {:?}", lf.frame_id, i + 1, timeout)
                }
                Err(PopError::Disconnected) => bail!("frame {} aborted: worker {} is gone", lf.frame_id, i + 1),
            }
        }
        for (i, p) in parts.iter().enumerate() {
            if p.buffer.frame_id != lf.frame_id {
                bail!("worker {} delivered frame {} while merging frame {}", i + 1, p.buffer.frame_id, lf.frame_id);
            }
        }

        let post_start_ms = ms_since(start);
        let t = Instant::now();
        let merged = assignment
            .merge(std::iter::once((0, &lf.buffer)).chain(parts.iter().enumerate().map(|(i, p)| (i as u32 + 1, &p.buffer))))
            .with_context(|| format!("merge frame {}", lf.frame_id))?;
        let merge_ms = t.elapsed().as_secs_f64() * 1000.0;
        let t = Instant::now();
        let merged = if denoise { postprocess::denoise(&merged) } else { merged };
        let denoise_ms = if denoise { t.elapsed().as_secs_f64() * 1000.0 } else { 0.0 };
        let t = Instant::now();
        let image = tone_map(&merged);
        let tone_map_ms = t.elapsed().as_secs_f64() * 1000.0;
        let t = Instant::now();
        let encoded = postprocess::encode(&merged, &image, encoding);
        let compression_ms = t.elapsed().as_secs_f64() * 1000.0;

        let worker_render_ms: Vec<f64> = parts.iter().map(|p| p.render_ms).collect();
        let mut row = FrameStats {
            frame_id: lf.frame_id,
            master_render_ms: lf.render_ms,
            worker_render_ms_mean: mean(&worker_render_ms),
            worker_render_ms,
            scene_update_ms: lf.scene_update_ms,
            merge_ms,
            tone_map_ms,
            compression_ms,
            denoise_ms,
            distribution_overhead_ms: lf.distribution_overhead_ms,
            client_fps: window.tick(Instant::now()),
            total_spp: merged.spp,
            encoded_bytes: 0,
            render_start_ms: lf.render_start_ms,
            render_end_ms: lf.render_end_ms,
            post_start_ms,
            post_end_ms: 0.0,
        };
        let sent = match encoded {
            Ok(bytes) => {
                row.encoded_bytes = bytes.len();
                row.post_end_ms = ms_since(start);
                let frame = FrameImage {
                    frame_id: lf.frame_id,
                    encoding,
                    width: merged.dims.width,
                    height: merged.dims.height,
                    bytes,
                };
                client.send(&frame, &row).map(|_| ())
            }
            Err(e) => {
                log::warn!("frame {} dropped: {e:#}", lf.frame_id);
                dropped += 1;
                row.post_end_ms = ms_since(start);
                client.send_stats(&row)
            }
        };
        rows.push(row);
        if let Err(e) = sent {
            if net::is_disconnect(&e) || is_ws_closed(&e) {
                log::info!("client left during frame {}", lf.frame_id);
                break;
            }
            return Err(e.context("send frame to client"));
        }
    }
    Ok((rows, dropped))
}

