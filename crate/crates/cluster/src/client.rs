//! Headless scripted client: drives a camera path, receives frames and measures
//! throughput, latency and image error.
//!
//! Principal threads: the main thread sends events and a receiver thread collects
//! frames. The first two events go out at once; event k + 2 is sent when frame k has
//! arrived, keeping two frames in flight.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use clusterpt_core::pipeline::Packet;
use clusterpt_core::protocol::{CameraEvent, Config, FrameImage, Message, Role, HEADER_LEN};
use clusterpt_core::{ring_queue, Camera, Producer, Vec3};
use serde::{Deserialize, Serialize};

use crate::net::{self, MsgReader};
use crate::postprocess::{self, Decoded};
use crate::stats::FrameStats;
use crate::threads::ThreadRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    Hold,
    LinearOrbit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame_id: u64,
    pub position: [f32; 3],
    pub look_at: [f32; 3],
    pub up: [f32; 3],
    pub fov: f32,
}

impl Keyframe {
    pub fn new(frame_id: u64, c: &Camera) -> Keyframe {
        let e = CameraEvent::from_camera(frame_id, c);
        Keyframe { frame_id, position: e.position, look_at: e.look_at, up: e.up, fov: e.fov }
    }

    pub fn camera(&self) -> Camera {
        Camera::new(self.position.into(), self.look_at.into(), self.up.into(), self.fov)
    }
}

/// Keyframed camera animation. Frames before the first keyframe use the first, frames
/// after the last use the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPath {
    pub mode: Interpolation,
    pub keyframes: Vec<Keyframe>,
}

impl CameraPath {
    pub fn new(mode: Interpolation, keyframes: Vec<Keyframe>) -> anyhow::Result<CameraPath> {
        if keyframes.is_empty() {
            bail!("camera path needs at least one keyframe");
        }
        if keyframes.windows(2).any(|w| w[1].frame_id <= w[0].frame_id) {
            bail!("camera path keyframe ids must be strictly increasing");
        }
        for k in &keyframes {
            k.camera().validate().with_context(|| format!("keyframe {}", k.frame_id))?;
        }
        Ok(CameraPath { mode, keyframes })
    }

    pub fn hold(camera: &Camera) -> CameraPath {
        CameraPath { mode: Interpolation::Hold, keyframes: vec![Keyframe::new(0, camera)] }
    }

    /// Turns `degrees` about the look-at point's vertical axis over `frames` frames.
    pub fn orbit(camera: &Camera, degrees: f32, frames: u64) -> CameraPath {
        let last = frames.saturating_sub(1).max(1);
        // Keyframes at most 90 degrees apart so interpolation never takes the short way round.
        let segments = ((degrees.abs() / 90.0).ceil() as u64).clamp(1, last);
        let keyframes = (0..=segments)
            .map(|s| {
                let id = s * last / segments;
                let angle = degrees * id as f32 / last as f32;
                Keyframe::new(id, &rotate_about_up(camera, angle.to_radians()))
            })
            .collect();
        CameraPath { mode: Interpolation::LinearOrbit, keyframes }
    }

    pub fn load(path: &Path) -> anyhow::Result<CameraPath> {
        let text = std::fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
        let raw: CameraPath = serde_json::from_str(&text).with_context(|| format!("parse {}", path.display()))?;
        CameraPath::new(raw.mode, raw.keyframes)
    }

    pub fn camera_at(&self, frame: u64) -> Camera {
        let ks = &self.keyframes;
        let after = ks.partition_point(|k| k.frame_id <= frame);
        if after == 0 {
            return ks[0].camera();
        }
        let a = &ks[after - 1];
        if after == ks.len() || self.mode == Interpolation::Hold || a.frame_id == frame {
            return a.camera();
        }
        let b = &ks[after];
        let t = (frame - a.frame_id) as f32 / (b.frame_id - a.frame_id) as f32;
        interpolate_orbit(a, b, t)
    }
}

fn rotate_about_up(c: &Camera, angle: f32) -> Camera {
    let up = c.up.normalize();
    let rel = c.position - c.look_at;
    let along = up * rel.dot(up);
    let radial = rel - along;
    let (s, co) = angle.sin_cos();
    let rotated = radial * co + up.cross(radial) * s + along;
    Camera::new(c.look_at + rotated, c.look_at, c.up, c.vertical_fov)
}

/// Orbit coordinates of `position` about `target`: radius, azimuth and elevation in a
/// basis built from `up`.
fn orbit_coords(position: Vec3, target: Vec3, up: Vec3) -> (f32, f32, f32) {
    let up = up.normalize();
    let (e1, e2) = up.basis();
    let rel = position - target;
    let r = rel.length();
    let az = rel.dot(e2).atan2(rel.dot(e1));
    let el = (rel.dot(up) / r).clamp(-1.0, 1.0).asin();
    (r, az, el)
}

fn interpolate_orbit(a: &Keyframe, b: &Keyframe, t: f32) -> Camera {
    let lerp = |x: f32, y: f32| x + (y - x) * t;
    let up: Vec3 = Vec3::from(a.up).normalize();
    let (e1, e2) = up.basis();
    let ta: Vec3 = a.look_at.into();
    let tb: Vec3 = b.look_at.into();
    let target = ta + (tb - ta) * t;
    let (ra, aza, ela) = orbit_coords(a.position.into(), ta, up);
    let (rb, azb, elb) = orbit_coords(b.position.into(), tb, up);
    let mut daz = azb - aza;
    if daz > std::f32::consts::PI {
        daz -= std::f32::consts::TAU;
    } else if daz < -std::f32::consts::PI {
        daz += std::f32::consts::TAU;
    }
    let (r, az, el) = (lerp(ra, rb), aza + daz * t, lerp(ela, elb));
    let dir = (e1 * az.cos() + e2 * az.sin()) * el.cos() + up * el.sin();
    Camera::new(target + dir * r, target, a.up.into(), lerp(a.fov, b.fov))
}

/// Camera path as named on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum PathSpec {
    Static,
    /// Degrees turned over the whole run.
    Orbit(f32),
    File(PathBuf),
    Path(CameraPath),
}

impl std::str::FromStr for PathSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static" | "hold" => Ok(PathSpec::Static),
            "orbit" => Ok(PathSpec::Orbit(360.0)),
            _ => match s.strip_prefix("orbit:") {
                Some(deg) => deg.parse().map(PathSpec::Orbit).map_err(|e| format!("orbit degrees: {e}")),
                None => Ok(PathSpec::File(PathBuf::from(s))),
            },
        }
    }
}

impl PathSpec {
    /// Concrete path for a run of `frames` starting from the master's initial camera.
    pub fn resolve(&self, initial: &Camera, frames: u64) -> anyhow::Result<CameraPath> {
        Ok(match self {
            PathSpec::Static => CameraPath::hold(initial),
            PathSpec::Orbit(deg) => CameraPath::orbit(initial, *deg, frames),
            PathSpec::File(p) => CameraPath::load(p)?,
            PathSpec::Path(p) => p.clone(),
        })
    }
}

/// Root-mean-square difference over every channel of two equally sized images.
pub fn rmse(a: &[[f32; 3]], b: &[[f32; 3]]) -> anyhow::Result<f64> {
    if a.len() != b.len() {
        bail!("image sizes differ: {} vs {} pixels", a.len(), b.len());
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] as f64 - q[c] as f64).powi(2)))
        .sum();
    Ok((sum / (a.len() * 3) as f64).sqrt())
}

pub fn rmse_decoded(image: &Decoded, reference: &Decoded) -> anyhow::Result<f64> {
    if image.dims() != reference.dims() {
        let (a, b) = (image.dims(), reference.dims());
        bail!("image is {}x{}, reference is {}x{}", a.width, a.height, b.width, b.height);
    }
    rmse(&image.to_f32(), &reference.to_f32())
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub connect: String,
    pub frames: u64,
    pub path: PathSpec,
    pub report_out: Option<PathBuf>,
    pub dump_frames: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    /// Keep every received frame in the report.
    pub keep_frames: bool,
    pub connect_timeout: Duration,
    pub registry: ThreadRegistry,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            connect: "127.0.0.1:7878".into(),
            frames: 100,
            path: PathSpec::Static,
            report_out: None,
            dump_frames: None,
            reference: None,
            keep_frames: false,
            connect_timeout: Duration::from_secs(10),
            registry: ThreadRegistry::new(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct FrameRecord {
    pub frame_id: u64,
    /// Milliseconds since the client connected.
    pub sent_ms: f64,
    pub received_ms: f64,
    pub latency_ms: f64,
    /// FRAME_IMAGE message size; zero for a dropped frame.
    pub bytes: usize,
    pub dropped: bool,
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunReport {
    pub width: u32,
    pub height: u32,
    pub strategy: String,
    pub participants: u32,
    pub total_spp: u32,
    pub frames: Vec<FrameRecord>,
    /// Frames per second between the first and last received frame.
    pub fps: f64,
    pub mean_latency_ms: f64,
    /// Error of the last frame against the reference.
    pub rmse: Option<f64>,
    /// Timing rows echoed from the master.
    pub stats: Vec<FrameStats>,
    /// Fewer frames arrived than were requested.
    pub partial: bool,
    pub error: Option<String>,
    #[serde(skip)]
    pub images: Vec<FrameImage>,
}

impl RunReport {
    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = if path.extension().is_some_and(|e| e == "csv") {
            let mut s = String::from("frame_id,sent_ms,received_ms,latency_ms,bytes,dropped,rmse\n");
            for f in &self.frames {
                s += &format!(
                    "{},{:.3},{:.3},{:.3},{},{},{}\n",
                    f.frame_id,
                    f.sent_ms,
                    f.received_ms,
                    f.latency_ms,
                    f.bytes,
                    f.dropped,
                    f.rmse.map_or(String::new(), |r| format!("{r:.6}"))
                );
            }
            s
        } else {
            serde_json::to_string_pretty(self)?
        };
        std::fs::write(path, text).with_context(|| format!("write {}", path.display()))
    }
}

/// Frames-per-second over received timestamps in milliseconds.
pub fn fps_of(received_ms: &[f64]) -> f64 {
    match (received_ms.first(), received_ms.last()) {
        (Some(a), Some(b)) if received_ms.len() > 1 && b > a => (received_ms.len() - 1) as f64 * 1000.0 / (b - a),
        _ => 0.0,
    }
}

enum Notice {
    Completed(u64),
    Ended,
}

struct Received {
    frames: Vec<FrameRecord>,
    stats: Vec<FrameStats>,
    images: Vec<FrameImage>,
    error: Option<String>,
}

pub fn run_client(config: ClientConfig) -> anyhow::Result<RunReport> {
    let _main = config.registry.register("client-main");
    let reference = config.reference.as_deref().map(postprocess::load_reference).transpose()?;
    if let Some(dir) = &config.dump_frames {
        std::fs::create_dir_all(dir).with_context(|| format!("create {}", dir.display()))?;
    }
    let stream = net::connect_retry(&config.connect, config.connect_timeout)?;
    let (mut reader, mut writer) = net::split(stream)?;
    writer.send(&net::hello(Role::Client, 0))?;
    net::expect_hello(&mut reader, &mut writer, Role::Master)?;
    let wire = match reader.recv()? {
        Message::Config(c) => c,
        other => bail!("expected CONFIG, got {}", other.name()),
    };
    let initial = match reader.recv()? {
        Message::CameraEvent(e) => e.camera(),
        other => bail!("expected the initial CAMERA_EVENT, got {}", other.name()),
    };
    let path = config.path.resolve(&initial, config.frames)?;

    let start = Instant::now();
    let (tx, mut rx) = ring_queue::<Packet<Notice>>(4);
    let receiver = {
        let dump = config.dump_frames.clone();
        let keep = config.keep_frames;
        config.registry.spawn("client-recv", move || receive_loop(reader, tx, start, dump, reference, keep))?
    };

    let mut sent_ms = vec![f64::NAN; config.frames as usize];
    let mut send = |k: u64, w: &mut net::MsgWriter| -> anyhow::Result<()> {
        sent_ms[k as usize] = start.elapsed().as_secs_f64() * 1000.0;
        w.send(&Message::CameraEvent(CameraEvent::from_camera(k, &path.camera_at(k))))?;
        Ok(())
    };
    let mut send_error = None;
    for k in 0..config.frames.min(2) {
        if let Err(e) = send(k, &mut writer) {
            send_error = Some(e);
            break;
        }
    }
    let mut completed = 0;
    while send_error.is_none() && completed < config.frames {
        match rx.pop_blocking(None) {
            Ok(Packet::Frame(Notice::Completed(k))) => {
                completed += 1;
                if k + 2 < config.frames {
                    if let Err(e) = send(k + 2, &mut writer) {
                        send_error = Some(e);
                    }
                }
            }
            Ok(Packet::Frame(Notice::Ended) | Packet::Stop) | Err(_) => break,
        }
    }
    let _ = writer.send(&Message::Shutdown { reason: "client done".into() });
    let received = receiver.join().map_err(|_| anyhow::anyhow!("client receiver panicked"))?;
    drop(writer);
    Ok(assemble(&wire, config.frames, &sent_ms, received, send_error, config.report_out.as_deref())?)
}

fn assemble(
    wire: &Config,
    requested: u64,
    sent_ms: &[f64],
    mut rec: Received,
    send_error: Option<anyhow::Error>,
    report_out: Option<&Path>,
) -> anyhow::Result<RunReport> {
    for f in &mut rec.frames {
        f.sent_ms = sent_ms.get(f.frame_id as usize).copied().unwrap_or(f64::NAN);
        f.latency_ms = (f.received_ms - f.sent_ms).max(0.0);
    }
    let shown: Vec<f64> = rec.frames.iter().filter(|f| !f.dropped).map(|f| f.received_ms).collect();
    let latencies: Vec<f64> = rec.frames.iter().filter(|f| !f.dropped).map(|f| f.latency_ms).collect();
    let error = send_error.map(|e| format!("{e:#}")).or(rec.error);
    let report = RunReport {
        width: wire.width,
        height: wire.height,
        strategy: wire.strategy.to_string(),
        participants: wire.participants,
        total_spp: rec.stats.last().map_or(0, |s| s.total_spp),
        fps: fps_of(&shown),
        mean_latency_ms: crate::stats::mean(&latencies),
        rmse: rec.frames.iter().rev().find_map(|f| f.rmse),
        partial: (rec.frames.len() as u64) < requested,
        frames: rec.frames,
        stats: rec.stats,
        error,
        images: rec.images,
    };
    if let Some(p) = report_out {
        report.write(p)?;
    }
    Ok(report)
}

fn receive_loop(
    mut reader: MsgReader,
    mut tx: Producer<Packet<Notice>>,
    start: Instant,
    dump: Option<PathBuf>,
    reference: Option<Decoded>,
    keep: bool,
) -> Received {
    let mut out = Received { frames: Vec::new(), stats: Vec::new(), images: Vec::new(), error: None };
    let result = (|| -> anyhow::Result<()> {
        loop {
            match reader.recv()? {
                Message::FrameImage(f) => {
                    let mut rec = FrameRecord {
                        frame_id: f.frame_id,
                        received_ms: start.elapsed().as_secs_f64() * 1000.0,
                        bytes: HEADER_LEN + frame_payload_len(&f),
                        ..Default::default()
                    };
                    if let Some(r) = &reference {
                        rec.rmse = Some(rmse_decoded(&postprocess::decode_frame(&f)?, r)?);
                    }
                    if let Some(dir) = &dump {
                        let name = format!("frame_{:05}.{}", f.frame_id, postprocess::file_extension(f.encoding));
                        postprocess::save_frame(&f, &dir.join(name))?;
                    }
                    out.frames.push(rec);
                    if keep {
                        out.images.push(f);
                    }
                }
                Message::Stats(s) => {
                    let row = FrameStats::from_message(&s);
                    if out.frames.last().is_none_or(|f| f.frame_id != row.frame_id) {
                        out.frames.push(FrameRecord {
                            frame_id: row.frame_id,
                            received_ms: start.elapsed().as_secs_f64() * 1000.0,
                            dropped: true,
                            ..Default::default()
                        });
                    }
                    out.stats.push(row);
                    if tx.push_blocking(Packet::Frame(Notice::Completed(s.frame_id)), None).is_err() {
                        return Ok(());
                    }
                }
                Message::Shutdown { reason } => {
                    if reason != "done" {
                        log::info!("master ended the session: {reason}");
                    }
                    return Ok(());
                }
                other => bail!("unexpected {} from master", other.name()),
            }
        }
    })();
    if let Err(e) = result {
        if !net::is_disconnect(&e) {
            out.error = Some(format!("{e:#}"));
        } else {
            out.error = Some("connection lost".into());
        }
    }
    let _ = tx.push_blocking(Packet::Frame(Notice::Ended), Some(Duration::from_secs(1)));
    out
}

/// Payload length of a FRAME_IMAGE message: frame id, encoding, width, height, byte
/// count and the bytes.
fn frame_payload_len(f: &FrameImage) -> usize {
    8 + 1 + 4 + 4 + 4 + f.bytes.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera::new(Vec3::new(0.0, 1.0, 5.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 1.0, 0.0), 40.0)
    }

    fn close(a: Vec3, b: Vec3) -> bool {
        (a - b).length() < 1e-4
    }

    #[test]
    fn rmse_of_identical_images_is_zero() {
        let a = vec![[0.2, 0.5, 0.9]; 12];
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn rmse_of_unit_offset_is_one() {
        let a = vec![[0.2, 0.5, 0.9]; 12];
        let b: Vec<[f32; 3]> = a.iter().map(|p| p.map(|c| c + 1.0)).collect();
        assert!((rmse(&a, &b).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rmse_rejects_size_mismatch() {
        assert!(rmse(&[[0.0; 3]; 4], &[[0.0; 3]; 5]).is_err());
        let a = Decoded::Radiance { dims: clusterpt_core::Dims::new(2, 2), rgb: vec![[0.0; 3]; 4] };
        let b = Decoded::Radiance { dims: clusterpt_core::Dims::new(4, 1), rgb: vec![[0.0; 3]; 4] };
        assert!(rmse_decoded(&a, &b).is_err());
    }

    #[test]
    fn fps_counts_intervals_between_frames() {
        assert_eq!(fps_of(&[0.0, 100.0, 200.0]), 10.0);
        assert_eq!(fps_of(&[5.0]), 0.0);
    }

    #[test]
    fn hold_path_repeats_the_keyframe() {
        let p = CameraPath::hold(&cam());
        assert_eq!(p.camera_at(0), cam());
        assert_eq!(p.camera_at(99), cam());
    }

    #[test]
    fn keyframes_must_increase() {
        let k = Keyframe::new(3, &cam());
        assert!(CameraPath::new(Interpolation::Hold, vec![k, k]).is_err());
        assert!(CameraPath::new(Interpolation::Hold, vec![]).is_err());
        assert!(CameraPath::new(Interpolation::Hold, vec![Keyframe::new(0, &cam()), k]).is_ok());
    }

    #[test]
    fn half_orbit_mirrors_position_through_target() {
        let p = CameraPath::orbit(&cam(), 180.0, 11);
        let end = p.camera_at(10);
        assert!(close(end.position, Vec3::new(0.0, 1.0, -5.0)), "{:?}", end.position);
        assert!(close(end.look_at, cam().look_at));
    }

    #[test]
    fn orbit_keeps_radius_and_height() {
        let p = CameraPath::orbit(&cam(), 360.0, 100);
        for f in 0..100 {
            let c = p.camera_at(f);
            let rel = c.position - c.look_at;
            assert!((rel.length() - 5.0).abs() < 1e-3, "frame {f}");
            assert!(rel.y.abs() < 1e-3, "frame {f}");
        }
        assert!(close(p.camera_at(99).position, cam().position));
    }

    #[test]
    fn linear_orbit_interpolates_between_keyframes() {
        let a = Keyframe::new(0, &cam());
        let b = Keyframe::new(10, &Camera::new(Vec3::new(5.0, 1.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 1.0, 0.0), 60.0));
        let p = CameraPath::new(Interpolation::LinearOrbit, vec![a, b]).unwrap();
        let mid = p.camera_at(5);
        let s = 5.0 / 2f32.sqrt();
        assert!(close(mid.position, Vec3::new(s, 1.0, s)), "{:?}", mid.position);
        assert!((mid.vertical_fov - 50.0).abs() < 1e-4);
        let held = CameraPath::new(Interpolation::Hold, vec![a, b]).unwrap();
        assert_eq!(held.camera_at(5), cam());
        assert_eq!(held.camera_at(10), b.camera());
    }

    #[test]
    fn path_file_round_trips() {
        let p = CameraPath::orbit(&cam(), 90.0, 20);
        let path = std::env::temp_dir().join(format!("clusterpt-path-{}.json", std::process::id()));
        std::fs::write(&path, serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(CameraPath::load(&path).unwrap(), p);
        std::fs::remove_file(path).unwrap();
    }
}
