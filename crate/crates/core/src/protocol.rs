//! Binary wire protocol shared by client, master and workers.
//!
//! Every message is one frame: the magic `CPT1`, a one-byte message tag, the payload
//! length as `u32` little-endian, then the payload. Integers are fixed-width little
//! endian, radiance is `f32`, timings are `f64`, strings are a `u32` byte length
//! followed by UTF-8.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::buffer::RadianceBuffer;
use crate::camera::{Camera, Dims};
use crate::distribution::Strategy;
use crate::math::Vec3;
use crate::scene::{MeshDelta, SceneUpdate, VertexRange};

pub const MAGIC: [u8; 4] = *b"CPT1";
pub const HEADER_LEN: usize = 9;
pub const MAX_PAYLOAD: usize = 256 << 20;
pub const PROTOCOL_VERSION: u16 = 1;

pub const TAG_HELLO: u8 = 1;
pub const TAG_CONFIG: u8 = 2;
pub const TAG_CAMERA_EVENT: u8 = 3;
pub const TAG_SCENE_UPDATE: u8 = 4;
pub const TAG_RADIANCE_BUFFER: u8 = 5;
pub const TAG_FRAME_IMAGE: u8 = 6;
pub const TAG_STATS: u8 = 7;
pub const TAG_SHUTDOWN: u8 = 8;

/// Bytes of a RADIANCE_BUFFER payload before the pixel data.
pub const RADIANCE_HEADER_LEN: usize = 8 + 4 + 4 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Client = 0,
    Master = 1,
    Worker = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Encoding {
    RawRgb8 = 0,
    Png = 1,
    Jpeg = 2,
    /// Per-pixel mean radiance as `f32` RGB; a debugging aid for quality metrics.
    RadianceF32 = 3,
}

impl std::str::FromStr for Encoding {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" | "raw-rgb8" => Ok(Encoding::RawRgb8),
            "png" => Ok(Encoding::Png),
            "jpeg" | "jpg" => Ok(Encoding::Jpeg),
            "radiance" | "radiance-f32" => Ok(Encoding::RadianceF32),
            _ => Err(format!("unknown encoding {s:?} (expected raw-rgb8, png, jpeg or radiance-f32)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hello {
    pub role: Role,
    pub node_id: u32,
    pub version: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub width: u32,
    pub height: u32,
    pub strategy: Strategy,
    /// Stride layout `(w_n, h_n)`; `(0, 0)` for other strategies.
    pub layout: (u32, u32),
    pub tile_size: (u32, u32),
    pub per_node_spp: u32,
    pub participant: u32,
    pub participants: u32,
    pub max_depth: u32,
    pub seed: u64,
    pub scene: String,
}

impl Config {
    pub fn dims(&self) -> Dims {
        Dims::new(self.width, self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraEvent {
    pub frame_id: u64,
    pub position: [f32; 3],
    pub look_at: [f32; 3],
    pub up: [f32; 3],
    /// Vertical field of view, degrees.
    pub fov: f32,
}

impl CameraEvent {
    pub fn from_camera(frame_id: u64, c: &Camera) -> CameraEvent {
        CameraEvent {
            frame_id,
            position: c.position.into(),
            look_at: c.look_at.into(),
            up: c.up.into(),
            fov: c.vertical_fov,
        }
    }

    pub fn camera(&self) -> Camera {
        Camera::new(self.position.into(), self.look_at.into(), self.up.into(), self.fov)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    pub frame_id: u64,
    pub encoding: Encoding,
    pub width: u32,
    pub height: u32,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stats {
    pub frame_id: u64,
    /// Named timings in milliseconds.
    pub fields: Vec<(String, f64)>,
}

impl Stats {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.fields.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    Config(Config),
    CameraEvent(CameraEvent),
    SceneUpdate { frame_id: u64, update: SceneUpdate },
    RadianceBuffer { participant: u32, buffer: RadianceBuffer },
    FrameImage(FrameImage),
    Stats(Stats),
    Shutdown { reason: String },
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Hello(_) => TAG_HELLO,
            Message::Config(_) => TAG_CONFIG,
            Message::CameraEvent(_) => TAG_CAMERA_EVENT,
            Message::SceneUpdate { .. } => TAG_SCENE_UPDATE,
            Message::RadianceBuffer { .. } => TAG_RADIANCE_BUFFER,
            Message::FrameImage(_) => TAG_FRAME_IMAGE,
            Message::Stats(_) => TAG_STATS,
            Message::Shutdown { .. } => TAG_SHUTDOWN,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello(_) => "HELLO",
            Message::Config(_) => "CONFIG",
            Message::CameraEvent(_) => "CAMERA_EVENT",
            Message::SceneUpdate { .. } => "SCENE_UPDATE",
            Message::RadianceBuffer { .. } => "RADIANCE_BUFFER",
            Message::FrameImage(_) => "FRAME_IMAGE",
            Message::Stats(_) => "STATS",
            Message::Shutdown { .. } => "SHUTDOWN",
        }
    }

    /// Frame this message belongs to, for messages that carry one.
    pub fn frame_id(&self) -> Option<u64> {
        match self {
            Message::CameraEvent(e) => Some(e.frame_id),
            Message::SceneUpdate { frame_id, .. } => Some(*frame_id),
            Message::RadianceBuffer { buffer, .. } => Some(buffer.frame_id),
            Message::FrameImage(f) => Some(f.frame_id),
            Message::Stats(s) => Some(s.frame_id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    Oversize(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("incomplete frame: {needed} bytes needed, {available} available")]
    Incomplete { needed: usize, available: usize },
    #[error("declared payload of {0} bytes exceeds the limit")]
    Oversize(u32),
    #[error("payload length {declared} does not match its contents ({consumed} bytes)")]
    LengthMismatch { declared: usize, consumed: usize },
    #[error("malformed payload: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

struct Out(Vec<u8>);

impl Out {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn v3(&mut self, v: [f32; 3]) {
        v.into_iter().for_each(|x| self.f32(x));
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).unwrap_or(u32::MAX));
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn camera(&mut self, c: &Camera) {
        self.v3(c.position.into());
        self.v3(c.look_at.into());
        self.v3(c.up.into());
        self.f32(c.vertical_fov);
    }
}

fn strategy_code(s: Strategy) -> u8 {
    match s {
        Strategy::Tile => 0,
        Strategy::Sample => 1,
        Strategy::Stride => 2,
    }
}

fn write_payload(msg: &Message, o: &mut Out) {
    match msg {
        Message::Hello(h) => {
            o.u8(h.role as u8);
            o.u32(h.node_id);
            o.u16(h.version);
        }
        Message::Config(c) => {
            o.u32(c.width);
            o.u32(c.height);
            o.u8(strategy_code(c.strategy));
            o.u32(c.layout.0);
            o.u32(c.layout.1);
            o.u32(c.tile_size.0);
            o.u32(c.tile_size.1);
            o.u32(c.per_node_spp);
            o.u32(c.participant);
            o.u32(c.participants);
            o.u32(c.max_depth);
            o.u64(c.seed);
            o.str(&c.scene);
        }
        Message::CameraEvent(e) => {
            o.u64(e.frame_id);
            o.v3(e.position);
            o.v3(e.look_at);
            o.v3(e.up);
            o.f32(e.fov);
        }
        Message::SceneUpdate { frame_id, update } => {
            o.u64(*frame_id);
            o.u64(update.frame_time);
            o.len(update.meshes.len());
            for m in &update.meshes {
                o.u32(m.mesh);
                o.len(m.ranges.len());
                for r in &m.ranges {
                    o.u32(r.start);
                    o.len(r.positions.len());
                    for p in &r.positions {
                        o.v3((*p).into());
                    }
                }
            }
            match &update.camera {
                Some(c) => {
                    o.u8(1);
                    o.camera(c);
                }
                None => o.u8(0),
            }
        }
        Message::RadianceBuffer { participant, buffer } => {
            o.u64(buffer.frame_id);
            o.u32(*participant);
            o.u32(buffer.dims.width);
            o.u32(buffer.dims.height);
            o.u32(buffer.spp);
            o.0.reserve(buffer.rgb.len() * 12);
            for px in &buffer.rgb {
                o.v3(*px);
            }
        }
        Message::FrameImage(f) => {
            o.u64(f.frame_id);
            o.u8(f.encoding as u8);
            o.u32(f.width);
            o.u32(f.height);
            o.len(f.bytes.len());
            o.0.extend_from_slice(&f.bytes);
        }
        Message::Stats(s) => {
            o.u64(s.frame_id);
            o.len(s.fields.len());
            for (name, v) in &s.fields {
                o.str(name);
                o.f64(*v);
            }
        }
        Message::Shutdown { reason } => o.str(reason),
    }
}

/// Serializes `msg` as one complete frame.
pub fn encode(msg: &Message) -> Result<Vec<u8>, EncodeError> {
    let mut o = Out(Vec::with_capacity(64));
    o.0.extend_from_slice(&MAGIC);
    o.u8(msg.tag());
    o.u32(0);
    write_payload(msg, &mut o);
    let len = o.0.len() - HEADER_LEN;
    if len > MAX_PAYLOAD {
        return Err(EncodeError::Oversize(len));
    }
    o.0[5..9].copy_from_slice(&(len as u32).to_le_bytes());
    Ok(o.0)
}

struct In<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> In<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < n {
            return Err(DecodeError::LengthMismatch { declared: self.buf.len(), consumed: self.pos + n });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f32, DecodeError> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn v3(&mut self) -> Result<[f32; 3], DecodeError> {
        Ok([self.f32()?, self.f32()?, self.f32()?])
    }
    /// A count of elements at least `elem` bytes each, checked against what remains.
    fn count(&mut self, elem: usize) -> Result<usize, DecodeError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(DecodeError::LengthMismatch { declared: self.buf.len(), consumed: self.pos + n * elem });
        }
        Ok(n)
    }
    fn str(&mut self) -> Result<String, DecodeError> {
        let n = self.count(1)?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| DecodeError::Malformed("string is not UTF-8".into()))
    }
    fn camera(&mut self) -> Result<Camera, DecodeError> {
        Ok(Camera::new(self.v3()?.into(), self.v3()?.into(), self.v3()?.into(), self.f32()?))
    }
}

fn read_payload(tag: u8, payload: &[u8]) -> Result<Message, DecodeError> {
    let mut i = In { buf: payload, pos: 0 };
    let msg = match tag {
        TAG_HELLO => {
            let role = match i.u8()? {
                0 => Role::Client,
                1 => Role::Master,
                2 => Role::Worker,
                r => return Err(DecodeError::Malformed(format!("unknown role {r}"))),
            };
            Message::Hello(Hello { role, node_id: i.u32()?, version: i.u16()? })
        }
        TAG_CONFIG => {
            let width = i.u32()?;
            let height = i.u32()?;
            let strategy = match i.u8()? {
                0 => Strategy::Tile,
                1 => Strategy::Sample,
                2 => Strategy::Stride,
                s => return Err(DecodeError::Malformed(format!("unknown strategy {s}"))),
            };
            Message::Config(Config {
                width,
                height,
                strategy,
                layout: (i.u32()?, i.u32()?),
                tile_size: (i.u32()?, i.u32()?),
                per_node_spp: i.u32()?,
                participant: i.u32()?,
                participants: i.u32()?,
                max_depth: i.u32()?,
                seed: i.u64()?,
                scene: i.str()?,
            })
        }
        TAG_CAMERA_EVENT => Message::CameraEvent(CameraEvent {
            frame_id: i.u64()?,
            position: i.v3()?,
            look_at: i.v3()?,
            up: i.v3()?,
            fov: i.f32()?,
        }),
        TAG_SCENE_UPDATE => {
            let frame_id = i.u64()?;
            let frame_time = i.u64()?;
            let n_meshes = i.count(8)?;
            let mut meshes = Vec::with_capacity(n_meshes);
            for _ in 0..n_meshes {
                let mesh = i.u32()?;
                let n_ranges = i.count(8)?;
                let mut ranges = Vec::with_capacity(n_ranges);
                for _ in 0..n_ranges {
                    let start = i.u32()?;
                    let n = i.count(12)?;
                    let positions = (0..n).map(|_| i.v3().map(Vec3::from)).collect::<Result<_, _>>()?;
                    ranges.push(VertexRange { start, positions });
                }
                meshes.push(MeshDelta { mesh, ranges });
            }
            let camera = match i.u8()? {
                0 => None,
                1 => Some(i.camera()?),
                f => return Err(DecodeError::Malformed(format!("bad camera flag {f}"))),
            };
            Message::SceneUpdate { frame_id, update: SceneUpdate { frame_time, meshes, camera } }
        }
        TAG_RADIANCE_BUFFER => {
            let frame_id = i.u64()?;
            let participant = i.u32()?;
            let dims = Dims::new(i.u32()?, i.u32()?);
            let spp = i.u32()?;
            let expected = (dims.width as u64 * dims.height as u64).saturating_mul(12);
            let remaining = (payload.len() - i.pos) as u64;
            if expected != remaining {
                return Err(DecodeError::LengthMismatch {
                    declared: payload.len(),
                    consumed: (i.pos as u64).saturating_add(expected).min(usize::MAX as u64) as usize,
                });
            }
            let rgb = i.buf[i.pos..]
                .chunks_exact(12)
                .map(|c| {
                    let f = |k: usize| f32::from_le_bytes(c[k..k + 4].try_into().unwrap());
                    [f(0), f(4), f(8)]
                })
                .collect();
            i.pos = payload.len();
            let buffer = RadianceBuffer::from_sums(dims, spp, frame_id, rgb)
                .map_err(|e| DecodeError::Malformed(e.to_string()))?;
            Message::RadianceBuffer { participant, buffer }
        }
        TAG_FRAME_IMAGE => {
            let frame_id = i.u64()?;
            let encoding = match i.u8()? {
                0 => Encoding::RawRgb8,
                1 => Encoding::Png,
                2 => Encoding::Jpeg,
                3 => Encoding::RadianceF32,
                e => return Err(DecodeError::Malformed(format!("unknown image encoding {e}"))),
            };
            let width = i.u32()?;
            let height = i.u32()?;
            let n = i.count(1)?;
            let bytes = i.take(n)?.to_vec();
            Message::FrameImage(FrameImage { frame_id, encoding, width, height, bytes })
        }
        TAG_STATS => {
            let frame_id = i.u64()?;
            let n = i.count(12)?;
            let fields = (0..n).map(|_| Ok((i.str()?, i.f64()?))).collect::<Result<_, DecodeError>>()?;
            Message::Stats(Stats { frame_id, fields })
        }
        TAG_SHUTDOWN => Message::Shutdown { reason: i.str()? },
        t => return Err(DecodeError::UnknownTag(t)),
    };
    if i.pos != payload.len() {
        return Err(DecodeError::LengthMismatch { declared: payload.len(), consumed: i.pos });
    }
    Ok(msg)
}

/// Validates a frame header and returns `(tag, payload_len)`.
pub fn decode_header(h: &[u8; HEADER_LEN]) -> Result<(u8, usize), DecodeError> {
    let magic: [u8; 4] = h[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    let tag = h[4];
    if !(TAG_HELLO..=TAG_SHUTDOWN).contains(&tag) {
        return Err(DecodeError::UnknownTag(tag));
    }
    let len = u32::from_le_bytes(h[5..9].try_into().unwrap());
    if len as usize > MAX_PAYLOAD {
        return Err(DecodeError::Oversize(len));
    }
    Ok((tag, len as usize))
}

/// Decodes the first frame in `buf`, returning it and the number of bytes it spans.
/// `Incomplete` means the frame is valid so far and more bytes are needed.
pub fn decode(buf: &[u8]) -> Result<(Message, usize), DecodeError> {
    if buf.len() < HEADER_LEN {
        if buf.len() >= 4 && buf[..4] != MAGIC {
            return Err(DecodeError::BadMagic(buf[..4].try_into().unwrap()));
        }
        return Err(DecodeError::Incomplete { needed: HEADER_LEN, available: buf.len() });
    }
    let (tag, len) = decode_header(buf[..HEADER_LEN].try_into().unwrap())?;
    let total = HEADER_LEN + len;
    if buf.len() < total {
        return Err(DecodeError::Incomplete { needed: total, available: buf.len() });
    }
    Ok((read_payload(tag, &buf[HEADER_LEN..total])?, total))
}

/// Decodes a buffer holding exactly one frame.
pub fn decode_exact(buf: &[u8]) -> Result<Message, DecodeError> {
    let (msg, used) = decode(buf)?;
    if used != buf.len() {
        return Err(DecodeError::LengthMismatch { declared: used - HEADER_LEN, consumed: buf.len() - HEADER_LEN });
    }
    Ok(msg)
}

/// Blocking read of one frame. End of stream before a header is `UnexpectedEof`.
pub fn read_message(r: &mut impl Read) -> Result<Message, ProtocolError> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    let (tag, len) = decode_header(&header)?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(read_payload(tag, &payload)?)
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<usize, ProtocolError> {
    let bytes = encode(msg)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}
