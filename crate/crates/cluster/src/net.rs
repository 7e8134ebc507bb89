//! Framed message connections over TCP.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use clusterpt_core::protocol::{self, Hello, Message, ProtocolError, Role, PROTOCOL_VERSION};

/// Reading half of a connection. Enforces strictly increasing frame ids per
/// message type.
pub struct MsgReader {
    inner: BufReader<TcpStream>,
    last: HashMap<u8, u64>,
}

/// Writing half of a connection.
pub struct MsgWriter {
    inner: BufWriter<TcpStream>,
    pub bytes_sent: u64,
}

pub fn split(stream: TcpStream) -> std::io::Result<(MsgReader, MsgWriter)> {
    stream.set_nodelay(true)?;
    let w = stream.try_clone()?;
    Ok((
        MsgReader { inner: BufReader::with_capacity(1 << 16, stream), last: HashMap::new() },
        MsgWriter { inner: BufWriter::with_capacity(1 << 16, w), bytes_sent: 0 },
    ))
}

impl MsgReader {
    pub fn recv(&mut self) -> anyhow::Result<Message> {
        let msg = protocol::read_message(&mut self.inner)?;
        if let Some(id) = msg.frame_id() {
            if let Some(prev) = self.last.insert(msg.tag(), id) {
                if id <= prev {
                    bail!("{} frame id {id} does not follow {prev}", msg.name());
                }
            }
        }
        Ok(msg)
    }

    pub fn stream(&self) -> &TcpStream {
        self.inner.get_ref()
    }
}

impl MsgWriter {
    /// Sends one message and returns its size on the wire.
    pub fn send(&mut self, msg: &Message) -> Result<usize, ProtocolError> {
        let n = protocol::write_message(&mut self.inner, msg)?;
        self.bytes_sent += n as u64;
        Ok(n)
    }

    /// Sends an already encoded frame.
    pub fn send_raw(&mut self, frame: &[u8]) -> std::io::Result<()> {
        use std::io::Write;
        self.inner.write_all(frame)?;
        self.inner.flush()?;
        self.bytes_sent += frame.len() as u64;
        Ok(())
    }

    pub fn stream(&self) -> &TcpStream {
        self.inner.get_ref()
    }
}

/// True for errors that mean the peer closed the connection.
pub fn is_disconnect(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        let io = c
            .downcast_ref::<std::io::Error>()
            .or_else(|| match c.downcast_ref::<ProtocolError>() {
                Some(ProtocolError::Io(e)) => Some(e),
                _ => None,
            });
        io.is_some_and(|e| {
            matches!(
                e.kind(),
                std::io::ErrorKind::UnexpectedEof
                    | std::io::ErrorKind::ConnectionReset
                    | std::io::ErrorKind::ConnectionAborted
                    | std::io::ErrorKind::BrokenPipe
                    | std::io::ErrorKind::NotConnected
            )
        })
    })
}

/// Dials `addr`, retrying until `timeout` elapses.
pub fn connect_retry(addr: &str, timeout: Duration) -> anyhow::Result<TcpStream> {
    let deadline = Instant::now() + timeout;
    let addrs: Vec<_> = addr.to_socket_addrs().with_context(|| format!("resolve {addr}"))?.collect();
    loop {
        let mut last = None;
        for a in &addrs {
            match TcpStream::connect(a) {
                Ok(s) => return Ok(s),
                Err(e) => last = Some(e),
            }
        }
        if Instant::now() >= deadline {
            return Err(last.map(anyhow::Error::from).unwrap_or_else(|| anyhow::anyhow!("no address")))
                .with_context(|| format!("connect to {addr}"));
        }
        std::thread::sleep(Duration::from_millis(50));
    }
}

pub fn hello(role: Role, node_id: u32) -> Message {
    Message::Hello(Hello { role, node_id, version: PROTOCOL_VERSION })
}

/// Receives the peer's HELLO and checks role and version. On a version mismatch a
/// SHUTDOWN naming the versions is sent before failing.
pub fn expect_hello(r: &mut MsgReader, w: &mut MsgWriter, role: Role) -> anyhow::Result<Hello> {
    match r.recv()? {
        Message::Hello(h) if h.version != PROTOCOL_VERSION => {
            let reason = format!("version mismatch: peer speaks {}, we speak {PROTOCOL_VERSION}", h.version);
            let _ = w.send(&Message::Shutdown { reason: reason.clone() });
            bail!(reason)
        }
        Message::Hello(h) if h.role != role => bail!("expected a {role:?} HELLO, got {:?}", h.role),
        Message::Hello(h) => Ok(h),
        Message::Shutdown { reason } => bail!("peer shut down during handshake: {reason}"),
        other => bail!("expected HELLO, got {}", other.name()),
    }
}
