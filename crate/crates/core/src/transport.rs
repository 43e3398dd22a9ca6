//! Framing and delivery of envelopes between clients and the hub.
//!
//! The hub reads envelope headers (round, sender, length) and forwards
//! bytes. It has no key and never looks past the header.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread::{self, JoinHandle};

use thiserror::Error;

use crate::secenv::{Envelope, Header, FRAME_OVERHEAD, HEADER_LEN, MAGIC, VERSION};

/// Largest payload a frame may declare.
pub const MAX_PAYLOAD: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("bad frame magic")]
    BadMagic,
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("frame declares {0} payload bytes, above the limit")]
    TooLarge(usize),
    #[error("frame from client {client} is for round {got}, hub is in round {expected}")]
    RoundMismatch { client: u32, got: u64, expected: u64 },
    #[error("second frame from client {client} in round {round}")]
    Duplicate { client: u32, round: u64 },
    #[error("client id {client} out of range for {n} clients")]
    UnknownClient { client: u32, n: usize },
    #[error("peer disconnected mid-run")]
    Disconnected,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn frame_encode(env: &Envelope) -> Vec<u8> {
    env.to_bytes()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    /// One frame of `consumed` bytes is at the start of the buffer.
    Frame { envelope: Envelope, consumed: usize },
    NeedMore,
}

/// Total length of the frame starting at `buf`, once enough of the header
/// is present to tell.
pub fn frame_len(buf: &[u8]) -> Result<Option<usize>, TransportError> {
    let magic_len = buf.len().min(4);
    if buf[..magic_len] != MAGIC[..magic_len] {
        return Err(TransportError::BadMagic);
    }
    if buf.len() > 4 && buf[4] != VERSION {
        return Err(TransportError::BadVersion(buf[4]));
    }
    if buf.len() < HEADER_LEN {
        return Ok(None);
    }
    let len = u32::from_le_bytes(buf[17..21].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(TransportError::TooLarge(len));
    }
    Ok(Some(FRAME_OVERHEAD + len))
}

/// Decodes the first frame in `buf`. Trailing bytes are left alone.
pub fn frame_decode(buf: &[u8]) -> Result<Decoded, TransportError> {
    match frame_len(buf)? {
        Some(total) if buf.len() >= total => {
            let envelope =
                Envelope::from_bytes(&buf[..total]).map_err(|_| TransportError::BadMagic)?;
            Ok(Decoded::Frame {
                envelope,
                consumed: total,
            })
        }
        _ => Ok(Decoded::NeedMore),
    }
}

/// Accumulates a byte stream and yields whole frames.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
}

impl FrameReader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame as raw bytes, if any.
    pub fn next_frame(&mut self) -> Result<Option<Vec<u8>>, TransportError> {
        if self.buf.is_empty() {
            return Ok(None);
        }
        match frame_len(&self.buf)? {
            Some(total) if self.buf.len() >= total => {
                let rest = self.buf.split_off(total);
                Ok(Some(std::mem::replace(&mut self.buf, rest)))
            }
            _ => Ok(None),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Forward each frame the moment it arrives.
    Eager,
    /// Hold frames until all clients have sent for the round.
    Barrier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HubCounters {
    pub frames_in: u64,
    pub bytes_in: u64,
    pub frames_out: u64,
    pub bytes_out: u64,
}

/// Round bookkeeping for the hub. Pure state: no sockets.
#[derive(Debug)]
pub struct Hub {
    n: usize,
    mode: ForwardMode,
    round: u64,
    seen: Vec<bool>,
    held: Vec<Vec<u8>>,
    counters: HubCounters,
}

impl Hub {
    pub fn new(n: usize, mode: ForwardMode) -> Self {
        Self {
            n,
            mode,
            round: 0,
            seen: vec![false; n],
            held: Vec::new(),
            counters: HubCounters::default(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn counters(&self) -> HubCounters {
        self.counters
    }

    /// Accepts one inbound frame and returns the frames to fan out now.
    pub fn on_frame(&mut self, frame: Vec<u8>) -> Result<Vec<Vec<u8>>, TransportError> {
        let total = frame_len(&frame)?.ok_or(TransportError::BadMagic)?;
        if total != frame.len() {
            return Err(TransportError::BadMagic);
        }
        let h = Header::from_bytes(&frame).map_err(|_| TransportError::BadMagic)?;
        if h.client as usize >= self.n {
            return Err(TransportError::UnknownClient {
                client: h.client,
                n: self.n,
            });
        }
        if h.round != self.round {
            return Err(TransportError::RoundMismatch {
                client: h.client,
                got: h.round,
                expected: self.round,
            });
        }
        if std::mem::replace(&mut self.seen[h.client as usize], true) {
            return Err(TransportError::Duplicate {
                client: h.client,
                round: h.round,
            });
        }
        self.counters.frames_in += 1;
        self.counters.bytes_in += frame.len() as u64;
        let done = self.seen.iter().all(|&s| s);
        let out = match self.mode {
            ForwardMode::Eager => vec![frame],
            ForwardMode::Barrier => {
                self.held.push(frame);
                if done {
                    std::mem::take(&mut self.held)
                } else {
                    Vec::new()
                }
            }
        };
        for f in &out {
            self.counters.frames_out += self.n as u64;
            self.counters.bytes_out += (f.len() * self.n) as u64;
        }
        if done {
            self.round += 1;
            self.seen.iter_mut().for_each(|s| *s = false);
        }
        Ok(out)
    }
}

/// Inbound traffic as seen by the hub's event loop.
#[derive(Debug)]
pub enum HubEvent {
    Frame(Vec<u8>),
    Closed,
    Failed(String),
}

/// Where the hub writes a client's downlink.
pub trait FrameSink: Send {
    fn send_frame(&mut self, frame: &[u8]) -> Result<(), TransportError>;
}

/// A client's view of the network.
pub trait ClientLink {
    fn send_frame(&mut self, frame: &[u8]) -> Result<(), TransportError>;
    fn recv_frame(&mut self) -> Result<Vec<u8>, TransportError>;
}

/// Services `rounds` full rounds, then returns the counters.
pub fn serve(
    mut hub: Hub,
    rounds: u64,
    events: Receiver<HubEvent>,
    mut sinks: Vec<Box<dyn FrameSink>>,
) -> Result<HubCounters, TransportError> {
    while hub.round() < rounds {
        let frame = match events.recv() {
            Ok(HubEvent::Frame(f)) => f,
            Ok(HubEvent::Failed(e)) => return Err(TransportError::Io(io::Error::other(e))),
            Ok(HubEvent::Closed) | Err(_) => return Err(TransportError::Disconnected),
        };
        for out in hub.on_frame(frame)? {
            for s in sinks.iter_mut() {
                s.send_frame(&out)?;
            }
        }
    }
    Ok(hub.counters())
}

struct ChannelSink(Sender<Vec<u8>>);

impl FrameSink for ChannelSink {
    fn send_frame(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.0
            .send(frame.to_vec())
            .map_err(|_| TransportError::Disconnected)
    }
}

/// In-process client link backed by channels.
#[derive(Debug)]
pub struct LoopbackLink {
    up: Sender<HubEvent>,
    down: Receiver<Vec<u8>>,
}

impl ClientLink for LoopbackLink {
    fn send_frame(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.up
            .send(HubEvent::Frame(frame.to_vec()))
            .map_err(|_| TransportError::Disconnected)
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>, TransportError> {
        self.down.recv().map_err(|_| TransportError::Disconnected)
    }
}

/// Starts a hub thread serving `rounds` rounds and returns one link per
/// client.
pub fn loopback(
    n: usize,
    mode: ForwardMode,
    rounds: u64,
) -> (JoinHandle<Result<HubCounters, TransportError>>, Vec<LoopbackLink>) {
    let (up_tx, up_rx) = mpsc::channel();
    let mut sinks: Vec<Box<dyn FrameSink>> = Vec::with_capacity(n);
    let mut links = Vec::with_capacity(n);
    for _ in 0..n {
        let (tx, rx) = mpsc::channel();
        sinks.push(Box::new(ChannelSink(tx)));
        links.push(LoopbackLink {
            up: up_tx.clone(),
            down: rx,
        });
    }
    drop(up_tx);
    let handle = thread::spawn(move || serve(Hub::new(n, mode), rounds, up_rx, sinks));
    (handle, links)
}

fn read_frames(mut stream: TcpStream, tx: Sender<HubEvent>) {
    let mut reader = FrameReader::new();
    let mut chunk = vec![0u8; 64 * 1024];
    loop {
        match stream.read(&mut chunk) {
            Ok(0) => {
                let _ = tx.send(HubEvent::Closed);
                return;
            }
            Ok(k) => {
                reader.push(&chunk[..k]);
                loop {
                    match reader.next_frame() {
                        Ok(Some(f)) => {
                            if tx.send(HubEvent::Frame(f)).is_err() {
                                return;
                            }
                        }
                        Ok(None) => break,
                        Err(e) => {
                            let _ = tx.send(HubEvent::Failed(e.to_string()));
                            return;
                        }
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => {
                let _ = tx.send(HubEvent::Failed(e.to_string()));
                return;
            }
        }
    }
}

struct TcpSink(TcpStream);

impl FrameSink for TcpSink {
    fn send_frame(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.0.write_all(frame)?;
        Ok(())
    }
}

/// Accepts `n` client connections on `listener`, then serves `rounds`
/// rounds. One reader thread per connection feeds a single event queue.
pub fn serve_tcp(
    listener: TcpListener,
    n: usize,
    mode: ForwardMode,
    rounds: u64,
) -> Result<HubCounters, TransportError> {
    let (tx, rx) = mpsc::channel();
    let mut sinks: Vec<Box<dyn FrameSink>> = Vec::with_capacity(n);
    for _ in 0..n {
        let (stream, _) = listener.accept()?;
        stream.set_nodelay(true)?;
        let read_half = stream.try_clone()?;
        let tx = tx.clone();
        thread::spawn(move || read_frames(read_half, tx));
        sinks.push(Box::new(TcpSink(stream)));
    }
    drop(tx);
    serve(Hub::new(n, mode), rounds, rx, sinks)
}

/// Client end of a TCP connection to the hub.
#[derive(Debug)]
pub struct TcpLink {
    stream: TcpStream,
    reader: FrameReader,
    pending: VecDeque<Vec<u8>>,
}

impl TcpLink {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self, TransportError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            stream,
            reader: FrameReader::new(),
            pending: VecDeque::new(),
        })
    }
}

impl ClientLink for TcpLink {
    fn send_frame(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.stream.write_all(frame)?;
        Ok(())
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>, TransportError> {
        let mut chunk = vec![0u8; 64 * 1024];
        loop {
            if let Some(f) = self.pending.pop_front() {
                return Ok(f);
            }
            while let Some(f) = self.reader.next_frame()? {
                self.pending.push_back(f);
            }
            if !self.pending.is_empty() {
                continue;
            }
            let k = self.stream.read(&mut chunk)?;
            if k == 0 {
                return Err(TransportError::Disconnected);
            }
            self.reader.push(&chunk[..k]);
        }
    }
}
