//! Point-to-point message passing between ranks.
//!
//! Messages between a fixed pair of ranks arrive in the order they were sent.
//! Payloads are vectors of 64-bit words; floating-point data travels as raw
//! bit patterns so nothing is lost in transit.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// Payload kind carried in every frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Tag {
    Gradient = 0,
    BnStats = 1,
    Control = 2,
}

impl Tag {
    fn from_byte(b: u8) -> Option<Tag> {
        match b {
            0 => Some(Tag::Gradient),
            1 => Some(Tag::BnStats),
            2 => Some(Tag::Control),
            _ => None,
        }
    }
}

pub trait Transport: Send {
    fn rank(&self) -> usize;
    fn size(&self) -> usize;
    fn send(&mut self, to: usize, tag: Tag, payload: &[u64]) -> Result<()>;
    /// Blocks until a message from `from` arrives or `timeout` elapses.
    fn recv(&mut self, from: usize, tag: Tag, timeout: Duration) -> Result<Vec<u64>>;
}

fn check_peer(rank: usize, size: usize, peer: usize) -> Result<()> {
    if peer >= size || peer == rank {
        return Err(Error::Transport {
            rank,
            detail: format!("invalid peer {peer} in a group of {size}"),
        });
    }
    Ok(())
}

fn tag_mismatch(rank: usize, from: usize, want: Tag, got: Tag) -> Error {
    Error::Transport {
        rank,
        detail: format!("expected {want:?} message from rank {from}, got {got:?}"),
    }
}

// ---- in-process -------------------------------------------------------------

type Message = (Tag, Vec<u64>);

/// Channel-backed endpoint for workers that share one process.
pub struct InProcTransport {
    rank: usize,
    size: usize,
    senders: Vec<Option<Sender<Message>>>,
    receivers: Vec<Option<Receiver<Message>>>,
}

/// One connected endpoint per rank, in rank order.
pub fn inproc_group(size: usize) -> Vec<InProcTransport> {
    let mut senders: Vec<Vec<Option<Sender<_>>>> = (0..size).map(|_| vec![None; size]).collect();
    let mut receivers: Vec<Vec<Option<Receiver<_>>>> =
        (0..size).map(|_| (0..size).map(|_| None).collect()).collect();
    for from in 0..size {
        for to in 0..size {
            if from != to {
                let (tx, rx) = mpsc::channel();
                senders[from][to] = Some(tx);
                receivers[to][from] = Some(rx);
            }
        }
    }
    senders
        .into_iter()
        .zip(receivers)
        .enumerate()
        .map(|(rank, (senders, receivers))| InProcTransport {
            rank,
            size,
            senders,
            receivers,
        })
        .collect()
}

impl Transport for InProcTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.size
    }

    fn send(&mut self, to: usize, tag: Tag, payload: &[u64]) -> Result<()> {
        check_peer(self.rank, self.size, to)?;
        let tx = self.senders[to].as_ref().expect("peer channel");
        tx.send((tag, payload.to_vec())).map_err(|_| Error::Transport {
            rank: self.rank,
            detail: format!("rank {to} has shut down"),
        })
    }

    fn recv(&mut self, from: usize, tag: Tag, timeout: Duration) -> Result<Vec<u64>> {
        check_peer(self.rank, self.size, from)?;
        let rx = self.receivers[from].as_ref().expect("peer channel");
        match rx.recv_timeout(timeout) {
            Ok((got, payload)) if got == tag => Ok(payload),
            Ok((got, _)) => Err(tag_mismatch(self.rank, from, tag, got)),
            Err(RecvTimeoutError::Timeout) => Err(Error::Timeout {
                rank: self.rank,
                waiting_on: from,
            }),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Transport {
                rank: self.rank,
                detail: format!("rank {from} has shut down"),
            }),
        }
    }
}

// ---- sockets ----------------------------------------------------------------

/// Frame layout: 4-byte little-endian payload length in bytes, 1 tag byte,
/// then the payload as little-endian 64-bit words.
pub fn encode_frame(tag: Tag, payload: &[u64]) -> Result<Vec<u8>> {
    let bytes = payload.len() * 8;
    let len = u32::try_from(bytes)
        .map_err(|_| Error::InvalidArgument(format!("message of {bytes} bytes exceeds the frame limit")))?;
    let mut out = Vec::with_capacity(5 + bytes);
    out.extend_from_slice(&len.to_le_bytes());
    out.push(tag as u8);
    for w in payload {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(out)
}

fn read_frame(stream: &mut impl Read) -> io::Result<(u8, Vec<u64>)> {
    let mut head = [0u8; 5];
    stream.read_exact(&mut head)?;
    let len = u32::from_le_bytes([head[0], head[1], head[2], head[3]]) as usize;
    if !len.is_multiple_of(8) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame length {len} is not a whole number of words"),
        ));
    }
    let mut body = vec![0u8; len];
    stream.read_exact(&mut body)?;
    let words = body
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((head[4], words))
}

/// Decodes one frame from a byte buffer.
pub fn decode_frame(bytes: &[u8]) -> Result<(Tag, Vec<u64>)> {
    let mut cursor = bytes;
    let (tag, words) = read_frame(&mut cursor).map_err(|e| Error::Format(e.to_string()))?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after frame", cursor.len())));
    }
    let tag = Tag::from_byte(tag).ok_or_else(|| Error::Format(format!("unknown tag {tag}")))?;
    Ok((tag, words))
}

/// TCP endpoint: one stream per peer, rank `i` dials every lower rank and
/// accepts connections from every higher rank.
pub struct TcpTransport {
    rank: usize,
    size: usize,
    streams: Vec<Option<TcpStream>>,
}

impl TcpTransport {
    /// Binds `addrs[rank]` and connects to all peers.
    pub fn connect(rank: usize, addrs: &[SocketAddr], timeout: Duration) -> Result<Self> {
        let addr = *addrs.get(rank).ok_or_else(|| {
            Error::Config(format!("rank {rank} has no entry in an address list of {}", addrs.len()))
        })?;
        let listener = TcpListener::bind(addr).map_err(|e| Error::Transport {
            rank,
            detail: format!("cannot listen on {addr}: {e}"),
        })?;
        Self::with_listener(rank, listener, addrs, timeout)
    }

    /// Like [`TcpTransport::connect`] with an already bound listener.
    pub fn with_listener(
        rank: usize,
        listener: TcpListener,
        addrs: &[SocketAddr],
        timeout: Duration,
    ) -> Result<Self> {
        let size = addrs.len();
        if rank >= size {
            return Err(Error::Config(format!("rank {rank} out of range for {size} addresses")));
        }
        let io_err = |detail: String| Error::Transport { rank, detail };
        let deadline = Instant::now() + timeout;
        let mut streams: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();

        for (peer, addr) in addrs.iter().enumerate().take(rank) {
            let mut stream = loop {
                match TcpStream::connect_timeout(addr, Duration::from_millis(500)) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() >= deadline => {
                        return Err(io_err(format!("cannot reach rank {peer} at {addr}: {e}")));
                    }
                    Err(_) => std::thread::sleep(Duration::from_millis(20)),
                }
            };
            stream.set_nodelay(true).map_err(|e| io_err(e.to_string()))?;
            let hello = encode_frame(Tag::Control, &[rank as u64, size as u64])?;
            stream.write_all(&hello).map_err(|e| io_err(e.to_string()))?;
            streams[peer] = Some(stream);
        }

        listener.set_nonblocking(true).map_err(|e| io_err(e.to_string()))?;
        let mut pending = size - rank - 1;
        while pending > 0 {
            match listener.accept() {
                Ok((mut stream, _)) => {
                    stream.set_nonblocking(false).map_err(|e| io_err(e.to_string()))?;
                    stream.set_nodelay(true).map_err(|e| io_err(e.to_string()))?;
                    let left = deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1));
                    stream.set_read_timeout(Some(left)).map_err(|e| io_err(e.to_string()))?;
                    let (tag, hello) = read_frame(&mut stream).map_err(|e| io_err(format!("handshake: {e}")))?;
                    let peer = match (Tag::from_byte(tag), hello.as_slice()) {
                        (Some(Tag::Control), &[peer, n]) if n as usize == size => peer as usize,
                        _ => return Err(io_err("malformed handshake".into())),
                    };
                    if peer <= rank || peer >= size || streams[peer].is_some() {
                        return Err(io_err(format!("unexpected handshake from rank {peer}")));
                    }
                    streams[peer] = Some(stream);
                    pending -= 1;
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        let missing: Vec<usize> =
                            (rank + 1..size).filter(|&p| streams[p].is_none()).collect();
                        return Err(io_err(format!("ranks {missing:?} never connected")));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(io_err(e.to_string())),
            }
        }
        Ok(Self { rank, size, streams })
    }

    fn stream(&mut self, peer: usize) -> Result<&mut TcpStream> {
        check_peer(self.rank, self.size, peer)?;
        Ok(self.streams[peer].as_mut().expect("connected peer"))
    }
}

impl Transport for TcpTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.size
    }

    fn send(&mut self, to: usize, tag: Tag, payload: &[u64]) -> Result<()> {
        let rank = self.rank;
        let frame = encode_frame(tag, payload)?;
        self.stream(to)?.write_all(&frame).map_err(|e| Error::Transport {
            rank,
            detail: format!("send to rank {to}: {e}"),
        })
    }

    fn recv(&mut self, from: usize, tag: Tag, timeout: Duration) -> Result<Vec<u64>> {
        let rank = self.rank;
        let stream = self.stream(from)?;
        stream
            .set_read_timeout(Some(timeout.max(Duration::from_millis(1))))
            .map_err(|e| Error::Transport {
                rank,
                detail: e.to_string(),
            })?;
        match read_frame(stream) {
            Ok((got, payload)) => match Tag::from_byte(got) {
                Some(t) if t == tag => Ok(payload),
                Some(t) => Err(tag_mismatch(rank, from, tag, t)),
                None => Err(Error::Transport {
                    rank,
                    detail: format!("unknown tag {got} from rank {from}"),
                }),
            },
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                Err(Error::Timeout {
                    rank,
                    waiting_on: from,
                })
            }
            Err(e) => Err(Error::Transport {
                rank,
                detail: format!("receive from rank {from}: {e}"),
            }),
        }
    }
}
