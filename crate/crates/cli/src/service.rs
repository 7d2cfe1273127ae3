//! Scanning: one-shot file scans and a TCP service speaking a small
//! length-prefixed protocol.
//!
//! Request: 4-byte big-endian length `N` (at most [`MAX_FRAME`]) then `N`
//! payload bytes. Response: one verdict byte ([`ALLOW`], [`BLOCK`] or
//! [`ERROR`]), the probability as a big-endian `f32` (0 on error), then one
//! status byte. A connection may carry any number of requests.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;

use log::{debug, info, warn};
use vpatch_core::neuralnet::Detector;

pub const MAX_FRAME: u32 = 16 << 20;

pub const ALLOW: u8 = 0x00;
pub const BLOCK: u8 = 0x01;
pub const ERROR: u8 = 0xFF;

pub const STATUS_OK: u8 = 0;
pub const STATUS_TOO_LARGE: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Allow,
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanResult {
    pub verdict: Verdict,
    pub probability: f32,
    pub token_set_version: u64,
}

/// Blocks exactly when the probability reaches the threshold.
pub fn scan_bytes(detector: &Detector, bytes: &[u8], threshold: f64) -> ScanResult {
    let probability = detector.predict(bytes);
    ScanResult {
        verdict: if f64::from(probability) >= threshold {
            Verdict::Block
        } else {
            Verdict::Allow
        },
        probability,
        token_set_version: detector.model().token_set_version,
    }
}

/// A decoded response frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Response {
    pub verdict: u8,
    pub probability: f32,
    pub status: u8,
}

impl Response {
    pub fn encode(&self) -> [u8; 6] {
        let mut out = [0u8; 6];
        out[0] = self.verdict;
        out[1..5].copy_from_slice(&self.probability.to_be_bytes());
        out[5] = self.status;
        out
    }

    pub fn decode(b: [u8; 6]) -> Self {
        Self {
            verdict: b[0],
            probability: f32::from_be_bytes([b[1], b[2], b[3], b[4]]),
            status: b[5],
        }
    }
}

/// Reads a full frame header, or `None` on a clean end of stream.
fn read_len(r: &mut impl Read) -> io::Result<Option<u32>> {
    let mut buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut buf[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => got += n,
        }
    }
    Ok(Some(u32::from_be_bytes(buf)))
}

/// Serves one connection until the peer closes it or sends a bad frame.
pub fn handle_connection(stream: TcpStream, detector: &Detector, threshold: f64) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut payload = Vec::new();
    while let Some(len) = read_len(&mut reader)? {
        if len > MAX_FRAME {
            let resp = Response {
                verdict: ERROR,
                probability: 0.0,
                status: STATUS_TOO_LARGE,
            };
            writer.write_all(&resp.encode())?;
            writer.flush()?;
            let _ = writer.get_ref().shutdown(Shutdown::Both);
            return Ok(());
        }
        payload.resize(len as usize, 0);
        reader.read_exact(&mut payload)?;
        let r = scan_bytes(detector, &payload, threshold);
        let resp = Response {
            verdict: if r.verdict == Verdict::Block { BLOCK } else { ALLOW },
            probability: r.probability,
            status: STATUS_OK,
        };
        writer.write_all(&resp.encode())?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection, all sharing the
/// same detector.
pub fn serve(listener: TcpListener, detector: Arc<Detector>, threshold: f64) -> io::Result<()> {
    info!("serving on {}", listener.local_addr()?);
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let det = Arc::clone(&detector);
        thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            if let Err(e) = handle_connection(stream, &det, threshold) {
                debug!("connection {peer:?} closed: {e}");
            }
        });
    }
    Ok(())
}

/// Blocking client for the service.
pub struct Client {
    stream: TcpStream,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }

    /// Sends a raw length header followed by `payload`; lets tests send
    /// headers that do not match the payload.
    pub fn send_raw(&mut self, len: u32, payload: &[u8]) -> io::Result<Response> {
        let mut frame = Vec::with_capacity(4 + payload.len());
        frame.extend_from_slice(&len.to_be_bytes());
        frame.extend_from_slice(payload);
        self.stream.write_all(&frame)?;
        let mut buf = [0u8; 6];
        self.stream.read_exact(&mut buf)?;
        Ok(Response::decode(buf))
    }

    pub fn scan(&mut self, payload: &[u8]) -> io::Result<Response> {
        let len = u32::try_from(payload.len()).map_err(|_| io::Error::from(io::ErrorKind::InvalidInput))?;
        self.send_raw(len, payload)
    }
}
