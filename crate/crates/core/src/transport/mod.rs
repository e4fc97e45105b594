//! Message layer for coordination rounds.
//!
//! Every frame is little-endian:
//!
//! ```text
//! u32  total frame length (including this prefix)
//! [4]  magic "CRSX"
//! u8   kind (HELLO=0, REPORT=1, TARGET=2, DONE=3, ERROR=4)
//! u32  round
//! u16  client id length, then UTF-8 bytes
//! u32  payload count, then that many f64
//! u16  error text length, then UTF-8 bytes
//! ```
//!
//! Only REPORT (client to server, `G_m x_m`) and TARGET (server to client,
//! `h_m`) carry a `d`-vector; HELLO carries the single value `d`. No message
//! kind has room for per-sample gradients or raw data.

mod channel;
mod session;

pub use channel::{Channel, MemoryChannel, TcpChannel, DEFAULT_TIMEOUT};
pub use session::{
    connect_client, run_client, run_coordination_over, serve_coordination, serve_listener, ChannelClients,
    TransportKind,
};

use std::io::Read;

use crate::error::{Error, Result};

pub const FRAME_MAGIC: &[u8; 4] = b"CRSX";

/// Fixed part of a frame: prefix, magic, kind, round and the three length fields.
pub const FRAME_OVERHEAD: usize = 4 + 4 + 1 + 4 + 2 + 4 + 2;

/// Upper bound accepted when reading a frame from a stream.
pub const MAX_FRAME_LEN: usize = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageKind {
    Hello = 0,
    Report = 1,
    Target = 2,
    Done = 3,
    Error = 4,
}

impl MessageKind {
    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => MessageKind::Hello,
            1 => MessageKind::Report,
            2 => MessageKind::Target,
            3 => MessageKind::Done,
            4 => MessageKind::Error,
            t => return Err(Error::Framing(format!("unknown message kind {t}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordMessage {
    pub kind: MessageKind,
    pub round: u32,
    pub client_id: String,
    pub payload: Vec<f64>,
    pub error_text: Option<String>,
}

impl CoordMessage {
    /// Announces a client and its gradient dimension.
    pub fn hello(client_id: &str, dim: usize) -> Self {
        CoordMessage::with_payload(MessageKind::Hello, 0, client_id, vec![dim as f64])
    }

    pub fn report(round: u32, client_id: &str, payload: Vec<f64>) -> Self {
        CoordMessage::with_payload(MessageKind::Report, round, client_id, payload)
    }

    pub fn target(round: u32, client_id: &str, payload: Vec<f64>) -> Self {
        CoordMessage::with_payload(MessageKind::Target, round, client_id, payload)
    }

    pub fn done(round: u32, client_id: &str) -> Self {
        CoordMessage::with_payload(MessageKind::Done, round, client_id, Vec::new())
    }

    pub fn error(round: u32, client_id: &str, text: impl Into<String>) -> Self {
        CoordMessage {
            kind: MessageKind::Error,
            round,
            client_id: client_id.to_owned(),
            payload: Vec::new(),
            error_text: Some(text.into()),
        }
    }

    fn with_payload(kind: MessageKind, round: u32, client_id: &str, payload: Vec<f64>) -> Self {
        CoordMessage { kind, round, client_id: client_id.to_owned(), payload, error_text: None }
    }

    /// Dimension declared by a HELLO.
    pub fn declared_dim(&self) -> Result<usize> {
        match (self.kind, self.payload.as_slice()) {
            (MessageKind::Hello, [d]) if *d >= 1.0 && d.fract() == 0.0 && *d <= u32::MAX as f64 => Ok(*d as usize),
            _ => Err(Error::Protocol("HELLO must declare a positive integer dimension".into())),
        }
    }

    /// Encoded size in bytes.
    pub fn frame_len(&self) -> usize {
        FRAME_OVERHEAD
            + self.client_id.len()
            + 8 * self.payload.len()
            + self.error_text.as_ref().map_or(0, |t| t.len())
    }
}

pub fn encode(msg: &CoordMessage) -> Result<Vec<u8>> {
    let id_len = u16::try_from(msg.client_id.len()).map_err(|_| Error::Framing("client id too long".into()))?;
    let count = u32::try_from(msg.payload.len()).map_err(|_| Error::Framing("payload too large for u32 framing".into()))?;
    let err = msg.error_text.as_deref().unwrap_or("");
    let err_len = u16::try_from(err.len()).map_err(|_| Error::Framing("error text too long".into()))?;
    let total = u32::try_from(msg.frame_len()).map_err(|_| Error::Framing("payload too large for u32 framing".into()))?;

    let mut out = Vec::with_capacity(total as usize);
    out.extend_from_slice(&total.to_le_bytes());
    out.extend_from_slice(FRAME_MAGIC);
    out.push(msg.kind as u8);
    out.extend_from_slice(&msg.round.to_le_bytes());
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(msg.client_id.as_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for v in &msg.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&err_len.to_le_bytes());
    out.extend_from_slice(err.as_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<CoordMessage> {
    let mut r = Reader { buf: bytes };
    let total = r.u32()? as usize;
    if total != bytes.len() {
        return Err(Error::Framing(format!("length prefix {total} but frame has {} bytes", bytes.len())));
    }
    if r.take(4)? != FRAME_MAGIC {
        return Err(Error::Framing("bad magic".into()));
    }
    let kind = MessageKind::from_tag(r.take(1)?[0])?;
    let round = r.u32()?;
    let id_len = r.u16()? as usize;
    let client_id = r.string(id_len)?;
    let count = r.u32()? as usize;
    let payload_bytes = count.checked_mul(8).ok_or_else(|| Error::Framing("payload size overflow".into()))?;
    let raw = r.take(payload_bytes)?;
    let payload = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let err_len = r.u16()? as usize;
    let err = r.string(err_len)?;
    if !r.buf.is_empty() {
        return Err(Error::Framing(format!("{} trailing bytes", r.buf.len())));
    }
    let error_text = match kind {
        MessageKind::Error => Some(err),
        _ if err.is_empty() => None,
        _ => return Err(Error::Framing("error text on a non-ERROR frame".into())),
    };
    Ok(CoordMessage { kind, round, client_id, payload, error_text })
}

/// Reads one complete frame from a byte stream.
pub fn read_frame(reader: &mut impl Read) -> std::io::Result<Vec<u8>> {
    let mut prefix = [0u8; 4];
    reader.read_exact(&mut prefix)?;
    let total = u32::from_le_bytes(prefix) as usize;
    if !(FRAME_OVERHEAD..=MAX_FRAME_LEN).contains(&total) {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("bad frame length {total}")));
    }
    let mut frame = vec![0u8; total];
    frame[..4].copy_from_slice(&prefix);
    reader.read_exact(&mut frame[4..])?;
    Ok(frame)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Framing("truncated frame".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|e| Error::Framing(format!("invalid UTF-8: {e}")))
    }
}
