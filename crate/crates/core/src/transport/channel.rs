use std::io::{self, Write};
use std::net::TcpStream;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::{decode, encode, read_frame, CoordMessage};
use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// A duplex, in-order message channel to one peer.
pub trait Channel: Send {
    fn send(&mut self, msg: &CoordMessage) -> Result<()>;

    /// Blocks until a message arrives or the receive timeout elapses.
    fn recv(&mut self) -> Result<CoordMessage>;

    fn set_timeout(&mut self, timeout: Duration) -> Result<()>;
}

/// In-process channel carrying encoded frames over std mpsc queues.
pub struct MemoryChannel {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Duration,
}

impl MemoryChannel {
    /// Two connected endpoints.
    pub fn pair() -> (MemoryChannel, MemoryChannel) {
        let (tx_a, rx_b) = mpsc::channel();
        let (tx_b, rx_a) = mpsc::channel();
        (
            MemoryChannel { tx: tx_a, rx: rx_a, timeout: DEFAULT_TIMEOUT },
            MemoryChannel { tx: tx_b, rx: rx_b, timeout: DEFAULT_TIMEOUT },
        )
    }
}

impl Channel for MemoryChannel {
    fn send(&mut self, msg: &CoordMessage) -> Result<()> {
        self.tx
            .send(encode(msg)?)
            .map_err(|_| Error::Io(io::Error::new(io::ErrorKind::BrokenPipe, "peer hung up")))
    }

    fn recv(&mut self) -> Result<CoordMessage> {
        match self.rx.recv_timeout(self.timeout) {
            Ok(frame) => decode(&frame),
            Err(RecvTimeoutError::Timeout) => Err(Error::Timeout(format!("message after {:?}", self.timeout))),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Timeout("message: peer disconnected".into())),
        }
    }

    fn set_timeout(&mut self, timeout: Duration) -> Result<()> {
        self.timeout = timeout;
        Ok(())
    }
}

/// One TCP connection; frames are length-prefixed.
pub struct TcpChannel {
    stream: TcpStream,
}

impl TcpChannel {
    pub fn new(stream: TcpStream, timeout: Duration) -> Result<Self> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        Ok(TcpChannel { stream })
    }

    pub fn connect(addr: &str, timeout: Duration) -> Result<Self> {
        TcpChannel::new(TcpStream::connect(addr)?, timeout)
    }
}

impl Channel for TcpChannel {
    fn send(&mut self, msg: &CoordMessage) -> Result<()> {
        self.stream.write_all(&encode(msg)?)?;
        Ok(())
    }

    fn recv(&mut self) -> Result<CoordMessage> {
        match read_frame(&mut self.stream) {
            Ok(frame) => decode(&frame),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                Err(Error::Timeout("message from peer".into()))
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::UnexpectedEof | io::ErrorKind::ConnectionReset) => {
                Err(Error::Timeout("message: peer disconnected".into()))
            }
            Err(e) if e.kind() == io::ErrorKind::InvalidData => Err(Error::Framing(e.to_string())),
            Err(e) => Err(e.into()),
        }
    }

    fn set_timeout(&mut self, timeout: Duration) -> Result<()> {
        self.stream.set_read_timeout(Some(timeout))?;
        Ok(())
    }
}
