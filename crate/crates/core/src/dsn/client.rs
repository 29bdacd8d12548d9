use std::collections::VecDeque;
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::time::Duration;

use super::frame::{self, Frame, FrameType};
use super::DsnError;

pub const CLOSE_WAIT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Delivery {
    Data { topic: String, body: Vec<u8> },
    /// The node closed the channel.
    Closed,
    /// The connection ended without a CLOSE frame.
    Disconnected,
}

/// Blocking client for gateway-mode channels.
#[derive(Debug)]
pub struct StreamClient {
    channel_id: u32,
    stream: TcpStream,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    pending: VecDeque<Delivery>,
}

impl StreamClient {
    /// Connects and authenticates. Fails with the node's error if the token
    /// is refused.
    pub fn connect(addr: impl ToSocketAddrs, channel_id: u32, token: &str) -> Result<Self, DsnError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut c = StreamClient {
            channel_id,
            reader: BufReader::with_capacity(64 * 1024, stream.try_clone()?),
            writer: BufWriter::with_capacity(64 * 1024, stream.try_clone()?),
            stream,
            pending: VecDeque::new(),
        };
        c.send(Frame::new(FrameType::Auth, channel_id, token.as_bytes().to_vec()))?;
        c.flush()?;
        c.await_ack()?;
        Ok(c)
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> Result<(), DsnError> {
        Ok(self.stream.set_read_timeout(t)?)
    }

    fn send(&mut self, f: Frame) -> Result<(), DsnError> {
        Ok(f.write_to(&mut self.writer)?)
    }

    fn await_ack(&mut self) -> Result<Vec<u8>, DsnError> {
        loop {
            match Frame::read_from(&mut self.reader, frame::MAX_PAYLOAD)? {
                Some(f) if f.kind == FrameType::Ack => return Ok(f.payload),
                Some(f) if f.kind == FrameType::Err => return Err(DsnError::from_wire(&f.payload)),
                Some(f) if f.kind == FrameType::Data => {
                    let (topic, body) = frame::parse_data(&f.payload)?;
                    self.pending.push_back(Delivery::Data { topic: topic.into(), body: body.to_vec() });
                }
                Some(f) if f.kind == FrameType::Close => return Err(DsnError::ChannelClosed),
                Some(f) => return Err(DsnError::MalformedFrame(format!("unexpected {:?}", f.kind))),
                None => return Err(DsnError::ChannelClosed),
            }
        }
    }

    /// Queues a DATA frame; call [`flush`](Self::flush) to push it out.
    pub fn publish(&mut self, topic: &str, body: &[u8]) -> Result<(), DsnError> {
        let header = frame::Header {
            kind: FrameType::Data,
            flags: 0,
            channel_id: self.channel_id,
            payload_len: (2 + topic.len() + body.len()) as u32,
        };
        self.writer.write_all(&header.encode())?;
        self.writer.write_all(&(topic.len() as u16).to_be_bytes())?;
        self.writer.write_all(topic.as_bytes())?;
        self.writer.write_all(body)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), DsnError> {
        Ok(self.writer.flush()?)
    }

    /// Subscribes and waits for the node to confirm, so nothing published
    /// after this returns is missed.
    pub fn subscribe(&mut self, topic: &str) -> Result<(), DsnError> {
        self.send(Frame::new(FrameType::Sub, self.channel_id, topic.as_bytes().to_vec()))?;
        self.flush()?;
        self.await_ack().map(|_| ())
    }

    pub fn recv(&mut self) -> Result<Delivery, DsnError> {
        if let Some(d) = self.pending.pop_front() {
            return Ok(d);
        }
        match Frame::read_from(&mut self.reader, frame::MAX_PAYLOAD) {
            Ok(Some(f)) => match f.kind {
                FrameType::Data => {
                    let (topic, body) = frame::parse_data(&f.payload)?;
                    Ok(Delivery::Data { topic: topic.into(), body: body.to_vec() })
                }
                FrameType::Close => Ok(Delivery::Closed),
                FrameType::Err => Err(DsnError::from_wire(&f.payload)),
                other => Err(DsnError::MalformedFrame(format!("unexpected {other:?}"))),
            },
            Ok(None) => Ok(Delivery::Disconnected),
            Err(frame::FrameError::Io(e)) => Err(DsnError::Io(e)),
            Err(e) => Err(e.into()),
        }
    }

    /// Sends CLOSE, shuts the write side, and waits (up to [`CLOSE_WAIT`])
    /// for the node to end the session. Once this returns, every frame sent
    /// earlier has been taken in by the node.
    pub fn close(mut self) -> Result<(), DsnError> {
        self.send(Frame::new(FrameType::Close, self.channel_id, Vec::new()))?;
        self.flush()?;
        let _ = self.stream.shutdown(Shutdown::Write);
        let _ = self.stream.set_read_timeout(Some(CLOSE_WAIT));
        let _ = std::io::copy(&mut self.reader, &mut std::io::sink());
        Ok(())
    }
}
