//! L7 wire format.
//!
//! ```text
//! 0      2    3    4     5            9              13
//! | "SM" | 01 | ty | fl  | channel BE | payload_len BE | payload ...
//! ```
//!
//! A DATA payload is `topic_len: u16 BE`, the UTF-8 topic, then the body.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 2] = [0x53, 0x4D];
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 13;
/// Upper bound on any payload the codec will allocate for.
pub const MAX_PAYLOAD: u32 = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameType {
    Data = 0,
    Auth = 1,
    Ack = 2,
    Err = 3,
    Close = 4,
    Sub = 5,
}

impl FrameType {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0 => FrameType::Data,
            1 => FrameType::Auth,
            2 => FrameType::Ack,
            3 => FrameType::Err,
            4 => FrameType::Close,
            5 => FrameType::Sub,
            _ => return None,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("truncated frame: need {needed} more bytes")]
    Truncated { needed: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown frame type {0}")]
    BadType(u8),
    #[error("payload of {len} bytes exceeds limit {limit}")]
    TooLarge { len: u32, limit: u32 },
    #[error("malformed DATA payload: {0}")]
    BadData(&'static str),
    #[error("io: {0}")]
    Io(String),
}

impl From<io::Error> for FrameError {
    fn from(e: io::Error) -> Self {
        FrameError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub kind: FrameType,
    pub flags: u8,
    pub channel_id: u32,
    pub payload_len: u32,
}

impl Header {
    pub fn parse(b: &[u8; HEADER_LEN], limit: u32) -> Result<Self, FrameError> {
        if b[0..2] != MAGIC {
            return Err(FrameError::BadMagic([b[0], b[1]]));
        }
        if b[2] != VERSION {
            return Err(FrameError::BadVersion(b[2]));
        }
        let kind = FrameType::from_u8(b[3]).ok_or(FrameError::BadType(b[3]))?;
        let channel_id = u32::from_be_bytes([b[5], b[6], b[7], b[8]]);
        let payload_len = u32::from_be_bytes([b[9], b[10], b[11], b[12]]);
        if payload_len > limit {
            return Err(FrameError::TooLarge { len: payload_len, limit });
        }
        Ok(Header { kind, flags: b[4], channel_id, payload_len })
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..2].copy_from_slice(&MAGIC);
        b[2] = VERSION;
        b[3] = self.kind as u8;
        b[4] = self.flags;
        b[5..9].copy_from_slice(&self.channel_id.to_be_bytes());
        b[9..13].copy_from_slice(&self.payload_len.to_be_bytes());
        b
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameType,
    pub flags: u8,
    pub channel_id: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: FrameType, channel_id: u32, payload: Vec<u8>) -> Self {
        Frame { kind, flags: 0, channel_id, payload }
    }

    pub fn data(channel_id: u32, topic: &str, body: &[u8]) -> Self {
        Frame::new(FrameType::Data, channel_id, data_payload(topic, body))
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let header = Header {
            kind: self.kind,
            flags: self.flags,
            channel_id: self.channel_id,
            payload_len: self.payload.len() as u32,
        };
        out.extend_from_slice(&header.encode());
        out.extend_from_slice(&self.payload);
    }

    /// Decodes one frame from the front of `buf`, returning it with the
    /// number of bytes consumed. DATA payloads are checked for a valid topic.
    pub fn decode(buf: &[u8]) -> Result<(Frame, usize), FrameError> {
        let head: &[u8; HEADER_LEN] = buf
            .get(..HEADER_LEN)
            .and_then(|h| h.try_into().ok())
            .ok_or_else(|| FrameError::Truncated { needed: HEADER_LEN.saturating_sub(buf.len()) })?;
        let h = Header::parse(head, MAX_PAYLOAD)?;
        let end = HEADER_LEN + h.payload_len as usize;
        if buf.len() < end {
            return Err(FrameError::Truncated { needed: end - buf.len() });
        }
        let payload = buf[HEADER_LEN..end].to_vec();
        if h.kind == FrameType::Data {
            parse_data(&payload)?;
        }
        Ok((Frame { kind: h.kind, flags: h.flags, channel_id: h.channel_id, payload }, end))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let header = Header {
            kind: self.kind,
            flags: self.flags,
            channel_id: self.channel_id,
            payload_len: self.payload.len() as u32,
        };
        w.write_all(&header.encode())?;
        w.write_all(&self.payload)
    }

    /// Reads one frame. `Ok(None)` on a clean end of stream before a header.
    pub fn read_from<R: Read>(r: &mut R, limit: u32) -> Result<Option<Frame>, FrameError> {
        let Some(raw) = read_raw(r, limit)? else { return Ok(None) };
        Frame::decode(&raw).map(|(f, _)| Some(f))
    }
}

/// Reads one frame's raw bytes (header included) without copying the
/// payload out. DATA payloads are validated.
pub fn read_raw<R: Read>(r: &mut R, limit: u32) -> Result<Option<Vec<u8>>, FrameError> {
    let mut head = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(FrameError::Truncated { needed: HEADER_LEN - got }),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let h = Header::parse(&head, limit)?;
    let mut raw = vec![0u8; HEADER_LEN + h.payload_len as usize];
    raw[..HEADER_LEN].copy_from_slice(&head);
    r.read_exact(&mut raw[HEADER_LEN..]).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FrameError::Truncated { needed: h.payload_len as usize },
        _ => e.into(),
    })?;
    if h.kind == FrameType::Data {
        parse_data(&raw[HEADER_LEN..])?;
    }
    Ok(Some(raw))
}

pub fn data_payload(topic: &str, body: &[u8]) -> Vec<u8> {
    let mut p = Vec::with_capacity(2 + topic.len() + body.len());
    p.extend_from_slice(&(topic.len() as u16).to_be_bytes());
    p.extend_from_slice(topic.as_bytes());
    p.extend_from_slice(body);
    p
}

/// Splits a DATA payload into topic and body.
pub fn parse_data(payload: &[u8]) -> Result<(&str, &[u8]), FrameError> {
    if payload.len() < 2 {
        return Err(FrameError::BadData("missing topic length"));
    }
    let n = u16::from_be_bytes([payload[0], payload[1]]) as usize;
    let topic = payload.get(2..2 + n).ok_or(FrameError::BadData("topic overruns payload"))?;
    let topic = std::str::from_utf8(topic).map_err(|_| FrameError::BadData("topic is not UTF-8"))?;
    Ok((topic, &payload[2 + n..]))
}

/// Bytes a DATA frame adds around its body.
pub fn data_overhead(topic: &str) -> usize {
    HEADER_LEN + 2 + topic.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let f = Frame::data(7, "det0", b"xy");
        assert_eq!(
            f.encode(),
            vec![0x53, 0x4D, 0x01, 0x00, 0x00, 0, 0, 0, 7, 0, 0, 0, 8, 0, 4, b'd', b'e', b't', b'0', b'x', b'y']
        );
        assert_eq!(f.encoded_len(), data_overhead("det0") + 2);
    }

    #[test]
    fn rejects_bad_headers() {
        let good = Frame::new(FrameType::Ack, 1, vec![]).encode();
        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(Frame::decode(&b), Err(FrameError::BadMagic(_))));
        let mut b = good.clone();
        b[2] = 2;
        assert_eq!(Frame::decode(&b), Err(FrameError::BadVersion(2)));
        let mut b = good.clone();
        b[3] = 6;
        assert_eq!(Frame::decode(&b), Err(FrameError::BadType(6)));
        assert!(matches!(Frame::decode(&good[..5]), Err(FrameError::Truncated { .. })));
        let mut b = good;
        b[12] = 1;
        assert_eq!(Frame::decode(&b), Err(FrameError::Truncated { needed: 1 }));
    }

    #[test]
    fn data_topic_validated() {
        let bad = Frame::new(FrameType::Data, 1, vec![0, 9, b'a']).encode();
        assert!(matches!(Frame::decode(&bad), Err(FrameError::BadData(_))));
        let bad = Frame::new(FrameType::Data, 1, vec![0, 1, 0xff]).encode();
        assert!(matches!(Frame::decode(&bad), Err(FrameError::BadData(_))));
    }

    #[test]
    fn reader_handles_eof() {
        let mut empty: &[u8] = &[];
        assert_eq!(Frame::read_from(&mut empty, MAX_PAYLOAD), Ok(None));
        let bytes = Frame::data(1, "t", b"body").encode();
        let mut r = &bytes[..];
        assert_eq!(Frame::read_from(&mut r, MAX_PAYLOAD).unwrap().unwrap(), Frame::data(1, "t", b"body"));
        let mut r = &bytes[..bytes.len() - 1];
        assert!(matches!(Frame::read_from(&mut r, MAX_PAYLOAD), Err(FrameError::Truncated { .. })));
    }

    proptest! {
        #[test]
        fn round_trip(kind in 0u8..6, flags: u8, ch: u32, topic in "[a-z0-9/]{0,12}", body in proptest::collection::vec(any::<u8>(), 0..256)) {
            let kind = FrameType::from_u8(kind).unwrap();
            let payload = if kind == FrameType::Data { data_payload(&topic, &body) } else { body };
            let f = Frame { kind, flags, channel_id: ch, payload };
            let bytes = f.encode();
            let (back, used) = Frame::decode(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back.encode(), bytes);
        }

        #[test]
        fn garbage_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = Frame::decode(&bytes);
            let _ = Frame::read_from(&mut &bytes[..], 1024);
        }
    }
}
