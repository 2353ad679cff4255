//! Frame encoding shared by both transports. On TCP each frame is preceded
//! by a 4-byte big-endian length of the body; the body starts with a kind
//! byte (parcel=1, snapshot=2, control=3).

use std::io::{Read, Write};

pub const KIND_PARCEL: u8 = 1;
pub const KIND_SNAPSHOT: u8 = 2;
pub const KIND_CONTROL: u8 = 3;

/// Largest accepted frame body.
pub const MAX_FRAME: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Parcel {
    pub parcel_id: u64,
    pub source: u32,
    pub target: u32,
    pub action_name: String,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplyStatus {
    Ok = 0,
    UnknownAction = 1,
    ActionPanicked = 2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Control {
    Reply { parcel_id: u64, status: ReplyStatus, payload: Vec<u8> },
    BarrierEnter { epoch: u64, rank: u32 },
    Hello { rank: u32 },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Parcel(Parcel),
    /// An encoded profile snapshot from `rank` for reduction `epoch`.
    Snapshot {
        epoch: u64,
        rank: u32,
        bytes: Vec<u8>,
    },
    Control(Control),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed frame at byte {offset}: {what}")]
pub struct FrameError {
    pub offset: usize,
    pub what: &'static str,
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(b: &mut Vec<u8>, v: &[u8]) {
    put_u32(b, v.len() as u32);
    b.extend_from_slice(v);
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        if self.buf.len() - self.pos < n {
            return Err(FrameError { offset: self.pos, what: "truncated" });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, FrameError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, FrameError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, FrameError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<Vec<u8>, FrameError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn string(&mut self) -> Result<String, FrameError> {
        let at = self.pos;
        String::from_utf8(self.bytes()?).map_err(|_| FrameError { offset: at, what: "invalid UTF-8" })
    }
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        match self {
            Frame::Parcel(p) => {
                b.push(KIND_PARCEL);
                put_u64(&mut b, p.parcel_id);
                put_u32(&mut b, p.source);
                put_u32(&mut b, p.target);
                put_bytes(&mut b, p.action_name.as_bytes());
                put_bytes(&mut b, &p.payload);
            }
            Frame::Snapshot { epoch, rank, bytes } => {
                b.push(KIND_SNAPSHOT);
                put_u64(&mut b, *epoch);
                put_u32(&mut b, *rank);
                put_bytes(&mut b, bytes);
            }
            Frame::Control(c) => {
                b.push(KIND_CONTROL);
                match c {
                    Control::Reply { parcel_id, status, payload } => {
                        b.push(0);
                        put_u64(&mut b, *parcel_id);
                        b.push(*status as u8);
                        put_bytes(&mut b, payload);
                    }
                    Control::BarrierEnter { epoch, rank } => {
                        b.push(1);
                        put_u64(&mut b, *epoch);
                        put_u32(&mut b, *rank);
                    }
                    Control::Hello { rank } => {
                        b.push(2);
                        put_u32(&mut b, *rank);
                    }
                    Control::Shutdown => b.push(3),
                }
            }
        }
        b
    }

    pub fn decode(buf: &[u8]) -> Result<Frame, FrameError> {
        let mut c = Cursor { buf, pos: 0 };
        let frame = match c.u8()? {
            KIND_PARCEL => Frame::Parcel(Parcel {
                parcel_id: c.u64()?,
                source: c.u32()?,
                target: c.u32()?,
                action_name: c.string()?,
                payload: c.bytes()?,
            }),
            KIND_SNAPSHOT => Frame::Snapshot { epoch: c.u64()?, rank: c.u32()?, bytes: c.bytes()? },
            KIND_CONTROL => Frame::Control(match c.u8()? {
                0 => {
                    let parcel_id = c.u64()?;
                    let at = c.pos;
                    let status = match c.u8()? {
                        0 => ReplyStatus::Ok,
                        1 => ReplyStatus::UnknownAction,
                        2 => ReplyStatus::ActionPanicked,
                        _ => return Err(FrameError { offset: at, what: "unknown reply status" }),
                    };
                    Control::Reply { parcel_id, status, payload: c.bytes()? }
                }
                1 => Control::BarrierEnter { epoch: c.u64()?, rank: c.u32()? },
                2 => Control::Hello { rank: c.u32()? },
                3 => Control::Shutdown,
                _ => return Err(FrameError { offset: 1, what: "unknown control tag" }),
            }),
            _ => return Err(FrameError { offset: 0, what: "unknown frame kind" }),
        };
        if c.pos != buf.len() {
            return Err(FrameError { offset: c.pos, what: "trailing bytes" });
        }
        Ok(frame)
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> std::io::Result<usize> {
    let body = frame.encode();
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    w.write_all(&out)?;
    Ok(out.len())
}

/// Reads one frame; `Ok(None)` on clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> std::io::Result<Option<Frame>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("frame of {n} bytes")));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)?;
    Frame::decode(&body).map(Some).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples() -> Vec<Frame> {
        vec![
            Frame::Parcel(Parcel {
                parcel_id: 9,
                source: 1,
                target: 2,
                action_name: "echo".into(),
                payload: vec![1, 2, 3],
            }),
            Frame::Snapshot { epoch: 3, rank: 1, bytes: b"TSCP\x01".to_vec() },
            Frame::Control(Control::Reply { parcel_id: 4, status: ReplyStatus::UnknownAction, payload: vec![] }),
            Frame::Control(Control::BarrierEnter { epoch: 7, rank: 3 }),
            Frame::Control(Control::Hello { rank: 5 }),
            Frame::Control(Control::Shutdown),
        ]
    }

    #[test]
    fn frames_roundtrip_through_a_stream() {
        let mut buf = Vec::new();
        for f in samples() {
            write_frame(&mut buf, &f).unwrap();
        }
        assert_eq!(&buf[..4], &(samples()[0].encode().len() as u32).to_be_bytes());
        assert_eq!(buf[4], KIND_PARCEL);
        let mut r = buf.as_slice();
        for f in samples() {
            assert_eq!(read_frame(&mut r).unwrap(), Some(f));
        }
        assert_eq!(read_frame(&mut r).unwrap(), None);
    }

    #[test]
    fn malformed_frames_are_rejected() {
        assert!(Frame::decode(&[]).is_err());
        assert!(Frame::decode(&[9]).is_err());
        let mut p = samples()[0].encode();
        p.pop();
        assert!(Frame::decode(&p).is_err());
        let mut p = samples()[5].encode();
        p.push(0);
        assert_eq!(Frame::decode(&p).unwrap_err().what, "trailing bytes");
    }
}
