//! Length-prefixed block transfer protocol. All integers big-endian.
//!
//! ```text
//! frame    = len:u32 type:u8 request_id:u32 body     len counts type onward
//! request  = file_id:u32 range_count:u32 { first_block:u32 count:u32 }
//! response = request_id:u32 block_count:u32 { file_id:u32 block_index:u32 crc32:u32 payload }
//! error    = status:u16 message:utf-8
//! ```
//!
//! Types: 1 urgent request, 2 speculative request, 3 response, 4 error.
//! Every payload is exactly one block; the tail of a file is zero padded.

use std::io::{self, Read, Write};

use streamfetch_core::trace::{BlockId, FileId};
use thiserror::Error;

pub const URGENT_REQ: u8 = 1;
pub const SPEC_REQ: u8 = 2;
pub const RESP: u8 = 3;
pub const ERROR: u8 = 4;

/// Largest frame either side accepts.
pub const MAX_FRAME_LEN: u32 = 64 << 20;
/// Most blocks one request may name.
pub const MAX_REQUEST_BLOCKS: u64 = 1 << 14;

const HEAD_LEN: u32 = 5;

#[derive(Debug, Error)]
pub enum ProtoError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed frame: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Priority {
    Urgent,
    Speculative,
}

impl Priority {
    fn code(self) -> u8 {
        match self {
            Priority::Urgent => URGENT_REQ,
            Priority::Speculative => SPEC_REQ,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum Status {
    NotFound = 1,
    BadRequest = 2,
    Internal = 3,
}

impl Status {
    pub fn from_code(c: u16) -> Option<Status> {
        match c {
            1 => Some(Status::NotFound),
            2 => Some(Status::BadRequest),
            3 => Some(Status::Internal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub id: u32,
    pub priority: Priority,
    pub file: FileId,
    /// `(first_block, count)`
    pub ranges: Vec<(u32, u32)>,
}

impl Request {
    pub fn block_count(&self) -> u64 {
        self.ranges.iter().map(|r| r.1 as u64).sum()
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.ranges.iter().flat_map(move |&(first, n)| {
            (first..first.saturating_add(n)).map(move |i| BlockId {
                file: self.file,
                index: i,
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorFrame {
    pub id: u32,
    pub status: Status,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHead {
    pub len: u32,
    pub kind: u8,
    pub id: u32,
}

impl FrameHead {
    pub fn body_len(&self) -> usize {
        (self.len - HEAD_LEN) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireBlock {
    pub block: BlockId,
    pub crc: u32,
    pub data: Vec<u8>,
}

impl WireBlock {
    pub fn verify(&self) -> bool {
        crc32fast::hash(&self.data) == self.crc
    }
}

pub fn write_request<W: Write>(w: &mut W, req: &Request) -> io::Result<()> {
    let mut buf = Vec::with_capacity(17 + 8 * req.ranges.len());
    let len = HEAD_LEN + 8 + 8 * req.ranges.len() as u32;
    buf.extend_from_slice(&len.to_be_bytes());
    buf.push(req.priority.code());
    buf.extend_from_slice(&req.id.to_be_bytes());
    buf.extend_from_slice(&req.file.0.to_be_bytes());
    buf.extend_from_slice(&(req.ranges.len() as u32).to_be_bytes());
    for &(first, n) in &req.ranges {
        buf.extend_from_slice(&first.to_be_bytes());
        buf.extend_from_slice(&n.to_be_bytes());
    }
    w.write_all(&buf)
}

pub fn write_error<W: Write>(w: &mut W, e: &ErrorFrame) -> io::Result<()> {
    let msg = e.message.as_bytes();
    let mut buf = Vec::with_capacity(11 + msg.len());
    buf.extend_from_slice(&(HEAD_LEN + 2 + msg.len() as u32).to_be_bytes());
    buf.push(ERROR);
    buf.extend_from_slice(&e.id.to_be_bytes());
    buf.extend_from_slice(&(e.status as u16).to_be_bytes());
    buf.extend_from_slice(msg);
    w.write_all(&buf)
}

/// Frame length of a response carrying `count` blocks.
pub fn response_len(count: u32, block_size: u64) -> u64 {
    HEAD_LEN as u64 + 8 + count as u64 * (12 + block_size)
}

/// Everything of a response before its first block.
pub fn response_head(id: u32, count: u32, block_size: u64) -> io::Result<[u8; 17]> {
    let len = response_len(count, block_size);
    if len > MAX_FRAME_LEN as u64 {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "response too large"));
    }
    let mut h = [0u8; 17];
    h[..4].copy_from_slice(&(len as u32).to_be_bytes());
    h[4] = RESP;
    h[5..9].copy_from_slice(&id.to_be_bytes());
    h[9..13].copy_from_slice(&id.to_be_bytes());
    h[13..17].copy_from_slice(&count.to_be_bytes());
    Ok(h)
}

pub fn encode_block(block: BlockId, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + data.len());
    out.extend_from_slice(&block.file.0.to_be_bytes());
    out.extend_from_slice(&block.index.to_be_bytes());
    out.extend_from_slice(&crc32fast::hash(data).to_be_bytes());
    out.extend_from_slice(data);
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

pub fn read_head<R: Read>(r: &mut R) -> Result<FrameHead, ProtoError> {
    let mut h = [0u8; 9];
    r.read_exact(&mut h)?;
    let len = u32_at(&h, 0);
    if !(HEAD_LEN..=MAX_FRAME_LEN).contains(&len) {
        return Err(ProtoError::Malformed(format!("frame length {len}")));
    }
    Ok(FrameHead {
        len,
        kind: h[4],
        id: u32_at(&h, 5),
    })
}

pub fn read_body<R: Read>(r: &mut R, head: &FrameHead) -> Result<Vec<u8>, ProtoError> {
    let mut body = vec![0u8; head.body_len()];
    r.read_exact(&mut body)?;
    Ok(body)
}

pub fn parse_request(head: &FrameHead, body: &[u8]) -> Result<Request, ProtoError> {
    let priority = match head.kind {
        URGENT_REQ => Priority::Urgent,
        SPEC_REQ => Priority::Speculative,
        k => return Err(ProtoError::Malformed(format!("type {k} is not a request"))),
    };
    if body.len() < 8 {
        return Err(ProtoError::Malformed("short request".into()));
    }
    let n = u32_at(body, 4) as usize;
    if body.len() != 8 + 8 * n {
        return Err(ProtoError::Malformed(format!("{n} ranges in {} bytes", body.len())));
    }
    let ranges = (0..n)
        .map(|i| (u32_at(body, 8 + 8 * i), u32_at(body, 12 + 8 * i)))
        .collect();
    Ok(Request {
        id: head.id,
        priority,
        file: FileId(u32_at(body, 0)),
        ranges,
    })
}

pub fn parse_error(head: &FrameHead, body: &[u8]) -> Result<ErrorFrame, ProtoError> {
    if head.kind != ERROR || body.len() < 2 {
        return Err(ProtoError::Malformed("bad error frame".into()));
    }
    let code = u16::from_be_bytes([body[0], body[1]]);
    let status = Status::from_code(code).ok_or_else(|| ProtoError::Malformed(format!("status {code}")))?;
    Ok(ErrorFrame {
        id: head.id,
        status,
        message: String::from_utf8_lossy(&body[2..]).into_owned(),
    })
}

/// Reads the echo and block count that follow a response head, checking
/// them against the frame length.
pub fn read_response_count<R: Read>(r: &mut R, head: &FrameHead, block_size: u64) -> Result<u32, ProtoError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    let (echo, count) = (u32_at(&b, 0), u32_at(&b, 4));
    if echo != head.id {
        return Err(ProtoError::Malformed(format!("echo {echo} for request {}", head.id)));
    }
    if response_len(count, block_size) != head.len as u64 {
        return Err(ProtoError::Malformed(format!(
            "{count} blocks do not fit a {}-byte frame",
            head.len
        )));
    }
    Ok(count)
}

pub fn read_block<R: Read>(r: &mut R, block_size: u64) -> Result<WireBlock, ProtoError> {
    let mut h = [0u8; 12];
    r.read_exact(&mut h)?;
    let mut data = vec![0u8; block_size as usize];
    r.read_exact(&mut data)?;
    Ok(WireBlock {
        block: BlockId {
            file: FileId(u32_at(&h, 0)),
            index: u32_at(&h, 4),
        },
        crc: u32_at(&h, 8),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_bytes_exact() {
        let req = Request {
            id: 7,
            priority: Priority::Speculative,
            file: FileId(3),
            ranges: vec![(5, 3)],
        };
        let mut buf = Vec::new();
        write_request(&mut buf, &req).unwrap();
        assert_eq!(
            buf,
            [0, 0, 0, 21, 2, 0, 0, 0, 7, 0, 0, 0, 3, 0, 0, 0, 1, 0, 0, 0, 5, 0, 0, 0, 3]
        );
        let mut r = &buf[..];
        let head = read_head(&mut r).unwrap();
        let body = read_body(&mut r, &head).unwrap();
        assert_eq!(parse_request(&head, &body).unwrap(), req);
        assert_eq!(req.blocks().count(), 3);
    }

    #[test]
    fn response_round_trip() {
        let data: Vec<Vec<u8>> = (0..3u8).map(|i| vec![i; 16]).collect();
        let mut buf = response_head(9, 3, 16).unwrap().to_vec();
        for (i, d) in data.iter().enumerate() {
            buf.extend(encode_block(BlockId::new(1, i as u32), d));
        }
        assert_eq!(buf.len() as u64, 4 + response_len(3, 16));
        let mut r = &buf[..];
        let head = read_head(&mut r).unwrap();
        assert_eq!((head.kind, head.id), (RESP, 9));
        assert_eq!(read_response_count(&mut r, &head, 16).unwrap(), 3);
        for (i, d) in data.iter().enumerate() {
            let b = read_block(&mut r, 16).unwrap();
            assert_eq!(b.block, BlockId::new(1, i as u32));
            assert_eq!(&b.data, d);
            assert!(b.verify());
        }
        assert!(r.is_empty());
    }

    #[test]
    fn response_with_wrong_block_size_rejected() {
        let buf = response_head(1, 2, 16).unwrap();
        let mut r = &buf[..];
        let head = read_head(&mut r).unwrap();
        assert!(read_response_count(&mut r, &head, 4096).is_err());
    }

    #[test]
    fn error_round_trip() {
        let e = ErrorFrame {
            id: 4,
            status: Status::NotFound,
            message: "no file 9".into(),
        };
        let mut buf = Vec::new();
        write_error(&mut buf, &e).unwrap();
        assert_eq!(&buf[..9], &[0, 0, 0, 16, 4, 0, 0, 0, 4]);
        let mut r = &buf[..];
        let head = read_head(&mut r).unwrap();
        let body = read_body(&mut r, &head).unwrap();
        assert_eq!(parse_error(&head, &body).unwrap(), e);
    }

    #[test]
    fn corrupt_payload_fails_crc() {
        let mut enc = encode_block(BlockId::new(0, 0), &[1, 2, 3, 4]);
        enc[12] ^= 0xff;
        let b = read_block(&mut &enc[..], 4).unwrap();
        assert!(!b.verify());
    }

    #[test]
    fn bad_lengths_rejected() {
        assert!(read_head(&mut &[0u8, 0, 0, 2, 1, 0, 0, 0, 0][..]).is_err());
        let head = FrameHead { len: 5 + 9, kind: URGENT_REQ, id: 0 };
        assert!(parse_request(&head, &[0, 0, 0, 0, 0, 0, 0, 1, 0]).is_err());
        let head = FrameHead { len: 5, kind: RESP, id: 0 };
        assert!(parse_request(&head, &[]).is_err());
    }
}
