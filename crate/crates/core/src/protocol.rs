//! Bit-exact wire format for intermediate outputs and control messages.
//!
//! Frame layout (all little-endian):
//! `magic "SCMI" | version u8 | type u8 | body_len u32 | body | crc32`,
//! with the CRC32 (IEEE) computed over version..body. FEATURE bodies carry
//! the device/frame/timestamp header, the grid spec, and voxel records
//! sorted ascending by `(z, y, x)` — the canonical order that makes the
//! encoding injective on tensor content.

use std::io::{Read, Write};

use thiserror::Error;

use crate::sparse::{GridSpec, SparseFeatureTensor};

pub const MAGIC: [u8; 4] = *b"SCMI";
pub const VERSION: u8 = 1;
/// Declared body lengths above this are rejected before any allocation.
pub const MAX_BODY_LEN: u32 = 64 * 1024 * 1024;
/// magic + version + type + body_len prefix.
pub const PREFIX_LEN: usize = 10;
/// Fixed FEATURE body bytes before the voxel records.
pub const FEATURE_HEADER_LEN: usize = 88;
/// Total non-body frame overhead (prefix + CRC trailer).
pub const FRAME_OVERHEAD: usize = PREFIX_LEN + 4;

pub const TYPE_HELLO: u8 = 1;
pub const TYPE_FEATURE: u8 = 2;
pub const TYPE_RESULT: u8 = 3;
pub const TYPE_BYE: u8 = 4;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0}")]
    BadMessageType(u8),
    #[error("declared body length {0} exceeds the {MAX_BODY_LEN}-byte cap")]
    BodyTooLarge(u32),
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("voxel index {index:?} outside dims {dims:?}")]
    IndexOutOfDims { index: [i32; 3], dims: [u32; 3] },
    #[error("non-finite float in payload")]
    NonFinite,
    #[error("voxel records not in canonical (z, y, x) ascending order")]
    NonCanonical,
    #[error("body length {declared} does not match content length {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("invalid grid in payload: {0}")]
    InvalidGrid(String),
    #[error("voxel count {0} exceeds the u32 range")]
    VoxelCountOverflow(u64),
    #[error("frame I/O: {0}")]
    Io(String),
}

impl From<std::io::Error> for ProtocolError {
    fn from(e: std::io::Error) -> Self {
        ProtocolError::Io(e.to_string())
    }
}

/// One intermediate output crossing the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMessage {
    pub device_id: u16,
    pub frame_id: u64,
    pub timestamp_us: u64,
    pub tensor: SparseFeatureTensor,
}

/// Detection payload of a RESULT message (f32 on the wire).
#[derive(Debug, Clone, PartialEq)]
pub struct WireDetection {
    pub center: [f32; 3],
    pub size: [f32; 3],
    pub score: f32,
    pub class_id: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultMessage {
    pub frame_id: u64,
    pub detections: Vec<WireDetection>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { device_id: u16 },
    Feature(FeatureMessage),
    Result(ResultMessage),
    Bye,
}

/// FEATURE body size for a given voxel count and channel count.
pub fn feature_body_len(voxels: usize, channels: usize) -> usize {
    FEATURE_HEADER_LEN + voxels * (12 + 4 * channels)
}

/// Whole-frame size (prefix + body + CRC) of a FEATURE message.
pub fn feature_frame_len(voxels: usize, channels: usize) -> usize {
    FRAME_OVERHEAD + feature_body_len(voxels, channels)
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn wrap_frame(msg_type: u8, body: Vec<u8>) -> Result<Vec<u8>, ProtocolError> {
    if body.len() as u64 > MAX_BODY_LEN as u64 {
        return Err(ProtocolError::BodyTooLarge(body.len().min(u32::MAX as usize) as u32));
    }
    let mut out = Vec::with_capacity(FRAME_OVERHEAD + body.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg_type);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out[4..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Encodes a FEATURE message. Voxel records come out in canonical order
/// because tensor iteration is `(z, y, x)` ascending.
pub fn encode_feature(msg: &FeatureMessage) -> Result<Vec<u8>, ProtocolError> {
    let tensor = &msg.tensor;
    let count = tensor.len() as u64;
    if count > u32::MAX as u64 {
        return Err(ProtocolError::VoxelCountOverflow(count));
    }
    let g = tensor.grid();
    let mut w = Writer::new();
    w.u16(msg.device_id);
    w.u64(msg.frame_id);
    w.u64(msg.timestamp_us);
    for a in 0..3 {
        w.f64(g.origin[a]);
    }
    for a in 0..3 {
        w.f64(g.voxel_size[a]);
    }
    for a in 0..3 {
        w.u32(g.dims[a]);
    }
    w.u32(g.stride_scale);
    w.u16(tensor.channels() as u16);
    w.u32(count as u32);
    for (idx, feat) in tensor.iter() {
        for a in 0..3 {
            w.i32(idx[a]);
        }
        for f in feat {
            w.f32(*f);
        }
    }
    wrap_frame(TYPE_FEATURE, w.buf)
}

pub fn encode_message(msg: &Message) -> Result<Vec<u8>, ProtocolError> {
    match msg {
        Message::Hello { device_id } => {
            let mut w = Writer::new();
            w.u16(*device_id);
            wrap_frame(TYPE_HELLO, w.buf)
        }
        Message::Feature(f) => encode_feature(f),
        Message::Result(r) => {
            let mut w = Writer::new();
            w.u64(r.frame_id);
            w.u32(r.detections.len() as u32);
            for d in &r.detections {
                for a in 0..3 {
                    w.f32(d.center[a]);
                }
                for a in 0..3 {
                    w.f32(d.size[a]);
                }
                w.f32(d.score);
                w.u16(d.class_id);
            }
            wrap_frame(TYPE_RESULT, w.buf)
        }
        Message::Bye => wrap_frame(TYPE_BYE, Vec::new()),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.pos + n > self.buf.len() {
            return Err(ProtocolError::Truncated {
                needed: self.pos + n,
                have: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32, ProtocolError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, ProtocolError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ProtocolError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_feature_body(body: &[u8]) -> Result<FeatureMessage, ProtocolError> {
    let mut r = Reader::new(body);
    let device_id = r.u16()?;
    let frame_id = r.u64()?;
    let timestamp_us = r.u64()?;
    let mut origin = [0.0f64; 3];
    let mut voxel_size = [0.0f64; 3];
    let mut dims = [0u32; 3];
    for a in 0..3 {
        origin[a] = r.f64()?;
    }
    for a in 0..3 {
        voxel_size[a] = r.f64()?;
    }
    for a in 0..3 {
        dims[a] = r.u32()?;
    }
    let stride_scale = r.u32()?;
    let channels = r.u16()? as usize;
    let count = r.u32()? as usize;

    let grid = GridSpec {
        origin,
        voxel_size,
        dims,
        stride_scale,
    };
    grid.validate()
        .map_err(|e| ProtocolError::InvalidGrid(e.to_string()))?;
    if channels == 0 {
        return Err(ProtocolError::InvalidGrid("channel count must be >= 1".into()));
    }

    let expected = feature_body_len(count, channels);
    if body.len() != expected {
        return Err(ProtocolError::LengthMismatch {
            declared: body.len(),
            actual: expected,
        });
    }

    let mut tensor = SparseFeatureTensor::new(grid, channels)
        .map_err(|e| ProtocolError::InvalidGrid(e.to_string()))?;
    let mut prev: Option<[i32; 3]> = None;
    for _ in 0..count {
        let idx = [r.i32()?, r.i32()?, r.i32()?];
        if !grid.contains_index(idx) {
            return Err(ProtocolError::IndexOutOfDims { index: idx, dims });
        }
        if let Some(p) = prev {
            if (idx[2], idx[1], idx[0]) <= (p[2], p[1], p[0]) {
                return Err(ProtocolError::NonCanonical);
            }
        }
        prev = Some(idx);
        let mut feat = Vec::with_capacity(channels);
        for _ in 0..channels {
            let f = r.f32()?;
            if !f.is_finite() {
                return Err(ProtocolError::NonFinite);
            }
            feat.push(f);
        }
        tensor
            .insert(idx, feat)
            .map_err(|e| ProtocolError::InvalidGrid(e.to_string()))?;
    }
    Ok(FeatureMessage {
        device_id,
        frame_id,
        timestamp_us,
        tensor,
    })
}

fn decode_result_body(body: &[u8]) -> Result<ResultMessage, ProtocolError> {
    let mut r = Reader::new(body);
    let frame_id = r.u64()?;
    let count = r.u32()? as usize;
    let expected = 12 + count * 30;
    if body.len() != expected {
        return Err(ProtocolError::LengthMismatch {
            declared: body.len(),
            actual: expected,
        });
    }
    let mut detections = Vec::with_capacity(count);
    for _ in 0..count {
        let mut center = [0.0f32; 3];
        let mut size = [0.0f32; 3];
        for a in 0..3 {
            center[a] = r.f32()?;
        }
        for a in 0..3 {
            size[a] = r.f32()?;
        }
        let score = r.f32()?;
        let class_id = r.u16()?;
        if !(center.iter().all(|v| v.is_finite())
            && size.iter().all(|v| v.is_finite())
            && score.is_finite())
        {
            return Err(ProtocolError::NonFinite);
        }
        detections.push(WireDetection {
            center,
            size,
            score,
            class_id,
        });
    }
    Ok(ResultMessage {
        frame_id,
        detections,
    })
}

/// Decodes one frame from the front of `bytes`, returning the message and
/// the number of bytes consumed. Handles hostile input: every malformed
/// shape maps to a structured error, nothing past the declared body length
/// is read, and no allocation exceeds the declared (capped) body length.
pub fn decode_frame(bytes: &[u8]) -> Result<(Message, usize), ProtocolError> {
    if bytes.len() < PREFIX_LEN {
        return Err(ProtocolError::Truncated {
            needed: PREFIX_LEN,
            have: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    let version = bytes[4];
    if version != VERSION {
        return Err(ProtocolError::UnsupportedVersion(version));
    }
    let msg_type = bytes[5];
    let body_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    if body_len > MAX_BODY_LEN {
        return Err(ProtocolError::BodyTooLarge(body_len));
    }
    let body_len = body_len as usize;
    let total = PREFIX_LEN + body_len + 4;
    if bytes.len() < total {
        return Err(ProtocolError::Truncated {
            needed: total,
            have: bytes.len(),
        });
    }
    let stored = u32::from_le_bytes(bytes[total - 4..total].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[4..PREFIX_LEN + body_len]);
    if stored != computed {
        return Err(ProtocolError::CrcMismatch { stored, computed });
    }
    let body = &bytes[PREFIX_LEN..PREFIX_LEN + body_len];
    let msg = match msg_type {
        TYPE_HELLO => {
            if body.len() != 2 {
                return Err(ProtocolError::LengthMismatch {
                    declared: body.len(),
                    actual: 2,
                });
            }
            Message::Hello {
                device_id: u16::from_le_bytes(body.try_into().unwrap()),
            }
        }
        TYPE_FEATURE => Message::Feature(decode_feature_body(body)?),
        TYPE_RESULT => Message::Result(decode_result_body(body)?),
        TYPE_BYE => {
            if !body.is_empty() {
                return Err(ProtocolError::LengthMismatch {
                    declared: body.len(),
                    actual: 0,
                });
            }
            Message::Bye
        }
        other => return Err(ProtocolError::BadMessageType(other)),
    };
    Ok((msg, total))
}

/// Reads exactly one frame from a stream (prefix, then body + CRC).
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Message, ProtocolError> {
    let mut prefix = [0u8; PREFIX_LEN];
    reader.read_exact(&mut prefix)?;
    let magic: [u8; 4] = prefix[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    if prefix[4] != VERSION {
        return Err(ProtocolError::UnsupportedVersion(prefix[4]));
    }
    let body_len = u32::from_le_bytes(prefix[6..10].try_into().unwrap());
    if body_len > MAX_BODY_LEN {
        return Err(ProtocolError::BodyTooLarge(body_len));
    }
    let mut rest = vec![0u8; body_len as usize + 4];
    reader.read_exact(&mut rest)?;
    let mut whole = Vec::with_capacity(PREFIX_LEN + rest.len());
    whole.extend_from_slice(&prefix);
    whole.extend_from_slice(&rest);
    decode_frame(&whole).map(|(m, _)| m)
}

pub fn write_frame<W: Write>(writer: &mut W, msg: &Message) -> Result<usize, ProtocolError> {
    let bytes = encode_message(msg)?;
    writer.write_all(&bytes)?;
    Ok(bytes.len())
}
