//! `EVS1` little-endian event files.
//!
//! ```text
//! magic  "EVS1"
//! width  u16
//! height u16
//! count  u64
//! count × { t u64, x u16, y u16, p i8, pad u8 }
//! ```

use std::path::Path;

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

pub const EVENT_MAGIC: &[u8; 4] = b"EVS1";
const HEADER_LEN: usize = 16;
const RECORD_LEN: usize = 14;

pub fn encode_events(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.len());
    out.extend_from_slice(EVENT_MAGIC);
    out.extend_from_slice(&stream.width().to_le_bytes());
    out.extend_from_slice(&stream.height().to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in stream.events() {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.polarity.sign() as u8);
        out.push(0);
    }
    out
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        what: "event file",
        offset: offset as u64,
        detail: detail.into(),
    }
}

pub fn decode_events(bytes: &[u8]) -> Result<EventStream> {
    if bytes.is_empty() {
        return Err(format_err(0, "empty input"));
    }
    if let Some(pos) = EVENT_MAGIC
        .iter()
        .enumerate()
        .position(|(i, m)| bytes.get(i) != Some(m))
    {
        return Err(format_err(pos, "bad magic, expected \"EVS1\""));
    }
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if width == 0 || height == 0 {
        return Err(format_err(4, "zero sensor dimension"));
    }
    let body = bytes.len() - HEADER_LEN;
    let expected = count
        .checked_mul(RECORD_LEN as u64)
        .ok_or_else(|| format_err(8, "event count overflows"))?;
    if (body as u64) < expected {
        return Err(format_err(bytes.len(), format!("truncated: {count} records declared")));
    }
    if body as u64 > expected {
        return Err(format_err(
            HEADER_LEN + expected as usize,
            "trailing bytes after last record",
        ));
    }
    let mut events = Vec::with_capacity(count as usize);
    let mut prev_t = 0u64;
    for (i, rec) in bytes[HEADER_LEN..].chunks_exact(RECORD_LEN).enumerate() {
        let offset = HEADER_LEN + i * RECORD_LEN;
        let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes([rec[8], rec[9]]);
        let y = u16::from_le_bytes([rec[10], rec[11]]);
        let polarity = Polarity::from_sign(rec[12] as i8)
            .ok_or_else(|| format_err(offset + 12, format!("invalid polarity {}", rec[12] as i8)))?;
        if x >= width || y >= height {
            return Err(format_err(offset + 8, format!("coordinate ({x}, {y}) out of bounds")));
        }
        if t < prev_t {
            return Err(format_err(offset, "timestamps not sorted"));
        }
        prev_t = t;
        events.push(Event { t, x, y, polarity });
    }
    EventStream::new(width, height, events)
}

pub fn write_events(path: impl AsRef<Path>, stream: &EventStream) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_events(stream)).map_err(|e| Error::io(path, e))
}

pub fn read_events(path: impl AsRef<Path>) -> Result<EventStream> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_events(&bytes)
}
