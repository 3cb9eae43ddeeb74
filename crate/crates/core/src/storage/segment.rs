//! Append-only segment files.
//!
//! Layout (little-endian):
//!
//! ```text
//! header : magic "ODAS" | version u16 | topic count u32 | topics (u16 len + UTF-8)* | crc32 u32
//! block  : topic index u32 | count u32 | body length u32 | body | crc32 u32
//! body   : first timestamp u64 | first value i64 | (zigzag varint dt, zigzag varint dv)*
//! ```
//!
//! The block CRC covers the three length fields and the body. A segment is
//! written to a temporary name and renamed into place, so a crash leaves
//! either a complete file or a stray `.tmp` that is ignored on open.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::topic::Topic;

pub const MAGIC: &[u8; 4] = b"ODAS";
pub const VERSION: u16 = 1;
const EXT: &str = "seg";

pub type Run = (Topic, Vec<(u64, i64)>);

fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

fn unzigzag(u: u64) -> i64 {
    ((u >> 1) as i64) ^ -((u & 1) as i64)
}

fn put_varint(out: &mut Vec<u8>, mut u: u64) {
    while u >= 0x80 {
        out.push((u as u8) | 0x80);
        u >>= 7;
    }
    out.push(u as u8);
}

fn get_varint(buf: &[u8], pos: &mut usize) -> Option<u64> {
    let mut out = 0u64;
    let mut shift = 0;
    loop {
        let b = *buf.get(*pos)?;
        *pos += 1;
        if shift >= 64 {
            return None;
        }
        out |= u64::from(b & 0x7f) << shift;
        if b & 0x80 == 0 {
            return Some(out);
        }
        shift += 7;
    }
}

fn encode_body(readings: &[(u64, i64)]) -> Vec<u8> {
    let mut body = Vec::with_capacity(16 + readings.len() * 4);
    let (t0, v0) = readings[0];
    body.extend_from_slice(&t0.to_le_bytes());
    body.extend_from_slice(&v0.to_le_bytes());
    let (mut pt, mut pv) = (t0, v0);
    for &(t, v) in &readings[1..] {
        put_varint(&mut body, zigzag(t.wrapping_sub(pt) as i64));
        put_varint(&mut body, zigzag(v.wrapping_sub(pv)));
        pt = t;
        pv = v;
    }
    body
}

fn decode_body(body: &[u8], count: usize) -> Option<Vec<(u64, i64)>> {
    if count == 0 || body.len() < 16 {
        return None;
    }
    let mut out = Vec::with_capacity(count);
    let mut t = u64::from_le_bytes(body[..8].try_into().ok()?);
    let mut v = i64::from_le_bytes(body[8..16].try_into().ok()?);
    out.push((t, v));
    let mut pos = 16;
    for _ in 1..count {
        t = t.wrapping_add(unzigzag(get_varint(body, &mut pos)?) as u64);
        v = v.wrapping_add(unzigzag(get_varint(body, &mut pos)?));
        out.push((t, v));
    }
    (pos == body.len()).then_some(out)
}

pub fn segment_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("{id:012}.{EXT}"))
}

/// Serialises runs into one segment image. Empty runs are skipped.
pub fn encode_segment(runs: &[Run]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let live: Vec<&Run> = runs.iter().filter(|r| !r.1.is_empty()).collect();
    out.extend_from_slice(&(live.len() as u32).to_le_bytes());
    for (topic, _) in &live {
        let s = topic.as_str().as_bytes();
        out.extend_from_slice(&(s.len() as u16).to_le_bytes());
        out.extend_from_slice(s);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    for (idx, (_, readings)) in live.iter().enumerate() {
        let body = encode_body(readings);
        let start = out.len();
        out.extend_from_slice(&(idx as u32).to_le_bytes());
        out.extend_from_slice(&(readings.len() as u32).to_le_bytes());
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    out
}

/// Writes a segment atomically (temp file, fsync, rename).
pub fn write_segment(dir: &Path, id: u64, runs: &[Run]) -> io::Result<PathBuf> {
    let path = segment_path(dir, id);
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&encode_segment(runs))?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, &path)?;
    Ok(path)
}

/// Outcome of decoding a segment image.
#[derive(Debug, Default)]
pub struct Decoded {
    pub runs: Vec<Run>,
    /// Blocks dropped because of a checksum or framing failure.
    pub corrupt_blocks: usize,
    /// True when the header itself was unreadable.
    pub bad_header: bool,
}

pub fn decode_segment(buf: &[u8]) -> Decoded {
    let mut d = Decoded::default();
    let header = (|| {
        if buf.len() < 10 || &buf[..4] != MAGIC {
            return None;
        }
        if u16::from_le_bytes([buf[4], buf[5]]) != VERSION {
            return None;
        }
        let n = u32::from_le_bytes(buf[6..10].try_into().ok()?) as usize;
        let mut pos = 10;
        let mut topics = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let len = u16::from_le_bytes(buf.get(pos..pos + 2)?.try_into().ok()?) as usize;
            pos += 2;
            let s = std::str::from_utf8(buf.get(pos..pos + len)?).ok()?;
            topics.push(Topic::parse(s).ok()?);
            pos += len;
        }
        let crc = u32::from_le_bytes(buf.get(pos..pos + 4)?.try_into().ok()?);
        if crc != crc32fast::hash(&buf[..pos]) {
            return None;
        }
        Some((topics, pos + 4))
    })();
    let Some((topics, mut pos)) = header else {
        d.bad_header = true;
        return d;
    };
    while pos < buf.len() {
        let Some(fixed) = buf.get(pos..pos + 12) else {
            d.corrupt_blocks += 1;
            break;
        };
        let idx = u32::from_le_bytes(fixed[0..4].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(fixed[4..8].try_into().unwrap()) as usize;
        let blen = u32::from_le_bytes(fixed[8..12].try_into().unwrap()) as usize;
        let end = pos + 12 + blen;
        let Some(crc_bytes) = buf.get(end..end + 4) else {
            d.corrupt_blocks += 1;
            break;
        };
        let crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        if crc != crc32fast::hash(&buf[pos..end]) {
            d.corrupt_blocks += 1;
        } else {
            match (topics.get(idx), decode_body(&buf[pos + 12..end], count)) {
                (Some(topic), Some(readings)) => d.runs.push((topic.clone(), readings)),
                _ => d.corrupt_blocks += 1,
            }
        }
        pos = end + 4;
    }
    d
}

/// Segment ids present in `dir`, ascending. Leftover temp files are removed.
pub fn list_segments(dir: &Path) -> io::Result<Vec<u64>> {
    scan_segments(dir, true)
}

/// Segment ids present in `dir`, ascending, leaving temp files alone so a
/// concurrent writer is undisturbed.
pub fn peek_segments(dir: &Path) -> io::Result<Vec<u64>> {
    scan_segments(dir, false)
}

fn scan_segments(dir: &Path, clean: bool) -> io::Result<Vec<u64>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        match path.extension().and_then(|e| e.to_str()) {
            Some(EXT) => {
                if let Some(id) = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .and_then(|s| s.parse().ok())
                {
                    ids.push(id);
                }
            }
            Some("tmp") if clean => {
                let _ = fs::remove_file(&path);
            }
            _ => {}
        }
    }
    ids.sort_unstable();
    Ok(ids)
}
