//! The "VGF1" binary feature container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "VGF1" | u16 version | u32 T | u32 T_original | u16 N | u16 d_obj
//! | u8 query_mode | u16 query_rows | u16 query_dim
//! | picks u32×T | objects f32×T·N·d_obj | class_ids u16×T·N
//! | u16 class count, then per class u16 byte length + UTF-8 bytes
//! | query f32×query_rows·query_dim
//! | u8 flags
//! | [bit0] gt_binary u8×T
//! | [bit1] u16 users, gt_scores f32×users·T
//! | [bit2] confidences f32×T·N
//! | [bit3] first 8 bytes of SHA-256 over every preceding byte
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::FeatureSet;
use crate::error::{Error, Result};
use crate::model::QueryMode;

pub const MAGIC: &[u8; 4] = b"VGF1";
pub const VERSION: u16 = 1;

const FLAG_BINARY: u8 = 1;
const FLAG_SCORES: u8 = 2;
const FLAG_CONF: u8 = 4;
const FLAG_CHECKSUM: u8 = 8;

fn checksum(bytes: &[u8]) -> [u8; 8] {
    let digest = Sha256::digest(bytes);
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    out
}

fn put_u16(buf: &mut Vec<u8>, what: &str, v: usize) -> Result<()> {
    let v = u16::try_from(v).map_err(|_| Error::Config(format!("{what}={v} does not fit the container")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_u32(buf: &mut Vec<u8>, what: &str, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("{what}={v} does not fit the container")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(buf: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serialises a feature set; always appends the checksum.
pub fn encode(fs: &FeatureSet) -> Result<Vec<u8>> {
    fs.validate()?;
    let t = fs.frames();
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut b, "T", t)?;
    put_u32(&mut b, "T_original", fs.t_original)?;
    put_u16(&mut b, "N", fs.objects_per_frame)?;
    put_u16(&mut b, "d_obj", fs.d_obj)?;
    b.push(fs.query_mode.code());
    put_u16(&mut b, "query_rows", fs.query_rows)?;
    put_u16(&mut b, "query_dim", fs.query_dim)?;
    for &p in &fs.picks {
        put_u32(&mut b, "pick", p)?;
    }
    put_f32s(&mut b, &fs.objects);
    for &c in &fs.class_ids {
        b.extend_from_slice(&c.to_le_bytes());
    }
    put_u16(&mut b, "class count", fs.class_names.len())?;
    for name in &fs.class_names {
        put_u16(&mut b, "class name length", name.len())?;
        b.extend_from_slice(name.as_bytes());
    }
    put_f32s(&mut b, &fs.query);
    let mut flags = FLAG_CHECKSUM;
    if fs.gt_binary.is_some() {
        flags |= FLAG_BINARY;
    }
    if fs.gt_scores.is_some() {
        flags |= FLAG_SCORES;
    }
    if fs.confidences.is_some() {
        flags |= FLAG_CONF;
    }
    b.push(flags);
    if let Some(g) = &fs.gt_binary {
        b.extend_from_slice(g);
    }
    if let Some(users) = &fs.gt_scores {
        put_u16(&mut b, "users", users.len())?;
        for u in users {
            put_f32s(&mut b, u);
        }
    }
    if let Some(c) = &fs.confidences {
        put_f32s(&mut b, c);
    }
    let sum = checksum(&b);
    b.extend_from_slice(&sum);
    Ok(b)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("size overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses a container; errors name the byte offset where parsing stopped.
pub fn decode(bytes: &[u8], video_id: &str) -> Result<FeatureSet> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        c.pos = 0;
        return Err(c.err("bad magic, expected VGF1"));
    }
    let version = c.u16("version")?;
    if version != VERSION {
        c.pos -= 2;
        return Err(c.err(format!("unsupported version {version}")));
    }
    let t = c.u32("T")? as usize;
    if t == 0 {
        c.pos -= 4;
        return Err(c.err("T must be >= 1"));
    }
    let t_original = c.u32("T_original")? as usize;
    let n = c.u16("N")? as usize;
    let d_obj = c.u16("d_obj")? as usize;
    if n == 0 || d_obj == 0 {
        return Err(c.err("N and d_obj must be >= 1"));
    }
    let mode_code = c.u8("query_mode")?;
    let query_mode = QueryMode::from_code(mode_code).ok_or_else(|| {
        let mut e = c.err(format!("unknown query mode {mode_code}"));
        if let Error::Parse { offset, .. } = &mut e {
            *offset -= 1;
        }
        e
    })?;
    let query_rows = c.u16("query_rows")? as usize;
    let query_dim = c.u16("query_dim")? as usize;
    let header_end = c.pos;

    let mut picks = Vec::with_capacity(t);
    for _ in 0..t {
        picks.push(c.u32("picks")? as usize);
    }
    let objects = c.f32s(t * n * d_obj, "objects")?;
    let class_bytes = c.take(t * n * 2, "class_ids")?;
    let class_ids: Vec<u16> = class_bytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    let n_classes = c.u16("class count")? as usize;
    let mut class_names = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let len = c.u16("class name length")? as usize;
        let start = c.pos;
        let raw = c.take(len, "class name")?;
        let name = std::str::from_utf8(raw).map_err(|_| Error::Parse {
            offset: start,
            msg: "class name is not UTF-8".into(),
        })?;
        class_names.push(name.to_string());
    }
    let query = c.f32s(query_rows * query_dim, "query")?;
    let flags = c.u8("flags")?;
    if flags & !(FLAG_BINARY | FLAG_SCORES | FLAG_CONF | FLAG_CHECKSUM) != 0 {
        c.pos -= 1;
        return Err(c.err(format!("unknown flag bits {flags:#04x}")));
    }
    let gt_binary = if flags & FLAG_BINARY != 0 {
        Some(c.take(t, "gt_binary")?.to_vec())
    } else {
        None
    };
    let gt_scores = if flags & FLAG_SCORES != 0 {
        let users = c.u16("users")? as usize;
        let mut v = Vec::with_capacity(users);
        for _ in 0..users {
            v.push(c.f32s(t, "gt_scores")?);
        }
        Some(v)
    } else {
        None
    };
    let confidences = if flags & FLAG_CONF != 0 {
        Some(c.f32s(t * n, "confidences")?)
    } else {
        None
    };
    if flags & FLAG_CHECKSUM != 0 {
        let body_end = c.pos;
        let stored = c.take(8, "checksum")?;
        if stored != checksum(&bytes[..body_end]) {
            c.pos = body_end;
            return Err(c.err("checksum mismatch"));
        }
    }
    if c.pos != bytes.len() {
        return Err(c.err(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let fs = FeatureSet {
        video_id: video_id.to_string(),
        t_original,
        picks,
        objects_per_frame: n,
        d_obj,
        objects,
        class_ids,
        class_names,
        query_mode,
        query_rows,
        query_dim,
        query,
        gt_binary,
        gt_scores,
        confidences,
    };
    fs.validate().map_err(|e| Error::Parse {
        offset: header_end,
        msg: e.to_string(),
    })?;
    Ok(fs)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reads a container; the video id is the file stem.
pub fn read_features(path: &Path) -> Result<FeatureSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    decode(&bytes, &stem(path)).map_err(|e| e.context(path.display().to_string()))
}

pub fn write_features(fs: &FeatureSet, path: &Path) -> Result<()> {
    let bytes = encode(fs)?;
    std::fs::write(path, bytes).map_err(|e| Error::from(e).context(path.display().to_string()))
}
