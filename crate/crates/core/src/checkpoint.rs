//! Checkpoint persistence.
//!
//! Layout of a checkpoint file:
//!   "FFCK1\n"
//!   key=value header lines in insertion order, then "end_header\n"
//!   u32 tensor count
//!   per tensor: u32 name length | name bytes | u32 rank | u32 x rank
//!   extents | f64 little-endian data
//!
//! Headers are ordered pairs and tensor data is stored at full precision,
//! so save -> load -> save is byte-identical.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"FFCK1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "FFCK1",
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        for (k, v) in &self.header {
            if k.contains(['=', '\n']) || v.contains('\n') || k == "end_header" {
                return Err(bad(format!("unserializable header entry: {k}")));
            }
            buf.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        buf.extend_from_slice(b"end_header\n");
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                buf.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path)?;
        if raw.len() < MAGIC.len() || &raw[..MAGIC.len()] != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut pos = MAGIC.len();
        let mut header = Vec::new();
        loop {
            let nl = raw[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("unterminated header"))?;
            let line = std::str::from_utf8(&raw[pos..pos + nl]).map_err(|_| bad("non-utf8 header"))?;
            pos += nl + 1;
            if line == "end_header" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed header line: {line}")))?;
            header.push((k.to_string(), v.to_string()));
        }

        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > raw.len() {
                return Err(bad("unexpected end of file"));
            }
            let s = &raw[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().expect("4 bytes")))
        };

        let count = read_u32(&mut pos)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut pos)? as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| bad("non-utf8 tensor name"))?
                .to_string();
            let rank = read_u32(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut pos)? as usize);
            }
            let numel: usize = shape.iter().product();
            let bytes = take(&mut pos, numel * 8)?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if pos != raw.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { header, tensors })
    }
}
