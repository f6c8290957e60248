//! `CARD-CK1` checkpoint files: a key=value config blob followed by named f32 arrays.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::params::ModelParams;
use super::tensor::Tensor;
use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 8] = b"CARD-CK1";
pub const VERSION: u32 = 1;

const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;
const MAX_ELEMENTS: usize = 1 << 28;

fn format_err(reason: impl Into<String>) -> LabError {
    LabError::Format {
        what: "checkpoint",
        reason: reason.into(),
    }
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// UTF-8 `key = value` lines.
    pub config: String,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(config: String) -> Self {
        Self { config, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.arrays.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Add every parameter array, each name prefixed with `prefix`.
    pub fn push_params(&mut self, prefix: &str, params: &ModelParams<f32>) {
        for (name, t) in params.named() {
            self.push(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Rebuild parameters stored under `prefix`; every array must be present with the right shape.
    pub fn params(&self, prefix: &str, cfg: &ModelConfig) -> Result<ModelParams<f32>> {
        let mut params = ModelParams::<f32>::zeros(cfg);
        for (name, slot) in params.named_mut() {
            let key = format!("{prefix}{name}");
            let found = self
                .get(&key)
                .ok_or_else(|| format_err(format!("missing array '{key}'")))?;
            if found.shape != slot.shape {
                return Err(format_err(format!(
                    "array '{key}' has shape {:?}, expected {:?}",
                    found.shape, slot.shape
                )));
            }
            slot.data.copy_from_slice(&found.data);
        }
        Ok(params)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_len(w, self.config.len())?;
        w.write_all(self.config.as_bytes())?;
        for (name, t) in &self.arrays {
            write_len(w, name.len())?;
            w.write_all(name.as_bytes())?;
            let rank = u8::try_from(t.shape.len()).map_err(|_| format_err("rank too large"))?;
            w.write_all(&[rank])?;
            for &dim in &t.shape {
                write_len(w, dim)?;
            }
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for x in &t.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| format_err("file too short for magic"))?;
        if &magic != MAGIC {
            return Err(format_err("bad magic, not a CARD-CK1 checkpoint"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(format_err(format!("unsupported format version {version}")));
        }
        let blob_len = read_u32(r)? as usize;
        let config = read_string(r, blob_len, usize::MAX >> 1)?;
        let mut ck = Checkpoint::new(config);
        while let Some(name_len) = read_u32_or_eof(r)? {
            let name = read_string(r, name_len as usize, MAX_NAME)?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank).map_err(truncated)?;
            let rank = usize::from(rank[0]);
            if rank > MAX_RANK {
                return Err(format_err(format!("array '{name}' has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r)? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&c| c <= MAX_ELEMENTS)
                .ok_or_else(|| format_err(format!("array '{name}' is too large")))?;
            let mut raw = vec![0u8; count * 4];
            r.read_exact(&mut raw).map_err(truncated)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if ck.get(&name).is_some() {
                return Err(format_err(format!("duplicate array '{name}'")));
            }
            ck.push(name, Tensor { shape, data });
        }
        Ok(ck)
    }

    /// Write to `path` through a temporary sibling file and rename, so a failed
    /// write never leaves a half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn truncated(_: io::Error) -> LabError {
    format_err("unexpected end of file")
}

fn write_len<W: Write>(w: &mut W, len: usize) -> Result<()> {
    let v = u32::try_from(len).map_err(|_| format_err("length does not fit in u32"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

/// Like [`read_u32`], but a clean end of input before the first byte yields `None`.
fn read_u32_or_eof<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut b[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(format_err("unexpected end of file")),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(u32::from_le_bytes(b)))
}

fn read_string<R: Read>(r: &mut R, len: usize, max: usize) -> Result<String> {
    if len > max {
        return Err(format_err(format!("string of {len} bytes exceeds limit")));
    }
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(format_err("unexpected end of file"));
    }
    String::from_utf8(buf).map_err(|_| format_err("string is not valid UTF-8"))
}
