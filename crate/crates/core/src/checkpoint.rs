//! Binary containers for parameters.
//!
//! Both formats store named blobs as
//! `u32 name_len | name (UTF-8) | u32 rows | u32 cols | rows*cols f32`, all
//! little-endian.
//!
//! * Flat weight file: `b"RCLWTS01" | u32 count | blobs`.
//! * Checkpoint: `b"RCLCKPT\0" | u32 version | u32 len | config JSON |
//!   u32 len | state JSON | u32 count | blobs | sha256(all preceding bytes)`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"RCLCKPT\0";
const WEIGHTS_MAGIC: &[u8; 8] = b"RCLWTS01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch")]
    Checksum,
    #[error("truncated or malformed data: {0}")]
    Malformed(String),
}

/// Named matrix stored as 32-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Blob {
    pub fn from_array(name: impl Into<String>, a: &Array2<f64>) -> Self {
        Self {
            name: name.into(),
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_vec(
            (self.rows, self.cols),
            self.data.iter().map(|&x| x as f64).collect(),
        )
        .expect("blob shape matches data")
    }

    pub fn bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_blob(buf: &mut Vec<u8>, b: &Blob) {
    put_u32(buf, b.name.len());
    buf.extend_from_slice(b.name.as_bytes());
    put_u32(buf, b.rows);
    put_u32(buf, b.cols);
    for x in &b.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed(format!("need {n} bytes at {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| CheckpointError::Malformed(e.to_string()))
    }

    fn blob(&mut self) -> Result<Blob, CheckpointError> {
        let name = self.string()?;
        let rows = self.u32()?;
        let cols = self.u32()?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: oversized")))?;
        let data = self
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Blob {
            name,
            rows,
            cols,
            data,
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn encode_flat_weights(blobs: &[Blob]) -> Vec<u8> {
    let mut buf = WEIGHTS_MAGIC.to_vec();
    put_u32(&mut buf, blobs.len());
    for b in blobs {
        put_blob(&mut buf, b);
    }
    buf
}

pub fn decode_flat_weights(bytes: &[u8]) -> Result<Vec<Blob>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != WEIGHTS_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let n = r.u32()?;
    (0..n).map(|_| r.blob()).collect()
}

pub fn write_flat_weights(path: &Path, blobs: &[Blob]) -> Result<(), CheckpointError> {
    write_file(path, &encode_flat_weights(blobs))
}

pub fn read_flat_weights(path: &Path) -> Result<Vec<Blob>, CheckpointError> {
    decode_flat_weights(&read_file(path)?)
}

/// Self-describing checkpoint: configuration echo, free-form state and blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_json: String,
    pub state_json: String,
    pub blobs: Vec<Blob>,
}

impl Checkpoint {
    pub fn new(config_json: String, state_json: String, blobs: Vec<Blob>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config_json,
            state_json,
            blobs,
        }
    }

    pub fn blob(&self, name: &str) -> Option<&Blob> {
        self.blobs.iter().find(|b| b.name == name)
    }

    /// Blobs whose names start with `prefix`, with the prefix stripped.
    pub fn group<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Blob)> {
        self.blobs
            .iter()
            .filter_map(move |b| b.name.strip_prefix(prefix).map(|n| (n, b)))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = CHECKPOINT_MAGIC.to_vec();
        buf.extend_from_slice(&self.version.to_le_bytes());
        put_u32(&mut buf, self.config_json.len());
        buf.extend_from_slice(self.config_json.as_bytes());
        put_u32(&mut buf, self.state_json.len());
        buf.extend_from_slice(self.state_json.as_bytes());
        put_u32(&mut buf, self.blobs.len());
        for b in &self.blobs {
            put_blob(&mut buf, b);
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 + 4 + 32 {
            return Err(CheckpointError::Malformed("too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if body[..8] != CHECKPOINT_MAGIC[..] {
            return Err(CheckpointError::BadMagic);
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config_json = r.string()?;
        let state_json = r.string()?;
        let n = r.u32()?;
        let blobs = (0..n).map(|_| r.blob()).collect::<Result<_, _>>()?;
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Self {
            version,
            config_json,
            state_json,
            blobs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&read_file(path)?)
    }
}
