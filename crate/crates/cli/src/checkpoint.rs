//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes   "UNIMATCH"
//! version  u32 LE
//! meta     u32 LE length, UTF-8 text (config snapshot plus run facts)
//! count    u32 LE number of tensor records
//! record   u16 LE name length, name bytes,
//!          u8 rank, u32 LE per dimension,
//!          f32 LE values (row-major),
//!          u32 LE CRC-32 over name, dims and values
//! ```

use std::io::{self, Read};
use std::path::Path;

use unimatch::{ModelParams, Tensor};

use crate::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"UNIMATCH";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    Format(String),
    Checksum(String),
}

impl std::fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint I/O: {e}"),
            CheckpointError::Format(m) => write!(f, "malformed checkpoint: {m}"),
            CheckpointError::Checksum(name) => write!(f, "checksum mismatch in tensor {name}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Format("truncated file".into())
        } else {
            CheckpointError::Io(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub params: ModelParams,
}

fn build_tag() -> String {
    format!("unimatch-v{}", env!("CARGO_PKG_VERSION"))
}

impl Checkpoint {
    fn metadata(&self) -> String {
        format!(
            "{}\n# epoch = {}\n# seed = {}\n# build = {}\n",
            self.config.to_text(),
            self.epoch,
            self.config.train.seed,
            build_tag()
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = self.metadata();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        let named = self.params.named();
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            let body = out.len();
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            let crc = crc32fast::hash(&out[body..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        out
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let meta = take(&mut r, meta_len)?;
        let meta = std::str::from_utf8(meta)
            .map_err(|_| CheckpointError::Format("metadata is not UTF-8".into()))?;
        let config = RunConfig::parse(meta).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let epoch = meta
            .lines()
            .find_map(|l| l.strip_prefix("# epoch = "))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| CheckpointError::Format("metadata lacks the epoch".into()))?;

        let count = read_u32(&mut r)? as usize;
        let mut records = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut r, 2)?.try_into().unwrap()) as usize;
            let body_start = r;
            let name = std::str::from_utf8(take(&mut r, name_len)?)
                .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = take(&mut r, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut r, n.checked_mul(4).ok_or_else(|| {
                CheckpointError::Format(format!("tensor {name} is too large"))
            })?)?;
            let body_len = body_start.len() - r.len();
            let crc = read_u32(&mut r)?;
            if crc32fast::hash(&body_start[..body_len]) != crc {
                return Err(CheckpointError::Checksum(name));
            }
            if rank == 0 || shape.contains(&0) {
                return Err(CheckpointError::Format(format!("tensor {name} has an empty shape")));
            }
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            records.push((name, Tensor::new(shape, data)));
        }
        if !r.is_empty() {
            return Err(CheckpointError::Format("trailing bytes".into()));
        }

        let mut params = ModelParams::zeros(&config.model);
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != records.len() {
            return Err(CheckpointError::Format(format!(
                "expected {} tensors, found {}",
                names.len(),
                records.len()
            )));
        }
        for ((want, slot), (name, t)) in names.iter().zip(params.leaves_mut()).zip(records) {
            if *want != name {
                return Err(CheckpointError::Format(format!("expected tensor {want}, found {name}")));
            }
            if slot.shape() != t.shape() {
                return Err(CheckpointError::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(Checkpoint {
            config,
            epoch,
            params,
        })
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8], CheckpointError> {
    if r.len() < n {
        return Err(CheckpointError::Format("truncated file".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8]) -> Result<u32, CheckpointError> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().unwrap()))
}
