//! Versioned checkpoint files.
//!
//! Layout: a magic line, one line of JSON describing the contents, then the
//! raw little-endian `f64` payload (parameters, Adam first moments, Adam
//! second moments, each in header order).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "plumeseg-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// ChaCha8 position: key, stream and word offset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// Completed epochs.
    pub epoch: usize,
    /// Samples already consumed in the current epoch.
    pub cursor: usize,
    /// Loss summed over those samples.
    pub partial_loss: f64,
    pub step: u64,
    pub config: RunConfig,
    pub rng: RngState,
    pub adam: AdamState,
    pub params: Vec<TensorEntry>,
    pub history: Vec<EpochStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<Tensor>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&self.header).expect("header serializes");
        let mut out = format!("{MAGIC} v{VERSION}\n{header}\n").into_bytes();
        for t in self.params.iter().chain(&self.adam_m).chain(&self.adam_v) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing magic line"))?;
        let magic = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("missing magic line"))?;
        let version = magic
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| bad("not a plumeseg checkpoint"))?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {VERSION})"
            )));
        }
        let rest = &bytes[nl + 1..];
        let hl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&rest[..hl]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let payload = &rest[hl + 1..];
        let per_copy: usize = header.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if payload.len() != 3 * per_copy * 8 {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, header describes {}",
                payload.len(),
                3 * per_copy * 8
            )));
        }
        let mut words = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut section = || -> Vec<Tensor> {
            header
                .params
                .iter()
                .map(|e| {
                    let n = e.shape.iter().product();
                    Tensor::new(&e.shape, words.by_ref().take(n).collect())
                })
                .collect()
        };
        let params = section();
        let adam_m = section();
        let adam_v = section();
        Ok(Self {
            header,
            params,
            adam_m,
            adam_v,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn file.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// File name of the checkpoint written after `epoch` (1-based).
pub fn epoch_file_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.ckpt")
}

/// Checkpoint with the highest epoch number in `dir`.
pub fn latest_in(dir: &Path) -> Result<Option<std::path::PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let epoch = name
            .strip_prefix("epoch-")
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, p));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}
