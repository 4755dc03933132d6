//! Checkpoint container: magic `GMOE`, a JSON header with the config and
//! step counter, then named f64 tensors. Round-trips are bit-exact.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{DecoderConfig, DecoderParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GMOE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: DecoderConfig,
    /// Optimizer steps taken when the snapshot was written.
    pub step: u64,
}

/// A snapshot of model parameters and, optionally, optimizer state stored
/// as extra tensors (by convention under the `adam.` prefix).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = serde_json::to_vec(&ckpt.meta)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(ckpt.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &ckpt.tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &dim in t.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!(
            "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    r.read_exact(&mut word)?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let meta: CheckpointMeta = serde_json::from_slice(&header)
        .map_err(|e| Error::format(format!("checkpoint header is not valid JSON: {e}")))?;

    r.read_exact(&mut word)?;
    let count = u32::from_le_bytes(word) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut word)?;
        let name_len = u32::from_le_bytes(word) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format("tensor name is not UTF-8"))?;
        r.read_exact(&mut word)?;
        let ndim = u32::from_le_bytes(word) as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut dim_bytes = [0u8; 8];
        for _ in 0..ndim {
            r.read_exact(&mut dim_bytes)?;
            shape.push(u64::from_le_bytes(dim_bytes) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 8];
        r.read_exact(&mut payload).map_err(|_| {
            Error::format(format!("checkpoint tensor {name:?} payload truncated"))
        })?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.push((name, Tensor::from_vec(shape, data)?));
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(Error::format("checkpoint has trailing bytes"));
    }
    Ok(Checkpoint { meta, tensors })
}

impl DecoderParams {
    /// Snapshot of the parameters alone; the training loop appends its
    /// optimizer tensors before saving.
    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                config: self.config,
                step,
            },
            tensors: self
                .named()
                .into_iter()
                .map(|(name, t)| (name, t.clone()))
                .collect(),
        }
    }

    /// Rebuilds parameters from a checkpoint's tensors, checking that every
    /// expected name is present with the right shape. Extra tensors (such
    /// as optimizer state) are ignored here.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let map: HashMap<&str, &Tensor> = ckpt
            .tensors
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        let mut params = Self::zeros(&ckpt.meta.config)?;
        let mut problem: Option<Error> = None;
        params.visit_mut(|name, t| {
            if problem.is_some() {
                return;
            }
            match map.get(name.as_str()) {
                None => {
                    problem = Some(Error::format(format!(
                        "checkpoint is missing tensor {name:?}"
                    )));
                }
                Some(src) if src.shape() != t.shape() => {
                    problem = Some(Error::format(format!(
                        "checkpoint tensor {name:?} has shape {:?}, expected {:?}",
                        src.shape(),
                        t.shape()
                    )));
                }
                Some(src) => {
                    *t = (*src).clone().with_requires_grad(true);
                }
            }
        });
        match problem {
            Some(e) => Err(e),
            None => Ok(params),
        }
    }
}
