//! Binary checkpoint container.
//!
//! ```text
//! magic "INPTCKPT" | version u32 | header_len u64 | header JSON | tensor blobs
//! ```
//!
//! The JSON header lists every tensor (group, name, shape) in blob order;
//! blobs are little-endian in the header's dtype.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::data::Sampler;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"INPTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: TrainConfig,
    pub state: TrainState,
    pub dtype: String,
    pub rng: ChaCha8Rng,
    pub data_rng: ChaCha8Rng,
    pub sampler: Sampler,
    pub g_adam_step: u64,
    pub d_adam_step: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint: header plus named tensors per group.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub header: CheckpointHeader,
    pub groups: BTreeMap<String, Vec<(String, Tensor<T>)>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn take_group(&mut self, group: &str) -> Result<Vec<(String, Tensor<T>)>> {
        self.groups
            .remove(group)
            .ok_or_else(|| Error::Validation(format!("checkpoint has no {group} tensors")))
    }

    /// Tensors only, in stored order.
    pub fn take_tensors(&mut self, group: &str) -> Result<Vec<Tensor<T>>> {
        Ok(self.take_group(group)?.into_iter().map(|(_, t)| t).collect())
    }
}

/// A named group of named tensors, written in order.
pub type TensorGroup<'a, T> = (&'a str, Vec<(&'a str, &'a Tensor<T>)>);

pub fn write_checkpoint<T: Scalar>(path: &Path, mut header: CheckpointHeader, groups: &[TensorGroup<'_, T>]) -> Result<()> {
    header.dtype = T::DTYPE.to_string();
    header.tensors = groups
        .iter()
        .flat_map(|(g, ts)| ts.iter().map(move |(n, t)| TensorEntry { group: g.to_string(), name: n.to_string(), shape: t.shape().to_vec() }))
        .collect();
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 64);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, ts) in groups {
        for (_, t) in ts {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    // Write then rename so a crash never leaves a truncated checkpoint.
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&out)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_blob<T: Scalar>(bytes: &[u8], dtype: &str) -> Result<(T, usize)> {
    match dtype {
        "f32" => {
            let b: [u8; 4] = bytes.get(..4).and_then(|b| b.try_into().ok()).ok_or(Error::Validation("truncated tensor data".into()))?;
            Ok((T::from_f64_lossy(f32::from_le_bytes(b) as f64), 4))
        }
        "f64" => {
            let b: [u8; 8] = bytes.get(..8).and_then(|b| b.try_into().ok()).ok_or(Error::Validation("truncated tensor data".into()))?;
            Ok((T::from_f64_lossy(f64::from_le_bytes(b)), 8))
        }
        other => Err(Error::Validation(format!("unsupported checkpoint dtype {other}"))),
    }
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let load_err = |reason: String| Error::Load { path: path.to_path_buf(), reason };
    let bytes = fs::read(path).map_err(|e| load_err(e.to_string()))?;
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(load_err("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(20..20 + len).ok_or_else(|| load_err("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| load_err(format!("bad header: {e}")))?;
    let mut pos = 20 + len;
    let mut groups: BTreeMap<String, Vec<(String, Tensor<T>)>> = BTreeMap::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let (v, used) = read_blob::<T>(&bytes[pos..], &header.dtype).map_err(|e| load_err(e.to_string()))?;
            data.push(v);
            pos += used;
        }
        groups.entry(entry.group.clone()).or_default().push((entry.name.clone(), Tensor::from_vec(&entry.shape, data)?));
    }
    if pos != bytes.len() {
        return Err(load_err(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(Checkpoint { header, groups })
}
