//! Checkpoints: a little-endian tensor blob plus a JSON manifest.
//!
//! Each tensor record is `u32 rank`, `rank × u64 extents`, then the `f64`
//! payload. The manifest maps parameter names to record offsets.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const FORMAT: &str = "clsnav-checkpoint-v1";
pub const TENSOR_FILE: &str = "tensors.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    /// `pretrain` or `segment`.
    pub stage: String,
    pub model: ModelConfig,
    pub vocabulary: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    /// Snapshot of the run configuration that produced the checkpoint.
    #[serde(default)]
    pub run: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor>,
}

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Decodes one record at `offset`, returning the tensor and the next offset.
pub fn decode_tensor(buf: &[u8], offset: usize) -> std::result::Result<(Tensor, usize), String> {
    let take = |at: usize, n: usize| -> std::result::Result<&[u8], String> {
        buf.get(at..at + n)
            .ok_or_else(|| format!("truncated record at byte {at}"))
    };
    let rank = u32::from_le_bytes(take(offset, 4)?.try_into().unwrap()) as usize;
    if rank == 0 || rank > 8 {
        return Err(format!("implausible rank {rank} at byte {offset}"));
    }
    let mut at = offset + 4;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(take(at, 8)?.try_into().unwrap()) as usize);
        at += 8;
    }
    let n: usize = shape.iter().product();
    let payload = take(at, n * 8)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
    Ok((t, at + n * 8))
}

impl Checkpoint {
    /// Snapshot of every parameter whose name satisfies `keep`, in store order.
    pub fn from_store(
        store: &ParamStore,
        keep: impl Fn(&str) -> bool,
        stage: &str,
        model: &ModelConfig,
        vocabulary: &[String],
    ) -> Self {
        let mut entries = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        for (_, name, t) in store.iter().filter(|(_, n, _)| keep(n)) {
            entries.push(TensorEntry {
                name: name.to_string(),
                offset,
                shape: t.shape().to_vec(),
            });
            offset += 4 + 8 * t.shape().len() as u64 + 8 * t.numel() as u64;
            tensors.push(Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid shape"));
        }
        Self {
            manifest: Manifest {
                format: FORMAT.into(),
                stage: stage.into(),
                model: model.clone(),
                vocabulary: vocabulary.to_vec(),
                tensors: entries,
                metrics: BTreeMap::new(),
                run: serde_json::Value::Null,
            },
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.manifest
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for t in &self.tensors {
            encode_tensor(t, &mut out);
        }
        out
    }

    pub fn manifest_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bin = dir.join(TENSOR_FILE);
        fs::write(&bin, self.blob()).map_err(|e| Error::io(&bin, e))?;
        let man = dir.join(MANIFEST_FILE);
        fs::write(&man, self.manifest_json()).map_err(|e| Error::io(&man, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let man_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: man_path.clone(),
            source: e,
        })?;
        if manifest.format != FORMAT {
            return Err(Error::format(
                &man_path,
                format!("unknown format {:?}", manifest.format),
            ));
        }
        let bin_path = dir.join(TENSOR_FILE);
        let buf = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut end = 0;
        for e in &manifest.tensors {
            let (t, next) = decode_tensor(&buf, e.offset as usize).map_err(|m| Error::format(&bin_path, m))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::format(
                    &bin_path,
                    format!("{}: stored shape {:?}, manifest says {:?}", e.name, t.shape(), e.shape),
                ));
            }
            tensors.push(t);
            end = end.max(next);
        }
        if end != buf.len() {
            return Err(Error::format(&bin_path, format!("{} trailing bytes", buf.len() - end)));
        }
        Ok(Self { manifest, tensors })
    }

    /// Copies every stored tensor into `store`. Each must exist there with
    /// the same shape.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        for (e, t) in self.manifest.tensors.iter().zip(&self.tensors) {
            let id = store
                .id(&e.name)
                .ok_or_else(|| Error::Config(format!("checkpoint tensor {} not in model", e.name)))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    lhs: store.get(id).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            store.get_mut(id).data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}
