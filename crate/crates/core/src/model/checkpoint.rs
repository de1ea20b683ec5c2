//! Binary checkpoint container.
//!
//! ```text
//! magic   8 bytes  "MOLCKPT\0"
//! version u32 LE   1
//! hlen    u64 LE   length of the JSON header in bytes
//! header  hlen bytes of UTF-8 JSON (architecture, adapter and optimiser
//!         metadata, RNG state, free-form metadata, tensor table)
//! payload every tensor of the table in order, as f32 LE
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adapter::{AdapterSet, AdapterTarget};
use super::optim::{AdamConfig, AdamState};
use super::params::{ModelArch, Params};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MOLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Position of the data-shuffling stream: the seed and the next epoch index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdapterMeta {
    rank: usize,
    scale: f64,
    targets: Vec<AdapterTarget>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimMeta {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    arch: ModelArch,
    adapter: Option<AdapterMeta>,
    optimizer: Option<OptimMeta>,
    rng: Option<RngState>,
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ModelArch,
    pub base: Params<f32>,
    pub adapters: Option<AdapterSet<f32>>,
    /// Optimiser state for the adapters (or for the base during pre-training).
    pub optimizer: Option<AdamState<f32>>,
    pub rng: Option<RngState>,
    pub meta: BTreeMap<String, String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(arch: ModelArch, base: Params<f32>) -> Self {
        Self {
            arch,
            base,
            adapters: None,
            optimizer: None,
            rng: None,
            meta: BTreeMap::new(),
        }
    }

    fn tensor_table(&self) -> Vec<(String, &[f32])> {
        let mut out = self.base.slots();
        if let Some(a) = &self.adapters {
            out.extend(a.slots().into_iter().map(|(n, s)| (format!("adapter.{n}"), s)));
        }
        if let Some(o) = &self.optimizer {
            out.extend(o.m.iter().enumerate().map(|(i, s)| (format!("adam_m.{i}"), s.as_slice())));
            out.extend(o.v.iter().enumerate().map(|(i, s)| (format!("adam_v.{i}"), s.as_slice())));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let table = self.tensor_table();
        let header = Header {
            format: "molcpt-checkpoint".into(),
            version: FORMAT_VERSION,
            arch: self.arch.clone(),
            adapter: self.adapters.as_ref().map(|a| AdapterMeta {
                rank: a.rank,
                scale: a.scale,
                targets: a.targets.clone(),
            }),
            optimizer: self.optimizer.as_ref().map(|o| OptimMeta {
                config: o.config,
                step: o.step,
            }),
            rng: self.rng,
            meta: self.meta.clone(),
            tensors: table
                .iter()
                .map(|(n, s)| TensorEntry {
                    name: n.clone(),
                    len: s.len(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let payload: usize = table.iter().map(|(_, s)| s.len() * 4).sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, s) in table {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
        let hlen = u64::from_le_bytes(len) as usize;
        if r.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&r[..hlen]).map_err(|e| bad(e.to_string()))?;
        r = &r[hlen..];
        header.arch.validate()?;

        let mut ck = Checkpoint::new(header.arch.clone(), Params::zeros(&header.arch));
        ck.rng = header.rng;
        ck.meta = header.meta.clone();
        if let Some(a) = &header.adapter {
            ck.adapters = Some(AdapterSet::zeros(&header.arch, a.rank, a.scale, &a.targets)?);
        }
        if let Some(o) = &header.optimizer {
            let sizes: Vec<usize> = header
                .tensors
                .iter()
                .filter(|t| t.name.starts_with("adam_m."))
                .map(|t| t.len)
                .collect();
            let mut st = AdamState::new(o.config, &sizes);
            st.step = o.step;
            ck.optimizer = Some(st);
        }

        let mut targets: Vec<&mut [f32]> = ck.base.slots_mut();
        if let Some(a) = ck.adapters.as_mut() {
            targets.extend(a.slots_mut());
        }
        if let Some(o) = ck.optimizer.as_mut() {
            targets.extend(o.m.iter_mut().map(|v| v.as_mut_slice()));
            targets.extend(o.v.iter_mut().map(|v| v.as_mut_slice()));
        }
        if targets.len() != header.tensors.len() {
            return Err(bad(format!(
                "tensor table lists {} tensors, layout expects {}",
                header.tensors.len(),
                targets.len()
            )));
        }
        for (dst, entry) in targets.into_iter().zip(&header.tensors) {
            if dst.len() != entry.len {
                return Err(bad(format!("tensor {} has length {}, expected {}", entry.name, entry.len, dst.len())));
            }
            let need = entry.len * 4;
            if r.len() < need {
                return Err(bad(format!("payload truncated in {}", entry.name)));
            }
            for (v, chunk) in dst.iter_mut().zip(r[..need].chunks_exact(4)) {
                *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            }
            r = &r[need..];
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> ModelArch {
        ModelArch {
            vocab: 12,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_context: 6,
        }
    }

    #[test]
    fn round_trip_with_adapters_and_optimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = arch();
        let mut ck = Checkpoint::new(a.clone(), Params::init(&a, &mut rng));
        let ad = AdapterSet::init(&a, 2, 1.5, &AdapterTarget::DEFAULT, &mut rng).unwrap();
        let sizes: Vec<usize> = ad.slots().iter().map(|(_, s)| s.len()).collect();
        let mut opt = AdamState::new(AdamConfig::default(), &sizes);
        opt.step = 7;
        opt.m[0][1] = 0.25;
        ck.adapters = Some(ad);
        ck.optimizer = Some(opt);
        ck.rng = Some(RngState { seed: 9, epoch: 2 });
        ck.meta.insert("kind".into(), "student".into());
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_corruption() {
        let a = arch();
        let ck = Checkpoint::new(a.clone(), Params::zeros(&a));
        let mut bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
