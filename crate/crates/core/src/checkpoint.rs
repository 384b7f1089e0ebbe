//! Versioned container for named f64 arrays plus JSON metadata.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, the JSON
//! header, then every tensor's data as little-endian f64 in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use wspace_tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::imageio;
use crate::util::sha256_hex;

pub const MAGIC: &[u8; 8] = b"WSPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub format_version: u32,
    pub config: serde_json::Value,
    pub dataset_hash: Option<String>,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    /// Kind-specific payload such as a vocabulary or a frozen-model hash.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: CheckpointMeta, params: &ParamStore) -> Self {
        let meta = CheckpointMeta { kind: kind.to_string(), format_version: FORMAT_VERSION, ..meta };
        let tensors = params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        Checkpoint { meta, tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.tensors.iter().map(|(_, t)| t.numel()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.meta.format_version != FORMAT_VERSION {
            return Err(bad("header format version mismatch"));
        }
        let mut pos = 20 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", e.name)))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((e.name, Tensor::new(e.shape, data)));
            pos += 8 * n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint { meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        imageio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&imageio::read_file(path)?)
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.meta.kind)));
        }
        Ok(())
    }

    /// Overwrite every parameter of `store` from this checkpoint by name.
    pub fn fill(&self, store: &mut ParamStore) -> Result<()> {
        let map: BTreeMap<&str, &Tensor> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        store.load_named(|n| map.get(n).map(|t| (*t).clone())).map_err(Error::Checkpoint)?;
        if map.len() != store.len() {
            return Err(Error::Checkpoint(format!("checkpoint has {} tensors, model expects {}", map.len(), store.len())));
        }
        Ok(())
    }

    pub fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta.config.clone())?)
    }
}

/// Models that persist through the shared container.
pub trait Persist: Sized {
    const KIND: &'static str;

    fn to_checkpoint(&self) -> Checkpoint;

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self>;

    fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        ckpt.expect_kind(Self::KIND)?;
        Self::from_checkpoint(&ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ps = ParamStore::new();
        ps.add("a.w", Tensor::new(vec![2, 2], vec![1.0, -2.5, f64::MIN_POSITIVE, 3.0e300]));
        ps.add("b", Tensor::scalar(0.1));
        let meta = CheckpointMeta { seed: 9, config: serde_json::json!({"x": 1}), ..Default::default() };
        Checkpoint::new("test", meta, &ps)
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta.format_version, FORMAT_VERSION);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut b = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        b[8] = 99;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Checkpoint(m)) if m.contains("version")));
        assert!(Checkpoint::from_bytes(b"nonsense nonsense nonsense").is_err());
    }

    #[test]
    fn fill_requires_matching_names() {
        let c = sample();
        let mut ps = ParamStore::new();
        ps.add("a.w", Tensor::zeros(vec![2, 2]));
        assert!(c.fill(&mut ps).is_err(), "extra tensor in checkpoint must be reported");
        ps.add("b", Tensor::scalar(0.0));
        c.fill(&mut ps).unwrap();
        assert_eq!(ps.values()[1].item(), 0.1);
    }
}
