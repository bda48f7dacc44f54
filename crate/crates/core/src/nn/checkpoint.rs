//! Binary checkpoint layout:
//!
//! ```text
//! magic    8 bytes  "MSTDPCKP"
//! version  u32 LE
//! hlen     u64 LE   length of the JSON header
//! header   hlen bytes of UTF-8 JSON {config, metadata, params: [{name, shape}]}
//! values   f64 LE, parameters in header order, row-major
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::synth::io::write_atomic;

pub const MAGIC: &[u8; 8] = b"MSTDPCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    metadata: serde_json::Value,
    params: Vec<ParamEntry>,
}

/// Parameters plus free-form configuration and training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub metadata: serde_json::Value,
    pub store: ParameterStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            params: self
                .store
                .iter()
                .map(|(_, p)| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.store.n_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        let mut values = body[hlen..].chunks_exact(8);
        if values.remainder().len() != 0 {
            return Err(bad("value block is not a whole number of f64"));
        }
        let expected: usize = header.params.iter().map(|p| p.shape[0] * p.shape[1]).sum();
        if values.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} values, found {}",
                values.len()
            )));
        }
        let mut store = ParameterStore::new();
        for p in &header.params {
            let n = p.shape[0] * p.shape[1];
            let data = values
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.add(p.name.clone(), Tensor::from_vec(p.shape[0], p.shape[1], data)?)?;
        }
        Ok(Self {
            config: header.config,
            metadata: header.metadata,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParameterStore::new();
        store.add("a.w", Tensor::from_vec(2, 2, vec![1.0, -0.5, 1e-300, f64::MAX]).unwrap()).unwrap();
        store.add("a.b", Tensor::row_vector(vec![0.25, 3.0])).unwrap();
        Checkpoint {
            config: serde_json::json!({"d": 4}),
            metadata: serde_json::json!({"epoch": 3}),
            store,
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[21] = b'#';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    }
}
