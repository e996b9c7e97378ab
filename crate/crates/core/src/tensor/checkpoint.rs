//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | bytes          | content                                              |
//! |----------------|------------------------------------------------------|
//! | `0..4`         | magic `GCKP`                                         |
//! | `4`            | format version, currently `1`                        |
//! | `5..9`         | `u32` length `H` of the JSON index                   |
//! | `9..9+H`       | UTF-8 JSON index `{"meta": …, "tensors": [...]}`     |
//! | `9+H..`        | payload: `f64` values, little-endian, index order    |
//!
//! Each index entry is `{"name", "shape", "offset", "len"}` where `offset`
//! and `len` count `f64` values into the payload. Entries must tile the
//! payload contiguously in order, and `len` must equal the shape product.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GCKP";
pub const VERSION: u8 = 1;
const PREAMBLE: usize = 9;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form metadata; the harness stores the model configuration here.
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Index {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: serde_json::Value) -> Self {
        let tensors = store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.tensor.clone()))
            .collect();
        Self { meta, tensors }
    }

    /// Overwrites every parameter of `store` from this checkpoint. Names and
    /// shapes must match one to one.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {} parameters",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, tensor) in &self.tensors {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name:?}")))?;
            let param = store.get_mut(id);
            if param.tensor.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?}: checkpoint shape {:?}, model shape {:?}",
                    tensor.shape(),
                    param.tensor.shape()
                )));
            }
            param.tensor = tensor.clone();
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    len: t.numel() as u64,
                };
                offset += e.len;
                e
            })
            .collect();
        let index = Index {
            meta: self.meta.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&index).expect("index serializes");
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize * 8);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < PREAMBLE {
            return Err(bad("truncated preamble"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {VERSION})",
                bytes[4]
            )));
        }
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let header = bytes
            .get(PREAMBLE..PREAMBLE.saturating_add(hlen))
            .ok_or_else(|| bad("truncated index"))?;
        let index: Index = serde_json::from_slice(header)
            .map_err(|e| Error::Checkpoint(format!("index: {e}")))?;
        let payload = &bytes[PREAMBLE + hlen..];
        if payload.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let total = (payload.len() / 8) as u64;

        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(index.tensors.len().min(total as usize + 1));
        for e in index.tensors {
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| bad("shape product overflows"))?;
            if numel != e.len {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?}: len {} does not match shape {:?}",
                    e.name, e.len, e.shape
                )));
            }
            if e.offset != expected {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?}: offset {} where {} was expected",
                    e.name, e.offset, expected
                )));
            }
            let end = expected
                .checked_add(e.len)
                .filter(|&end| end <= total)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {:?} overruns payload", e.name)))?;
            let data = payload[expected as usize * 8..end as usize * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name, Tensor::new(&e.shape, data)?));
            expected = end;
        }
        if expected != total {
            return Err(bad("trailing payload bytes"));
        }
        Ok(Self {
            meta: index.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            meta: serde_json::json!({"d_c": 4}),
            tensors: vec![
                ("a".into(), Tensor::new(&[2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap()),
                ("b.bias".into(), Tensor::new(&[3], vec![0.25, f64::MIN_POSITIVE, -0.0]).unwrap()),
            ],
        }
    }

    #[test]
    fn layout_preamble() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..4], b"GCKP");
        assert_eq!(bytes[4], VERSION);
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 9 + hlen + 7 * 8);
        let first = f64::from_le_bytes(bytes[9 + hlen..9 + hlen + 8].try_into().unwrap());
        assert_eq!(first, 1.0);
    }

    #[test]
    fn rejects_wrong_version_and_truncation() {
        let mut bytes = sample().encode();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(Checkpoint::decode(truncated).is_err());
        bytes[4] = 2;
        assert!(Checkpoint::decode(&bytes).is_err());
        assert!(Checkpoint::decode(b"GCK").is_err());
    }

    #[test]
    fn apply_checks_names_and_shapes() {
        let mut store = ParamStore::new();
        store.insert_filled("a", &[2, 2], 0.0).unwrap();
        store.insert_filled("b.bias", &[3], 0.0).unwrap();
        sample().apply_to(&mut store).unwrap();
        assert_eq!(store.tensor(store.id("a").unwrap()).data()[2], 3.5);

        let mut other = ParamStore::new();
        other.insert_filled("a", &[4], 0.0).unwrap();
        other.insert_filled("b.bias", &[3], 0.0).unwrap();
        assert!(sample().apply_to(&mut other).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(values in proptest::collection::vec(-1e6f64..1e6, 0..40), split in 0usize..40) {
            let split = split.min(values.len());
            let ck = Checkpoint {
                meta: serde_json::json!({"k": values.len()}),
                tensors: vec![
                    ("x".into(), Tensor::new(&[split], values[..split].to_vec()).unwrap()),
                    ("y".into(), Tensor::new(&[values.len() - split, 1], values[split..].to_vec()).unwrap()),
                ],
            };
            prop_assert_eq!(Checkpoint::decode(&ck.encode()).unwrap(), ck);
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let _ = Checkpoint::decode(&bytes);
        }
    }
}
