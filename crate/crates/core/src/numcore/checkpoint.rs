//! Named-tensor checkpoints.
//!
//! ```json
//! {"format": "sepsis-checkpoint", "version": 1,
//!  "tensors": [{"name": "...", "shape": [r, c], "trainable": true, "data": [...]}]}
//! ```
//! Floats are written with round-trip precision, so a reload is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "sepsis-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            tensors: store
                .iter()
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_store(&self) -> Result<ParamStore> {
        self.check_header()?;
        let mut store = ParamStore::new();
        for t in &self.tensors {
            store.add(
                t.name.clone(),
                Tensor::new(t.shape.clone(), t.data.clone())?,
                t.trainable,
            )?;
        }
        Ok(store)
    }

    fn check_header(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        ckpt.check_header()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut store = ParamStore::new();
        store
            .add(
                "a",
                Tensor::row(vec![0.1, 1.0 / 3.0, -2.5e-300, 7.0e12]),
                true,
            )
            .unwrap();
        store
            .add("b", Tensor::scalar(std::f64::consts::PI), false)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        Checkpoint::from_store(&store).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().to_store().unwrap();
        for ((_, p), (_, q)) in store.iter().zip(back.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.trainable, q.trainable);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&p.value), bits(&q.value));
        }
    }

    #[test]
    fn rejects_foreign_header() {
        let ckpt = Checkpoint {
            format: "other".into(),
            version: 1,
            tensors: vec![],
        };
        assert!(ckpt.to_store().is_err());
    }
}
