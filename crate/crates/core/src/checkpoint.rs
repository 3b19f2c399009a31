//! Binary checkpoint container.
//!
//! ```text
//! "TFMB" | version u32 | header_len u32 | header JSON
//! repeated until EOF:
//!   name_len u32 | name | rank u32 | extents u64 × rank | payload f64 LE
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binary::{len_u32, put_u32, put_u64, Reader};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"TFMB";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Class names in id order.
    pub classes: Vec<String>,
    pub step: u64,
    pub seed: u64,
    /// Position within a cross-validation run, if any.
    #[serde(default)]
    pub fold: Option<usize>,
    #[serde(default)]
    pub n_folds: Option<usize>,
    #[serde(default)]
    pub epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &Model, classes: Vec<String>, step: u64, seed: u64) -> Self {
        Self {
            header: CheckpointHeader {
                model: model.config.clone(),
                classes,
                step,
                seed,
                fold: None,
                n_folds: None,
                epoch: None,
            },
            store: model.store.clone(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_store(self.header.model, self.store)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let header = serde_json::to_vec(&self.header)?;
        put_u32(&mut out, len_u32(header.len(), "header")?);
        out.extend_from_slice(&header);
        for (name, tensor) in self.store.iter() {
            put_u32(&mut out, len_u32(name.len(), "parameter name")?);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, len_u32(tensor.shape().len(), "rank")?);
            for &e in tensor.shape() {
                put_u64(&mut out, e as u64);
            }
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.array::<4>("magic")? != *MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected TFMB".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let header_len = r.u32("header length")? as usize;
        let start = r.pos();
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(header_len, "header")?).map_err(|e| Error::Format {
                offset: start,
                message: format!("header JSON: {e}"),
            })?;
        let mut store = ParamStore::new();
        while r.remaining() > 0 {
            let name_len = r.u32("name length")? as usize;
            let name = r.string(name_len, "parameter name")?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                let e = r.u64("extent")?;
                match usize::try_from(e) {
                    Ok(e) => shape.push(e),
                    Err(_) => return r.fail(format!("extent {e} of {name} too large")),
                }
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .and_then(|n| n.checked_mul(8));
            let Some(bytes_len) = count else {
                return r.fail(format!("payload of {name} overflows"));
            };
            let at = r.pos();
            let payload = r.take(bytes_len, &format!("payload of {name}"))?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Format {
                    offset: at + 8 * i,
                    message: format!("non-finite value in {name}"),
                });
            }
            if store.find(&name).is_some() {
                return r.fail(format!("duplicate parameter {name}"));
            }
            store.add(name, Tensor::new(shape, data)?);
        }
        Ok(Self { header, store })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
