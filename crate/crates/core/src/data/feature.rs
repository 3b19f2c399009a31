//! Per-utterance feature container.
//!
//! ```text
//! "TFF1" | version u32 | id_len u32 | id UTF-8 | L u32 | D u32 | label u32
//! payload: L·D f32 LE, row-major | CRC-32 of the payload bytes, u32 LE
//! ```

use std::path::Path;

use crate::binary::{len_u32, put_u32, Reader};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"TFF1";
pub const VERSION: u32 = 1;

/// One utterance: an `L x D` embedding sequence and its class id.
///
/// Values are stored at single precision on disk; [`FeatureFile::new`]
/// rounds them once so a write/read cycle is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub id: String,
    pub label: u32,
    features: Tensor,
}

impl FeatureFile {
    pub fn new(id: impl Into<String>, label: u32, features: Tensor) -> Result<Self> {
        let (len, dim) = features.dims2()?;
        if len == 0 || dim == 0 {
            return Err(Error::invalid("feature sequence must be at least 1 x 1"));
        }
        let rounded: Vec<f64> = features.data().iter().map(|&v| v as f32 as f64).collect();
        if rounded.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: "features (after f32 rounding)".into(),
            });
        }
        Ok(Self {
            id: id.into(),
            label,
            features: Tensor::matrix(len, dim, rounded)?,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(32 + self.id.len() + 4 * self.features.len());
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, len_u32(self.id.len(), "id")?);
        out.extend_from_slice(self.id.as_bytes());
        put_u32(&mut out, len_u32(self.len(), "L")?);
        put_u32(&mut out, len_u32(self.dim(), "D")?);
        put_u32(&mut out, self.label);
        let start = out.len();
        for &v in self.features.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        put_u32(&mut out, crc);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.array::<4>("magic")? != *MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected TFF1".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported feature file version {version}"),
            });
        }
        let id_len = r.u32("id length")? as usize;
        let id = r.string(id_len, "utterance id")?;
        let len = r.u32("L")? as usize;
        let dim = r.u32("D")? as usize;
        let label = r.u32("label")?;
        if len == 0 || dim == 0 {
            return r.fail(format!("empty feature sequence {len} x {dim}"));
        }
        let Some(payload_len) = len.checked_mul(dim).and_then(|n| n.checked_mul(4)) else {
            return r.fail("payload size overflows");
        };
        let at = r.pos();
        if r.remaining() < payload_len + 4 {
            return r.fail(format!(
                "truncated payload: expected {} bytes (payload + CRC), found {}",
                payload_len + 4,
                r.remaining()
            ));
        }
        let payload = r.take(payload_len, "payload")?;
        let stored = r.u32("CRC-32")?;
        let actual = crc32fast::hash(payload);
        if stored != actual {
            return Err(Error::Format {
                offset: at + payload_len,
                message: format!("CRC-32 mismatch: stored {stored:08x}, computed {actual:08x}"),
            });
        }
        if r.remaining() != 0 {
            return r.fail(format!("{} trailing bytes after CRC", r.remaining()));
        }
        let mut data = Vec::with_capacity(len * dim);
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
            if !v.is_finite() {
                return Err(Error::Format {
                    offset: at + 4 * i,
                    message: format!("non-finite value at row {}, column {}", i / dim, i % dim),
                });
            }
            data.push(f64::from(v));
        }
        Ok(Self {
            id,
            label,
            features: Tensor::matrix(len, dim, data)?,
        })
    }

    /// Plain-text fixture import: one token per line, values separated by
    /// commas or whitespace; `#` starts a comment.
    pub fn from_text(id: impl Into<String>, label: u32, text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| Error::invalid(format!("line {}: {s:?}: {e}", n + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::invalid("text fixture has no rows"));
        }
        if rows.iter().any(|r| r.len() != rows[0].len()) {
            return Err(Error::shape("text fixture rows differ in width"));
        }
        Self::new(id, label, Tensor::from_rows(&rows)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }
}

pub fn load_feature_file(path: impl AsRef<Path>) -> Result<FeatureFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureFile::from_bytes(&bytes)
}
