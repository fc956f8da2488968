//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"ILMCKPT\0"
//! version  u32
//! count    u32
//! entries  count × { name_len u32, name bytes, dtype u8, rank u32,
//!                    extents rank × u64, payload }
//! crc      u32, CRC-32 of every preceding byte
//! ```
//!
//! Payloads are the tensor elements in row-major order. Batch-norm running
//! statistics are stored as `<layer>.running_mu`, `<layer>.running_gamma`
//! and a rank-0 `<layer>.running_initialized` flag.

use std::path::Path;

use metanorm::{DType, Model, Scalar, Tensor};

use crate::error::CliError;

pub const MAGIC: &[u8; 8] = b"ILMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian element bytes.
    pub payload: Vec<u8>,
}

impl Entry {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut payload = Vec::with_capacity(t.numel() * T::DTYPE.size_of());
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        Self {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            payload,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>, CliError> {
        if self.dtype != T::DTYPE {
            return Err(CliError::Checkpoint(format!(
                "entry `{}` holds {:?} values, expected {:?}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let data = self.payload.chunks_exact(T::DTYPE.size_of()).map(T::read_le).collect();
        Tensor::new(&self.shape, data).map_err(|e| CliError::Checkpoint(format!("entry `{}`: {e}", self.name)))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

/// Bounds-checked reader over the encoded bytes.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CliError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                CliError::Checkpoint(format!("truncated while reading {what} at byte offset {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32, CliError> {
    u32::try_from(n).map_err(|_| CliError::Checkpoint(format!("{what} {n} does not fit in u32")))
}

impl Checkpoint {
    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push(Entry::from_tensor(name, t));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn encode(&self) -> Result<Vec<u8>, CliError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(self.entries.len(), "entry count")?.to_le_bytes());
        for e in &self.entries {
            let expected = e.shape.iter().product::<usize>() * e.dtype.size_of();
            if e.payload.len() != expected {
                return Err(CliError::Checkpoint(format!(
                    "entry `{}`: payload of {} bytes for shape {:?}",
                    e.name,
                    e.payload.len(),
                    e.shape
                )));
            }
            out.extend_from_slice(&len_u32(e.name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.tag());
            out.extend_from_slice(&len_u32(e.shape.len(), "rank")?.to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.payload);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CliError> {
        let bad = |m: String| Err(CliError::Checkpoint(m));
        if bytes.len() < MAGIC.len() + 12 {
            return bad(format!("{} bytes is too short for a checkpoint", bytes.len()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return bad(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}"));
        }
        let mut cur = Cursor { bytes: body, pos: 0 };
        if cur.take(8, "magic")? != MAGIC {
            return bad("not a checkpoint file (bad magic)".into());
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return bad(format!("unsupported format version {version}"));
        }
        let count = cur.u32("entry count")?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let at = cur.pos;
            let name_len = cur.u32("name length")? as usize;
            let name = String::from_utf8(cur.take(name_len, "name")?.to_vec())
                .map_err(|_| CliError::Checkpoint(format!("entry name at byte offset {at} is not UTF-8")))?;
            let tag = cur.take(1, "dtype tag")?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| CliError::Checkpoint(format!("entry `{name}`: unknown dtype tag {tag}")))?;
            let rank = cur.u32("rank")? as usize;
            let mut shape = Vec::new();
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = usize::try_from(cur.u64("extent")?)
                    .map_err(|_| CliError::Checkpoint(format!("entry `{name}`: extent overflows")))?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| CliError::Checkpoint(format!("entry `{name}`: element count overflows")))?;
                shape.push(d);
            }
            let size = numel
                .checked_mul(dtype.size_of())
                .ok_or_else(|| CliError::Checkpoint(format!("entry `{name}`: payload size overflows")))?;
            let payload = cur.take(size, "payload")?.to_vec();
            entries.push(Entry {
                name,
                dtype,
                shape,
                payload,
            });
        }
        if cur.pos != body.len() {
            return bad(format!("{} trailing bytes after the last entry", body.len() - cur.pos));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.encode()?).map_err(|e| CliError::io(path.display(), e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path.display(), e))?;
        Self::decode(&bytes)
    }

    /// Parameters and running statistics of `model`.
    pub fn from_model<T: Scalar>(model: &Model<T>) -> Self {
        let mut ck = Self::default();
        for p in model.params.iter() {
            ck.push(p.name.clone(), &p.value);
        }
        for (layer, stats) in model.running_stats() {
            ck.push(format!("{layer}.running_mu"), &stats.running_mu);
            ck.push(format!("{layer}.running_gamma"), &stats.running_gamma);
            let flag = if stats.initialized { T::one() } else { T::zero() };
            ck.push(format!("{layer}.running_initialized"), &Tensor::scalar(flag));
        }
        ck
    }

    /// Loads every parameter and running statistic of `model` from this
    /// checkpoint; all of them must be present with matching shapes.
    pub fn restore<T: Scalar>(&self, model: &mut Model<T>) -> Result<(), CliError> {
        let fetch = |name: &str| -> Result<Tensor<T>, CliError> {
            self.get(name)
                .ok_or_else(|| CliError::Checkpoint(format!("missing entry `{name}`")))?
                .to_tensor()
        };
        let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
        for name in names {
            model
                .params
                .set(&name, fetch(&name)?)
                .map_err(|e| CliError::Checkpoint(e.to_string()))?;
        }
        for (layer, stats) in model.running_stats_mut() {
            let mu = fetch(&format!("{layer}.running_mu"))?;
            let gamma = fetch(&format!("{layer}.running_gamma"))?;
            if mu.shape() != stats.running_mu.shape() || gamma.shape() != stats.running_gamma.shape() {
                return Err(CliError::Checkpoint(format!(
                    "running statistics of `{layer}` have the wrong shape"
                )));
            }
            stats.running_mu = mu;
            stats.running_gamma = gamma;
            stats.initialized = fetch(&format!("{layer}.running_initialized"))?
                .item()
                .map_err(|e| CliError::Checkpoint(e.to_string()))?
                != T::zero();
        }
        Ok(())
    }
}
