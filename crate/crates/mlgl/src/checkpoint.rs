//! Flat little-endian checkpoint format.
//!
//! ```text
//! "MLGL" | version u32 | tensor count u32
//! per tensor: name len u32 | name | dtype u8 | ndim u32 | dims u64… | payload | crc32 u32
//! config len u32 | config JSON | rng seed u64 | rng stream u64 | rng word u128 | epoch u64
//! crc32 of everything above u32
//! ```
//! The per-tensor CRC covers that tensor's whole record.

use std::path::{Path, PathBuf};

use mlgl_core::{DType, Mlgl, ModelConfig, Real, RngState, Taxonomy, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::TaxonomyFile;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;

pub const MAGIC: &[u8; 4] = b"MLGL";
pub const VERSION: u32 = 1;

/// Everything besides tensors needed to rebuild and use a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub taxonomy: TaxonomyFile,
}

impl ModelMeta {
    pub fn new(model: ModelConfig, features: FeatureConfig, taxonomy: &Taxonomy) -> Self {
        ModelMeta {
            model,
            features,
            taxonomy: TaxonomyFile::from_taxonomy(taxonomy),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian values.
    pub payload: Vec<u8>,
}

impl TensorRecord {
    fn from_tensor<T: Real>(name: &str, t: &Tensor<T>) -> Self {
        let mut payload = Vec::with_capacity(t.numel() * T::DTYPE.size());
        T::write_le(t.data(), &mut payload);
        TensorRecord {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            payload,
        }
    }

    fn values(&self) -> Vec<f64> {
        match self.dtype {
            DType::F32 => self
                .payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => self
                .payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(&(self.name.len() as u32).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out.push(self.dtype.code());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<TensorRecord>,
    /// Serialized [`ModelMeta`], kept verbatim for byte-exact round trips.
    pub config_json: String,
    pub rng: RngState,
    pub epoch: u64,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &Mlgl<T>, meta: &ModelMeta, rng: RngState, epoch: u64) -> Self {
        Checkpoint {
            tensors: model
                .store()
                .named_tensors()
                .map(|(n, t)| TensorRecord::from_tensor(n, t))
                .collect(),
            config_json: serde_json::to_string(meta).expect("meta serializes"),
            rng,
            epoch,
        }
    }

    pub fn meta(&self) -> Result<ModelMeta> {
        serde_json::from_str(&self.config_json).map_err(|e| Error::Format {
            path: PathBuf::new(),
            message: format!("config snapshot: {e}"),
        })
    }

    /// Rebuilds the model, converting stored values to `T`.
    pub fn to_model<T: Real>(&self) -> Result<(Mlgl<T>, ModelMeta)> {
        let meta = self.meta()?;
        let mut model = Mlgl::<T>::new(meta.model.clone(), 0)?;
        let fail = |message: String| Error::Format {
            path: PathBuf::new(),
            message,
        };
        let expected = model.store().named_tensors().count();
        if expected != self.tensors.len() {
            return Err(fail(format!("{} tensors stored, model has {expected}", self.tensors.len())));
        }
        for rec in &self.tensors {
            let t = model
                .store_mut()
                .get_mut(&rec.name)
                .ok_or_else(|| fail(format!("unknown tensor {}", rec.name)))?;
            if t.shape() != rec.shape.as_slice() {
                return Err(fail(format!("tensor {}: shape {:?}, model expects {:?}", rec.name, rec.shape, t.shape())));
            }
            for (d, v) in t.data_mut().iter_mut().zip(rec.values()) {
                *d = T::of(v);
            }
        }
        Ok((model, meta))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.tensors.iter().map(|t| t.payload.len() + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            t.encode(&mut out);
        }
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0, path };
        if r.take(4, "header")? != MAGIC {
            return r.fail("bad magic: not an MLGL checkpoint");
        }
        let version = r.u32("header")?;
        if version != VERSION {
            return r.fail(&format!("format version {version}, this build reads {VERSION}"));
        }
        let count = r.u32("header")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let start = r.pos;
            let what = format!("tensor #{i}");
            let name_len = r.u32(&what)? as usize;
            let name = String::from_utf8(r.take(name_len, &what)?.to_vec())
                .or_else(|_| r.fail(&format!("{what}: name is not UTF-8")))?;
            let dtype = DType::from_code(r.take(1, &name)?[0])
                .ok_or_else(|| r.error(&format!("tensor {name}: unknown dtype")))?;
            let ndim = r.u32(&name)? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64(&name)? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| r.error(&format!("tensor {name}: shape overflow")))?;
            let payload = r.take(numel, &format!("tensor {name}"))?.to_vec();
            let computed = crc32fast::hash(&bytes[start..r.pos]);
            if r.u32(&format!("tensor {name}"))? != computed {
                return r.fail(&format!("tensor {name}: checksum mismatch"));
            }
            tensors.push(TensorRecord {
                name,
                dtype,
                shape,
                payload,
            });
        }
        let len = r.u32("config")? as usize;
        let config_json = String::from_utf8(r.take(len, "config")?.to_vec())
            .or_else(|_| r.fail("config snapshot is not UTF-8"))?;
        let seed = r.u64("rng state")?;
        let stream = r.u64("rng state")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng state")?.try_into().unwrap());
        let epoch = r.u64("epoch")?;
        let computed = crc32fast::hash(&bytes[..r.pos]);
        if r.u32("trailer")? != computed {
            return r.fail("trailer checksum mismatch");
        }
        if r.pos != bytes.len() {
            return r.fail("trailing bytes after checkpoint");
        }
        Ok(Checkpoint {
            tensors,
            config_json,
            rng: RngState { seed, stream, word_pos },
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn error(&self, message: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message: message.to_string(),
        }
    }

    fn fail<T>(&self, message: &str) -> Result<T> {
        Err(self.error(message))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(&format!("{what}: truncated at byte {}", self.bytes.len()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_taxonomy;

    fn small() -> (Mlgl<f32>, ModelMeta) {
        let cfg = ModelConfig {
            channels: [4, 4, 8],
            ..ModelConfig::default()
        };
        let meta = ModelMeta::new(cfg.clone(), FeatureConfig::default(), &default_taxonomy());
        (Mlgl::new(cfg, 3).unwrap(), meta)
    }

    fn rng() -> RngState {
        mlgl_core::SeededRng::new(5).state()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (model, meta) = small();
        let ck = Checkpoint::from_model(&model, &meta, rng(), 4);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let (m2, meta2) = back.to_model::<f32>().unwrap();
        assert_eq!(meta2, meta);
        let again = Checkpoint::from_model(&m2, &meta2, rng(), 4).to_bytes();
        assert_eq!(again, bytes);
    }

    #[test]
    fn every_single_byte_flip_is_detected() {
        let (model, meta) = small();
        let bytes = Checkpoint::from_model(&model, &meta, rng(), 0).to_bytes();
        for i in (0..bytes.len()).step_by(97) {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(Checkpoint::from_bytes(&b, Path::new("x")).is_err(), "flip at {i} undetected");
        }
    }

    #[test]
    fn payload_corruption_names_the_tensor() {
        let (model, meta) = small();
        let ck = Checkpoint::from_model(&model, &meta, rng(), 0);
        let mut bytes = ck.to_bytes();
        let first = &ck.tensors[0];
        let offset = 12 + 4 + first.name.len() + 1 + 4 + 8 * first.shape.len() + 3;
        bytes[offset] ^= 1;
        let err = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap_err().to_string();
        assert!(err.contains(&first.name) && err.contains("checksum"), "{err}");
    }

    #[test]
    fn header_errors() {
        let (model, meta) = small();
        let bytes = Checkpoint::from_model(&model, &meta, rng(), 0).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, Path::new("x")).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad, Path::new("x")).unwrap_err().to_string().contains("version"));
        let err = Checkpoint::from_bytes(&bytes[..40], Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }
}
