//! `NQW1` weight bundles: magic, version, embedded JSON configuration and
//! named float32 tensors, sealed by a CRC32 over all preceding bytes.
//!
//! All integers are little-endian. Layout:
//! `magic(4) | version u32 | config_len u32 | config JSON | tensor_count u32 |
//! { name_len u16 | name | ndim u8 | dims u32… | f32 data… }* | crc32 u32`.

use std::path::Path;

use nisqa_nn::{ParamStore, Real, Tensor};

use super::config::ModelConfig;
use super::network::{param_specs, Model};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"NQW1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

/// Serialized model: architecture plus parameters in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::BundleFormat(format!("unexpected end of data reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl WeightBundle {
    pub fn from_model<T: Real>(model: &Model<T>) -> Self {
        let tensors = model.params().iter().map(|p| NamedTensor { name: p.name.clone(), tensor: p.tensor.cast() }).collect();
        Self { config: model.config().clone(), tensors }
    }

    /// Builds a model after validating the tensors against the embedded config.
    pub fn to_model<T: Real>(&self) -> Result<Model<T>> {
        self.validate_against(&self.config)?;
        let mut store = ParamStore::new();
        for t in &self.tensors {
            store.insert(t.name.clone(), t.tensor.cast())?;
        }
        Model::from_params(self.config.clone(), store)
    }

    /// Checks that the tensors are exactly the parameters `config` declares,
    /// reporting the first offending tensor in canonical order.
    pub fn validate_against(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let specs = param_specs(config);
        for spec in &specs {
            let t = self.tensors.iter().find(|t| t.name == spec.name).ok_or_else(|| Error::MissingTensor(spec.name.clone()))?;
            if t.tensor.dims() != spec.dims.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: spec.name.clone(),
                    expected: spec.dims.clone(),
                    found: t.tensor.dims().to_vec(),
                });
            }
        }
        if let Some(extra) = self.tensors.iter().find(|t| !specs.iter().any(|s| s.name == t.name)) {
            return Err(Error::UnexpectedTensor(extra.name.clone()));
        }
        if self.tensors.len() != specs.len() {
            return Err(Error::BundleFormat("duplicate tensor names".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(config.len()).map_err(|_| Error::BundleFormat("config too large".into()))?.to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| Error::BundleFormat(format!("name `{}` too long", t.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            let dims = t.tensor.dims();
            out.push(u8::try_from(dims.len()).map_err(|_| Error::BundleFormat(format!("`{}` has too many axes", t.name)))?);
            for &d in dims {
                let d = u32::try_from(d).map_err(|_| Error::BundleFormat(format!("`{}` axis too long", t.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parses and checks magic, then checksum, then structure. Shapes are
    /// validated against the embedded configuration.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bundle = Self::parse(bytes)?;
        bundle.validate_against(&bundle.config)?;
        Ok(bundle)
    }

    /// Like [`WeightBundle::from_bytes`] but validates shapes against a
    /// caller-supplied configuration.
    pub fn from_bytes_for(bytes: &[u8], config: &ModelConfig) -> Result<Self> {
        let bundle = Self::parse(bytes)?;
        bundle.validate_against(config)?;
        Ok(bundle)
    }

    fn parse(bytes: &[u8]) -> Result<Self> {
        let mut magic = [0u8; 4];
        let head = bytes.len().min(4);
        magic[..head].copy_from_slice(&bytes[..head]);
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes.len() < 8 {
            return Err(Error::Checksum { stored: 0, computed: crc32fast::hash(bytes) });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::BundleFormat(format!("unsupported format version {version}")));
        }
        let config_len = r.u32("config length")? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(config_len, "config")?)
            .map_err(|e| Error::BundleFormat(format!("embedded config: {e}")))?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::BundleFormat("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u8("rank")? as usize;
            let dims = (0..ndim).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = n.ok_or_else(|| Error::BundleFormat(format!("`{name}` is too large")))?;
            let raw = r.take(n.saturating_mul(4), "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(NamedTensor { tensor: Tensor::new(dims, data)?, name });
        }
        if r.pos != body.len() {
            return Err(Error::BundleFormat(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn load_for(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes_for(&std::fs::read(path).map_err(|e| Error::io(path, e))?, config)
    }
}

pub fn save_bundle(bundle: &WeightBundle, path: impl AsRef<Path>) -> Result<()> {
    bundle.save(path)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<WeightBundle> {
    WeightBundle::load(path)
}
