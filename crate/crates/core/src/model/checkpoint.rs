//! Checkpoint file: `VXRLCKPT`, a little-endian u32 version, a length-prefixed
//! UTF-8 TOML header (variant, model config, training metadata), then named
//! tensors, each as name, rank, dims and little-endian f32 data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Layout, ModelConfig, Variant};
use super::tensor::Tensor;
use super::Model;
use crate::error::{Error, Result};
use crate::provenance::Provenance;

const MAGIC: &[u8; 8] = b"VXRLCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs_run: usize,
    /// Epoch (1-based) whose weights were kept; 0 for an untrained model.
    pub best_epoch: usize,
    pub train_loss_history: Vec<f64>,
    pub dev_loss_history: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    variant: Variant,
    model: ModelConfig,
    meta: TrainMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub variant: Variant,
    pub config: ModelConfig,
    pub meta: TrainMeta,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, meta: TrainMeta) -> Self {
        Checkpoint {
            variant: model.variant,
            config: model.config.clone(),
            meta,
            names: model.layout.names.clone(),
            tensors: model.params.clone(),
        }
    }

    pub fn to_model(&self) -> Result<Model<f32>> {
        self.config.validate()?;
        let layout = Layout::new(&self.config, self.variant);
        if layout.names != self.names {
            return Err(Error::Config("checkpoint tensors do not match the model layout".into()));
        }
        for (i, t) in self.tensors.iter().enumerate() {
            if t.shape != layout.shapes[i] || t.data.len() != t.shape.iter().product::<usize>() {
                return Err(Error::Shape(format!("tensor {} has shape {:?}", self.names[i], t.shape)));
            }
        }
        Ok(Model {
            config: self.config.clone(),
            variant: self.variant,
            layout,
            params: self.tensors.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = toml::to_string(&Header {
            variant: self.variant,
            model: self.config.clone(),
            meta: self.meta.clone(),
        })
        .map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &s in &t.shape {
                out.extend_from_slice(&(s as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |m: &str| Error::format(origin, m);
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(8).ok_or_else(|| fail("truncated"))? != MAGIC {
            return Err(fail("not a checkpoint (bad magic)"));
        }
        let version = r.u32().ok_or_else(|| fail("truncated"))?;
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let hlen = r.u32().ok_or_else(|| fail("truncated"))? as usize;
        let htext = std::str::from_utf8(r.take(hlen).ok_or_else(|| fail("truncated header"))?)
            .map_err(|_| fail("header is not UTF-8"))?;
        let header: Header = toml::from_str(htext).map_err(|e| fail(&e.to_string()))?;
        let count = r.u32().ok_or_else(|| fail("truncated"))? as usize;
        let mut names = Vec::with_capacity(count);
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nl = r.u32().ok_or_else(|| fail("truncated"))? as usize;
            let name = std::str::from_utf8(r.take(nl).ok_or_else(|| fail("truncated"))?)
                .map_err(|_| fail("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32().ok_or_else(|| fail("truncated"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32().ok_or_else(|| fail("truncated"))? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4).ok_or_else(|| fail("truncated tensor data"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            names.push(name);
            tensors.push(Tensor { shape, data });
        }
        if r.pos != bytes.len() {
            return Err(fail("trailing bytes"));
        }
        Ok(Checkpoint {
            variant: header.variant,
            config: header.model,
            meta: header.meta,
            names,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.b.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }
}
