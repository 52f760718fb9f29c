//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "DCRDCKPT" | version | header_len | header (UTF-8 key=value text)
//! tensor_count | { name_len | name | ndim | dims... | f32 values... }*
//! ```
//!
//! The header holds the model configuration under `model.`, the tokenizer
//! table under `tokenizer.symbols` and free-form metadata under `meta.`.
//! Tensors are written in sorted name order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::config::KvConfig;
use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DCRDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub meta: KvConfig,
    /// Model parameters plus any extra state (e.g. optimiser moments).
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_model<T: Float>(model: &Model<T>, tokenizer: &Tokenizer) -> Self {
        let params = model.params();
        let tensors = params
            .ids()
            .map(|id| (params.name(id).to_string(), params.get(id).cast()))
            .collect();
        Self {
            config: model.config().clone(),
            tokenizer: tokenizer.clone(),
            meta: KvConfig::new(),
            tensors,
        }
    }

    /// Rebuilds the model, taking every parameter from the checkpoint.
    pub fn to_model<T: Float>(&self) -> Result<Model<T>> {
        let mut model = Model::<T>::build(self.config.clone(), 0)?;
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            let name = model.params().name(id).to_string();
            let src = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
            let dst = model.params_mut().get_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("{name}: shape {:?}, model expects {:?}", src.shape(), dst.shape()),
                ));
            }
            *dst = src.cast();
        }
        Ok(model)
    }

    fn header(&self) -> String {
        let mut kv = KvConfig::new();
        kv.merge_prefixed("model.", &self.config.to_kv());
        kv.set("tokenizer.symbols", self.tokenizer.to_table());
        kv.merge_prefixed("meta.", &self.meta);
        kv.to_text()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let header = self.header();
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(header.as_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.ndim() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported version {version}"),
            ));
        }
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?)
            .map_err(|_| Error::format("checkpoint", "header is not UTF-8"))?;
        let kv = KvConfig::parse(header)?;
        let config = ModelConfig::from_kv(&kv.section("model."))?;
        let tokenizer = kv
            .get_str("tokenizer.symbols")
            .and_then(Tokenizer::from_table)
            .ok_or_else(|| Error::format("checkpoint", "missing tokenizer table"))?;
        let meta = kv.section("meta.");
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self {
            config,
            tokenizer,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_survives_a_round_trip() {
        let model = Model::<f32>::build(ModelConfig::micro(), 7).unwrap();
        let mut ck = Checkpoint::from_model(&model, &Tokenizer::default());
        ck.meta.set("step", 12);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model::<f32>().unwrap().params(), model.params());
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let model = Model::<f32>::build(ModelConfig::micro(), 7).unwrap();
        let bytes = Checkpoint::from_model(&model, &Tokenizer::default()).to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
