//! Named network parameters with gradient buffers, and the `TATLW` weights
//! file.
//!
//! Weights file layout (little-endian): `b"TATLW\0"`, version `u16`, then one
//! record per parameter until end of file:
//! name length `u16`, UTF-8 name, tag `u8` (0 encoder, 1 decoder), rank `u8`,
//! dims `u32` each, payload `f64` each. Gradients are never written.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{put_dims_and_payload, write_atomic, Reader, FORMAT_VERSION};
use crate::tensor::TensorF;

pub const WEIGHTS_MAGIC: &[u8; 6] = b"TATLW\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tag: Tag,
    pub value: TensorF,
    pub grad: TensorF,
}

/// Ordered, uniquely named parameters partitioned into encoder and decoder.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tag: Tag, value: TensorF) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Data(format!("duplicate parameter name {name:?}")));
        }
        let grad = TensorF::zeros(value.shape());
        self.params.push(Param {
            name,
            tag,
            value,
            grad,
        });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn param(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn param_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// All weights concatenated in parameter order.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for p in &self.params {
            out.extend_from_slice(p.grad.data());
        }
        out
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Dimension(format!(
                "{} values for {} weights",
                flat.len(),
                self.numel()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// True when names, tags and shapes agree in order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.tag == b.tag && a.value.shape() == b.value.shape())
    }

    /// FNV-1a over the bit patterns of every weight carrying `tag`.
    pub fn checksum(&self, tag: Tag) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| p.tag == tag) {
            for b in p.name.bytes().chain(p.value.data().iter().flat_map(|v| v.to_bits().to_le_bytes())) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.numel() * 8 + self.params.len() * 32);
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(match p.tag {
                Tag::Encoder => 0,
                Tag::Decoder => 1,
            });
            put_dims_and_payload(&mut out, &p.value);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader::new(bytes);
        if r.take(WEIGHTS_MAGIC.len())? != WEIGHTS_MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let mut set = ParamSet::new();
        while !r.at_end() {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| format!("parameter name is not UTF-8: {e}"))?
                .to_owned();
            let tag = match r.u8()? {
                0 => Tag::Encoder,
                1 => Tag::Decoder,
                t => return Err(format!("unknown tag {t} for {name}")),
            };
            let value = r.tensor()?;
            set.push(name, tag, value).map_err(|e| e.to_string())?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }
}
