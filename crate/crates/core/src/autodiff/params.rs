use std::ops::Index;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::tape::{Grads, Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter tensor. Cost accounting counts only [`ParamKind::Weight`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
}

impl ParamKind {
    fn tag(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::Norm => 2,
            ParamKind::Embedding => 3,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        Some(match t {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::Norm,
            3 => ParamKind::Embedding,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<S> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<S>,
}

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
}

/// Tape handles for every parameter of a store, valid for one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<S>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Appends a copy of `id` under a new name.
    pub fn duplicate(&mut self, id: ParamId, name: impl Into<String>) -> ParamId {
        let e = self.entries[id.0].clone();
        self.add(name, e.kind, e.tensor)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Places every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Result<Bound> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if trainable {
                    tape.param(e.tensor.clone())
                } else {
                    tape.constant(e.tensor.clone())
                }
            })
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    /// Sum of squared gradient entries over all parameters.
    pub fn grad_norm(&self, bound: &Bound, grads: &Grads<S>) -> S {
        self.ids()
            .filter_map(|id| grads.raw(bound[id]))
            .flat_map(|g| g.iter().map(|&x| x * x))
            .sum::<S>()
            .sqrt()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(write_checkpoint_bytes(self));
        hex::encode(h.finalize())
    }
}

const CKPT_MAGIC: &[u8; 4] = b"MLCK";
const CKPT_VERSION: u32 = 1;

/// Serializes a store: magic, version, dtype width, entry count, then per
/// entry the name, kind, shape and little-endian values.
pub fn write_checkpoint_bytes<S: Scalar>(store: &ParamStore<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.push(S::DTYPE);
    out.extend_from_slice(&(store.entries.len() as u32).to_le_bytes());
    for e in &store.entries {
        let name = e.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.kind.tag());
        out.extend_from_slice(&(e.tensor.shape().len() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.tensor.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4")))
    }
}

pub fn read_checkpoint_bytes<S: Scalar>(bytes: &[u8]) -> Result<ParamStore<S>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CKPT_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: "bad checkpoint magic".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::Parse {
            offset: 4,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let dtype = r.take(1, "dtype")?[0];
    if dtype != S::DTYPE {
        return Err(Error::Parse {
            offset: 8,
            detail: format!("checkpoint holds {dtype}-byte values, expected {}", S::DTYPE),
        });
    }
    let count = r.u32("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Parse {
                offset: at as u64,
                detail: "name is not utf-8".into(),
            })?
            .to_string();
        let at = r.pos;
        let kind = ParamKind::from_tag(r.take(1, "kind")?[0]).ok_or(Error::Parse {
            offset: at as u64,
            detail: "unknown parameter kind".into(),
        })?;
        let ndim = r.u32("rank")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let width = S::DTYPE as usize;
        let raw = r.take(numel * width, "values")?;
        let data = raw.chunks(width).map(S::read_le).collect();
        let at = r.pos;
        let tensor = Tensor::from_vec(&shape, data).map_err(|e| Error::Parse {
            offset: at as u64,
            detail: e.to_string(),
        })?;
        store.add(name, kind, tensor);
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            offset: r.pos as u64,
            detail: "trailing bytes after last entry".into(),
        });
    }
    Ok(store)
}
