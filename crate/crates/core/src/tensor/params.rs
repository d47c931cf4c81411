use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Real, Tensor};
use crate::error::{CareError, Result};

/// Handle to a parameter registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    decay: bool,
}

/// Named learnable tensors. Names are dotted paths whose first segment is
/// the parameter group (`wsi`, `rna`, `protein`, `head`, ...).
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Registers a parameter. `decay` marks it for decoupled weight decay.
    ///
    /// Panics on duplicate names; registration order is part of the model
    /// definition, so a duplicate is a programming error.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry { name, value, decay });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn group(&self, id: ParamId) -> &str {
        let name = self.name(id);
        name.split('.').next().unwrap_or(name)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    decay: e.decay,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copies values from `other`, which must have the identical layout.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub(crate) fn check_layout(&self, other: &ParamStore<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(CareError::contract(format!(
                "parameter trees differ: {} vs {} entries",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(CareError::contract(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Loads named values from a checkpoint; every store entry must be present
    /// with a matching shape.
    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let by_name: BTreeMap<&str, &(Vec<usize>, Vec<f32>)> =
            ckpt.params.iter().map(|(n, v)| (n.as_str(), v)).collect();
        for e in &mut self.entries {
            let (shape, data) = by_name
                .get(e.name.as_str())
                .ok_or_else(|| CareError::contract(format!("checkpoint lacks parameter {}", e.name)))?;
            if shape.as_slice() != e.value.shape() {
                return Err(CareError::contract(format!(
                    "checkpoint shape {:?} for {} does not match {:?}",
                    shape,
                    e.name,
                    e.value.shape()
                )));
            }
            e.value = Tensor::new(shape.clone(), data.iter().map(|&x| T::c(x as f64)).collect())?;
        }
        Ok(())
    }

    /// Loads only parameters of `group` (name prefix before the first '.');
    /// every one of them must be present in `ckpt`. Returns how many were set.
    pub fn load_group(&mut self, ckpt: &Checkpoint, group: &str) -> Result<usize> {
        let mut sub = ParamStore::new();
        let mut ids = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.name.split('.').next() == Some(group) {
                sub.register(e.name.clone(), e.value.clone(), e.decay);
                ids.push(i);
            }
        }
        sub.load_from(ckpt)?;
        for (k, &i) in ids.iter().enumerate() {
            self.entries[i].value = sub.entries[k].value.clone();
        }
        Ok(ids.len())
    }

    pub fn to_checkpoint(&self, config_hash: [u8; 32]) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash,
            params: self
                .entries
                .iter()
                .map(|e| {
                    (
                        e.name.clone(),
                        (e.value.shape().to_vec(), e.value.data().iter().map(|x| x.f64() as f32).collect()),
                    )
                })
                .collect(),
        }
    }
}

/// Per-parameter gradients, indexed like the owning [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn new(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn set(&mut self, id: ParamId, grad: Tensor<T>) {
        self.grads[id.0] = Some(grad);
    }

    /// Adds `grad` into the slot for `id`.
    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => {
                for (a, &g) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a = *a + g;
                }
            }
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    /// Sums `other` into `self` (ordered reduction across graphs).
    pub fn merge(&mut self, other: &ParamGrads<T>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x = *x * factor;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor<T>)> {
        self.grads
            .iter_mut()
            .enumerate()
            .filter_map(|(i, g)| g.as_mut().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|x| x.f64() * x.f64())
            .sum::<f64>()
            .sqrt()
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CARECKPT";

/// In-memory form of a checkpoint file: a header (format version and the
/// SHA-256 of the model config) followed by named little-endian `f32`
/// tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: [u8; 32],
    pub params: Vec<(String, (Vec<usize>, Vec<f32>))>,
}

impl Checkpoint {
    pub fn config_hash_hex(&self) -> String {
        hex(&self.config_hash)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    let digest = Sha256::digest(bytes);
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

/// Layout:
/// `magic[8] | version u32 | config_hash[32] | count u32 |`
/// then per entry `name_len u32 | name | rank u32 | dims u64* | data f32*`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&ckpt.version.to_le_bytes());
    buf.extend_from_slice(&ckpt.config_hash);
    buf.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, (shape, data)) in &ckpt.params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| CareError::io(path, e))?;
    f.write_all(&buf).map_err(|e| CareError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CareError::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(CareError::data(path, None, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CareError::data(path, None, format!("unsupported checkpoint version {version}")));
    }
    let mut config_hash = [0u8; 32];
    config_hash.copy_from_slice(r.take(32)?);
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for entry in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CareError::data(path, Some(entry), "parameter name is not utf-8"))?;
        let rank = r.u32()? as usize;
        if rank > 2 {
            return Err(CareError::data(path, Some(entry), format!("rank {rank} unsupported")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push((name, (shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(CareError::data(path, None, "trailing bytes after last parameter"));
    }
    Ok(Checkpoint {
        version,
        config_hash,
        params,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CareError::data(self.path, None, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
