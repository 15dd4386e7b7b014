//! Named parameter store, SGD-with-momentum updates, and the CKPT
//! checkpoint format shared by all trained components.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, Tape, TensorId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered name -> tensor map. BTreeMap keeps iteration (and therefore
/// update and serialization order) deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, dims: &[usize], data: Vec<f32>) {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "param {name} size mismatch");
        self.entries.insert(name.to_string(), Param { dims: dims.to_vec(), data });
    }

    pub fn insert_normal(&mut self, name: &str, dims: &[usize], std: f32, rng: &mut ChaCha8Rng) {
        let n: usize = dims.iter().product();
        let normal = rand_distr::Normal::new(0.0f32, std).expect("valid std");
        let data: Vec<f32> = (0..n).map(|_| rng.sample(normal)).collect();
        self.insert(name, dims, data);
    }

    pub fn insert_zeros(&mut self, name: &str, dims: &[usize]) {
        let n: usize = dims.iter().product();
        self.insert(name, dims, vec![0.0; n]);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total learnable scalars across entries whose name starts with `prefix`.
    pub fn scalar_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.data.len())
            .sum()
    }

    /// Stages every parameter onto the tape as a `requires_grad` leaf.
    pub fn stage(&self, tape: &mut Tape) -> Result<BTreeMap<String, TensorId>> {
        let mut ids = BTreeMap::new();
        for (name, p) in &self.entries {
            let id = tape.leaf(&p.dims, p.data.clone(), true)?;
            ids.insert(name.clone(), id);
        }
        Ok(ids)
    }

    /// Stages parameters as frozen constants (inference path).
    pub fn stage_frozen(&self, tape: &mut Tape) -> Result<BTreeMap<String, TensorId>> {
        let mut ids = BTreeMap::new();
        for (name, p) in &self.entries {
            let id = tape.leaf(&p.dims, p.data.clone(), false)?;
            ids.insert(name.clone(), id);
        }
        Ok(ids)
    }

    pub fn set_data(&mut self, name: &str, data: Vec<f32>) {
        let p = self.entries.get_mut(name).expect("unknown param");
        assert_eq!(p.data.len(), data.len());
        p.data = data;
    }

    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }
}

/// Plain SGD with momentum; velocity buffers keyed by parameter name.
#[derive(Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Sgd { lr, momentum, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, ids: &BTreeMap<String, TensorId>, grads: &Gradients) {
        for (name, p) in store.entries.iter_mut() {
            let Some(&id) = ids.get(name) else { continue };
            let g = grads.get(id, p.data.len());
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; p.data.len()]);
            for i in 0..p.data.len() {
                v[i] = self.momentum * v[i] + g[i];
                p.data[i] -= self.lr * v[i];
            }
        }
    }
}

const CKPT_MAGIC: &[u8; 4] = b"CKPT";
const CKPT_VERSION: u32 = 1;

/// Writes the store in the CKPT format: magic "CKPT", u32 version=1,
/// u32 tensor count, then per tensor {u32 name len, UTF-8 name, u32 rank,
/// u32 dims..., f32 LE data}.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let io_err = |e| Error::Io { path: path.display().to_string(), source: e };
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.entries.len() as u32).to_le_bytes());
    for (name, p) in &store.entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(p.dims.len() as u32).to_le_bytes());
        for &d in &p.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let io_err = |e| Error::Io { path: path.display().to_string(), source: e };
    let fmt_err = |msg: &str| Error::Format { path: path.display().to_string(), msg: msg.to_string() };
    let mut bytes = Vec::new();
    std::fs::File::open(path).map_err(io_err)?.read_to_end(&mut bytes).map_err(io_err)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Format { path: path.display().to_string(), msg: "truncated checkpoint".into() });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        let s = take(pos, 4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    };
    if take(&mut pos, 4)? != CKPT_MAGIC {
        return Err(fmt_err("bad magic"));
    }
    if read_u32(&mut pos)? != CKPT_VERSION {
        return Err(fmt_err("unsupported version"));
    }
    let count = read_u32(&mut pos)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| fmt_err("invalid utf-8 name"))?;
        let rank = read_u32(&mut pos)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut pos)? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = take(&mut pos, n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(&name, &dims, data);
    }
    Ok(store)
}
