//! Vector quantization (baseline) and component-wise latent quantization,
//! with straight-through gradients and the two codebook losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::params::ParamStore;
use crate::tensor::{Tape, TensorId};

/// h x w x n_z latent values, stored channel-last (site-major).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub h: usize,
    pub w: usize,
    pub n_z: usize,
    pub values: Vec<f32>,
}

impl LatentGrid {
    pub fn new(h: usize, w: usize, n_z: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != h * w * n_z {
            return Err(Error::invalid("latent_grid", format!("expected {} values, got {}", h * w * n_z, values.len())));
        }
        Ok(LatentGrid { h, w, n_z, values })
    }

    pub fn zeros(h: usize, w: usize, n_z: usize) -> Self {
        LatentGrid { h, w, n_z, values: vec![0.0; h * w * n_z] }
    }

    pub fn site(&self, i: usize, j: usize) -> &[f32] {
        let base = (i * self.w + j) * self.n_z;
        &self.values[base..base + self.n_z]
    }

    /// From a single-sample (n_z, h, w) channel-first buffer.
    pub fn from_chw(data: &[f32], n_z: usize, h: usize, w: usize) -> Self {
        let mut values = vec![0.0f32; h * w * n_z];
        for c in 0..n_z {
            for s in 0..h * w {
                values[s * n_z + c] = data[c * h * w + s];
            }
        }
        LatentGrid { h, w, n_z, values }
    }

    /// To a single-sample (n_z, h, w) channel-first buffer.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.h * self.w;
        let mut out = vec![0.0f32; hw * self.n_z];
        for s in 0..hw {
            for c in 0..self.n_z {
                out[c * hw + s] = self.values[s * self.n_z + c];
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct VqCodebook {
    pub n_z: usize,
    /// K x n_z, row-major.
    pub vectors: Vec<f32>,
}

impl VqCodebook {
    pub fn init(k: usize, n_z: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0f32, 0.02).unwrap();
        let vectors = (0..k * n_z).map(|_| rng.sample(normal)).collect();
        VqCodebook { n_z, vectors }
    }

    pub fn from_flat(k: usize, n_z: usize, vectors: Vec<f32>) -> Result<Self> {
        if vectors.len() != k * n_z {
            return Err(Error::invalid("vq_codebook", "size mismatch"));
        }
        Ok(VqCodebook { n_z, vectors })
    }

    pub fn k(&self) -> usize {
        self.vectors.len() / self.n_z
    }

    pub fn code(&self, k: usize) -> &[f32] {
        &self.vectors[k * self.n_z..(k + 1) * self.n_z]
    }

    pub fn learnable_count(&self) -> usize {
        self.vectors.len()
    }
}

/// n_z scalar codebooks of r_c entries each, stored as an (n_z, r_c) table.
#[derive(Debug, Clone)]
pub struct LqCodebooks {
    pub n_z: usize,
    pub r_c: usize,
    pub values: Vec<f32>,
}

impl LqCodebooks {
    /// Entries evenly spaced over [-1, 1], matching the normalized depth range.
    pub fn init(n_z: usize, r_c: usize) -> Self {
        let mut values = Vec::with_capacity(n_z * r_c);
        for _ in 0..n_z {
            for r in 0..r_c {
                let v = if r_c == 1 { 0.0 } else { -1.0 + 2.0 * r as f32 / (r_c - 1) as f32 };
                values.push(v);
            }
        }
        LqCodebooks { n_z, r_c, values }
    }

    pub fn from_flat(n_z: usize, r_c: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n_z * r_c {
            return Err(Error::invalid("lq_codebooks", "size mismatch"));
        }
        Ok(LqCodebooks { n_z, r_c, values })
    }

    pub fn codebook(&self, n: usize) -> &[f32] {
        &self.values[n * self.r_c..(n + 1) * self.r_c]
    }

    pub fn learnable_count(&self) -> usize {
        self.values.len()
    }
}

fn argmin_code(site: &[f32], vectors: &[f32], n_z: usize) -> usize {
    let k = vectors.len() / n_z;
    let mut best = 0usize;
    let mut best_d = f32::INFINITY;
    for ki in 0..k {
        let code = &vectors[ki * n_z..(ki + 1) * n_z];
        let mut d = 0.0f32;
        for c in 0..n_z {
            let t = site[c] - code[c];
            d += t * t;
        }
        if d < best_d {
            best_d = d;
            best = ki;
        }
    }
    best
}

fn argmin_scalar(x: f32, codebook: &[f32]) -> usize {
    let mut best = 0usize;
    let mut best_d = f32::INFINITY;
    for (r, &c) in codebook.iter().enumerate() {
        let d = (x - c).abs();
        if d < best_d {
            best_d = d;
            best = r;
        }
    }
    best
}

/// Vector-wise nearest-code mapping; ties resolve to the smallest index.
pub fn vq_quantize(z: &LatentGrid, cb: &VqCodebook) -> Result<(LatentGrid, Vec<usize>)> {
    if cb.n_z != z.n_z {
        return Err(Error::ShapeMismatch { op: "vq_quantize", lhs: vec![z.n_z], rhs: vec![cb.n_z] });
    }
    let sites = z.h * z.w;
    let mut indices = Vec::with_capacity(sites);
    let mut out = vec![0.0f32; z.values.len()];
    for s in 0..sites {
        let site = &z.values[s * z.n_z..(s + 1) * z.n_z];
        let idx = argmin_code(site, &cb.vectors, z.n_z);
        indices.push(idx);
        out[s * z.n_z..(s + 1) * z.n_z].copy_from_slice(cb.code(idx));
    }
    Ok((LatentGrid { h: z.h, w: z.w, n_z: z.n_z, values: out }, indices))
}

/// Component-wise nearest-scalar mapping over per-channel codebooks.
pub fn lq_quantize(z: &LatentGrid, cbs: &LqCodebooks) -> Result<(LatentGrid, Vec<usize>)> {
    if cbs.n_z != z.n_z {
        return Err(Error::ShapeMismatch { op: "lq_quantize", lhs: vec![z.n_z], rhs: vec![cbs.n_z] });
    }
    let mut indices = Vec::with_capacity(z.values.len());
    let mut out = vec![0.0f32; z.values.len()];
    for (flat, &v) in z.values.iter().enumerate() {
        let c = flat % z.n_z;
        let book = cbs.codebook(c);
        let idx = argmin_scalar(v, book);
        indices.push(idx);
        out[flat] = book[idx];
    }
    Ok((LatentGrid { h: z.h, w: z.w, n_z: z.n_z, values: out }, indices))
}

/// Which quantizer an autoencoder uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizerKind {
    Vq,
    Lq,
}

impl std::str::FromStr for QuantizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vq" => Ok(QuantizerKind::Vq),
            "lq" => Ok(QuantizerKind::Lq),
            other => Err(Error::invalid("quantizer", format!("unknown kind {other:?} (expected vq or lq)"))),
        }
    }
}

/// Tape-level quantization of a (N, n_z, h, w) latent node.
///
/// Returns the straight-through output `z + StopGradient(z_q_raw - z)`, the
/// raw gathered codes (differentiable w.r.t. the codebook), and the chosen
/// indices.
pub struct QuantizeNodes {
    pub straight_through: TensorId,
    pub raw: TensorId,
    pub indices: Vec<usize>,
}

pub fn vq_quantize_node(tape: &mut Tape, z: TensorId, codebook: TensorId) -> Result<QuantizeNodes> {
    let dz = tape.dims(z).to_vec();
    let dc = tape.dims(codebook).to_vec();
    if dz.len() != 4 || dc.len() != 2 || dz[1] != dc[1] {
        return Err(Error::ShapeMismatch { op: "vq_quantize", lhs: dz, rhs: dc });
    }
    let (n, nz, h, w) = (dz[0], dz[1], dz[2], dz[3]);
    let hw = h * w;
    let zv = tape.data(z);
    let cv = tape.data(codebook);
    let mut indices = Vec::with_capacity(n * hw);
    let mut site = vec![0.0f32; nz];
    for ni in 0..n {
        for s in 0..hw {
            for c in 0..nz {
                site[c] = zv[(ni * nz + c) * hw + s];
            }
            indices.push(argmin_code(&site, cv, nz));
        }
    }
    let raw = tape.gather_vq(codebook, &indices, (n, h, w))?;
    let st = straight_through(tape, z, raw)?;
    Ok(QuantizeNodes { straight_through: st, raw, indices })
}

pub fn lq_quantize_node(tape: &mut Tape, z: TensorId, codebooks: TensorId) -> Result<QuantizeNodes> {
    let dz = tape.dims(z).to_vec();
    let dc = tape.dims(codebooks).to_vec();
    if dz.len() != 4 || dc.len() != 2 || dz[1] != dc[0] {
        return Err(Error::ShapeMismatch { op: "lq_quantize", lhs: dz, rhs: dc });
    }
    let (nz, hw) = (dz[1], dz[2] * dz[3]);
    let rc = dc[1];
    let zv = tape.data(z);
    let cv = tape.data(codebooks);
    let mut indices = Vec::with_capacity(zv.len());
    for (flat, &v) in zv.iter().enumerate() {
        let c = (flat / hw) % nz;
        indices.push(argmin_scalar(v, &cv[c * rc..(c + 1) * rc]));
    }
    let raw = tape.gather_lq(codebooks, &indices, &dz)?;
    let st = straight_through(tape, z, raw)?;
    Ok(QuantizeNodes { straight_through: st, raw, indices })
}

fn straight_through(tape: &mut Tape, z: TensorId, raw: TensorId) -> Result<TensorId> {
    let delta = tape.sub(raw, z)?;
    let frozen = tape.stop_gradient(delta)?;
    tape.add(z, frozen)
}

/// ||StopGradient(z) - z_q_raw||^2 (mean); gradients reach only the codebook.
pub fn quantize_loss(tape: &mut Tape, z: TensorId, raw: TensorId) -> Result<TensorId> {
    let frozen = tape.stop_gradient(z)?;
    tape.mse_loss(frozen, raw)
}

/// ||z - StopGradient(z_q_raw)||^2 (mean); gradients reach only the encoder.
pub fn commit_loss(tape: &mut Tape, z: TensorId, raw: TensorId) -> Result<TensorId> {
    let frozen = tape.stop_gradient(raw)?;
    tape.mse_loss(z, frozen)
}

pub const VQ_PARAM: &str = "vq.codebook";
pub const LQ_PARAM: &str = "lq.codebook";

pub fn vq_into_store(cb: &VqCodebook, store: &mut ParamStore) {
    store.insert(VQ_PARAM, &[cb.k(), cb.n_z], cb.vectors.clone());
}

pub fn lq_into_store(cbs: &LqCodebooks, store: &mut ParamStore) {
    store.insert(LQ_PARAM, &[cbs.n_z, cbs.r_c], cbs.values.clone());
}

pub fn vq_from_store(store: &ParamStore) -> Result<VqCodebook> {
    let p = store.get(VQ_PARAM).ok_or_else(|| Error::invalid("vq_codebook", "missing vq.codebook parameter"))?;
    VqCodebook::from_flat(p.dims[0], p.dims[1], p.data.clone())
}

pub fn lq_from_store(store: &ParamStore) -> Result<LqCodebooks> {
    let p = store.get(LQ_PARAM).ok_or_else(|| Error::invalid("lq_codebooks", "missing lq.codebook parameter"))?;
    LqCodebooks::from_flat(p.dims[0], p.dims[1], p.data.clone())
}
