//! Dense float32 tensors with reverse-mode automatic differentiation.
//!
//! All ops are recorded eagerly on a [`Tape`]; [`Tape::backward`] replays the
//! tape in reverse to populate gradients for every `requires_grad` leaf.
//! Accumulation is float32 in fixed index-ascending order, so identical
//! inputs give bit-identical results.

mod conv;
mod gradcheck;
pub mod params;

pub use gradcheck::{check_gradients, check_gradients_from};
pub use params::{ParamStore, Sgd};

use crate::error::{Error, Result};

pub type TensorId = usize;

#[derive(Debug, Clone)]
#[allow(dead_code)] // attrs kept on the tape for debugging even when backward ignores them
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f32),
    AddScalar(TensorId, f32),
    Matmul(TensorId, TensorId),
    BiasAdd(TensorId, TensorId),
    Conv2d {
        input: TensorId,
        weight: TensorId,
        stride: (usize, usize),
        pad: usize,
    },
    Conv2dTranspose {
        input: TensorId,
        weight: TensorId,
        stride: (usize, usize),
        pad: usize,
    },
    Relu(TensorId),
    Silu(TensorId),
    Tanh(TensorId),
    Reshape(TensorId),
    Concat { inputs: Vec<TensorId>, axis: usize },
    Mean(TensorId),
    Sum(TensorId),
    L1Loss(TensorId, TensorId),
    MseLoss(TensorId, TensorId),
    StopGradient(TensorId),
    AffineScaleShift {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
    },
    /// out[n,c,i,j] = table[site_idx[n,i,j], c]
    GatherVq { table: TensorId, indices: Vec<usize> },
    /// out[n,c,i,j] = table[c, comp_idx[n,c,i,j]]
    GatherLq { table: TensorId, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    dims: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation graph. Confined to one thread; independent tapes may
/// run in parallel.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient buffers produced by [`Tape::backward`], keyed by tensor id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. tensor `id`; zeros if the tensor never
    /// contributed to the loss.
    pub fn get(&self, id: TensorId, len: usize) -> Vec<f32> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => vec![0.0; len],
        }
    }

    pub fn get_ref(&self, id: TensorId) -> Option<&[f32]> {
        self.grads[id].as_deref()
    }
}

fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].dims
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id].data
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, op: &'static str, dims: Vec<usize>, data: Vec<f32>, requires_grad: bool, opcode: Op) -> Result<TensorId> {
        debug_assert_eq!(numel(&dims), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node { dims, data, requires_grad, op: opcode });
        Ok(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.nodes[a].dims != self.nodes[b].dims {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a].dims.clone(),
                rhs: self.nodes[b].dims.clone(),
            });
        }
        Ok(())
    }

    pub fn leaf(&mut self, dims: &[usize], data: Vec<f32>, requires_grad: bool) -> Result<TensorId> {
        if numel(dims) != data.len() {
            return Err(Error::invalid(
                "leaf",
                format!("dims {:?} imply {} elements, got {}", dims, numel(dims), data.len()),
            ));
        }
        self.push("leaf", dims.to_vec(), data, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, dims: &[usize], data: Vec<f32>) -> Result<TensorId> {
        self.leaf(dims, data, false)
    }

    pub fn scalar(&mut self, v: f32) -> Result<TensorId> {
        self.constant(&[1], vec![v])
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data: Vec<f32> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        self.push("add", self.nodes[a].dims.clone(), data, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f32> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        self.push("sub", self.nodes[a].dims.clone(), data, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f32> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        self.push("mul", self.nodes[a].dims.clone(), data, rg, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: TensorId, s: f32) -> Result<TensorId> {
        let data: Vec<f32> = self.nodes[a].data.iter().map(|x| x * s).collect();
        let rg = self.nodes[a].requires_grad;
        self.push("scale", self.nodes[a].dims.clone(), data, rg, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: TensorId, s: f32) -> Result<TensorId> {
        let data: Vec<f32> = self.nodes[a].data.iter().map(|x| x + s).collect();
        let rg = self.nodes[a].requires_grad;
        self.push("add_scalar", self.nodes[a].dims.clone(), data, rg, Op::AddScalar(a, s))
    }

    /// (M,K) x (K,N) -> (M,N)
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (da, db) = (&self.nodes[a].dims, &self.nodes[b].dims);
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: da.clone(), rhs: db.clone() });
        }
        let (m, k, n) = (da[0], da[1], db[1]);
        let (av, bv) = (&self.nodes[a].data, &self.nodes[b].data);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += x * brow[j];
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        self.push("matmul", vec![m, n], out, rg, Op::Matmul(a, b))
    }

    /// Adds a per-channel bias: x is (N,C) or (N,C,H,W), bias is (C).
    pub fn bias_add(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let dx = self.nodes[x].dims.clone();
        let dbias = self.nodes[bias].dims.clone();
        let c = match dx.len() {
            2 => dx[1],
            4 => dx[1],
            _ => return Err(Error::ShapeMismatch { op: "bias_add", lhs: dx, rhs: dbias }),
        };
        if dbias != [c] {
            return Err(Error::ShapeMismatch { op: "bias_add", lhs: dx, rhs: dbias });
        }
        let inner: usize = if dx.len() == 4 { dx[2] * dx[3] } else { 1 };
        let bv = self.nodes[bias].data.clone();
        let mut out = self.nodes[x].data.clone();
        let per_sample = c * inner;
        for chunk in out.chunks_mut(per_sample) {
            for ci in 0..c {
                let b = bv[ci];
                for v in &mut chunk[ci * inner..(ci + 1) * inner] {
                    *v += b;
                }
            }
        }
        let rg = self.any_grad(&[x, bias]);
        self.push("bias_add", dx, out, rg, Op::BiasAdd(x, bias))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f32> = self.nodes[a].data.iter().map(|&x| x.max(0.0)).collect();
        let rg = self.nodes[a].requires_grad;
        self.push("relu", self.nodes[a].dims.clone(), data, rg, Op::Relu(a))
    }

    pub fn silu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f32> = self.nodes[a].data.iter().map(|&x| x * sigmoid(x)).collect();
        let rg = self.nodes[a].requires_grad;
        self.push("silu", self.nodes[a].dims.clone(), data, rg, Op::Silu(a))
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f32> = self.nodes[a].data.iter().map(|&x| x.tanh()).collect();
        let rg = self.nodes[a].requires_grad;
        self.push("tanh", self.nodes[a].dims.clone(), data, rg, Op::Tanh(a))
    }

    pub fn reshape(&mut self, a: TensorId, dims: &[usize]) -> Result<TensorId> {
        if numel(dims) != self.nodes[a].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a].dims.clone(),
                rhs: dims.to_vec(),
            });
        }
        let data = self.nodes[a].data.clone();
        let rg = self.nodes[a].requires_grad;
        self.push("reshape", dims.to_vec(), data, rg, Op::Reshape(a))
    }

    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let rank = self.nodes[inputs[0]].dims.len();
        if axis >= rank {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for rank {rank}")));
        }
        for &i in inputs {
            let d = &self.nodes[i].dims;
            if d.len() != rank {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.nodes[inputs[0]].dims.clone(),
                    rhs: d.clone(),
                });
            }
            for (ax, (&x, &y)) in d.iter().zip(&self.nodes[inputs[0]].dims).enumerate() {
                if ax != axis && x != y {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: self.nodes[inputs[0]].dims.clone(),
                        rhs: d.clone(),
                    });
                }
            }
        }
        let mut out_dims = self.nodes[inputs[0]].dims.clone();
        out_dims[axis] = inputs.iter().map(|&i| self.nodes[i].dims[axis]).sum();
        let outer: usize = out_dims[..axis].iter().product();
        let inner: usize = out_dims[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(numel(&out_dims));
        for o in 0..outer {
            for &i in inputs {
                let ax = self.nodes[i].dims[axis];
                let src = &self.nodes[i].data[o * ax * inner..(o + 1) * ax * inner];
                out.extend_from_slice(src);
            }
        }
        let rg = self.any_grad(inputs);
        self.push("concat", out_dims, out, rg, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.nodes[a].data.len() as f32;
        let mut acc = 0.0f32;
        for &v in &self.nodes[a].data {
            acc += v;
        }
        let rg = self.nodes[a].requires_grad;
        self.push("mean", vec![1], vec![acc / n], rg, Op::Mean(a))
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let mut acc = 0.0f32;
        for &v in &self.nodes[a].data {
            acc += v;
        }
        let rg = self.nodes[a].requires_grad;
        self.push("sum", vec![1], vec![acc], rg, Op::Sum(a))
    }

    /// Mean absolute error between `a` and `b`.
    pub fn l1_loss(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("l1_loss", a, b)?;
        let n = self.nodes[a].data.len() as f32;
        let mut acc = 0.0f32;
        for (x, y) in self.nodes[a].data.iter().zip(&self.nodes[b].data) {
            acc += (x - y).abs();
        }
        let rg = self.any_grad(&[a, b]);
        self.push("l1_loss", vec![1], vec![acc / n], rg, Op::L1Loss(a, b))
    }

    /// Mean squared error between `a` and `b`.
    pub fn mse_loss(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mse_loss", a, b)?;
        let n = self.nodes[a].data.len() as f32;
        let mut acc = 0.0f32;
        for (x, y) in self.nodes[a].data.iter().zip(&self.nodes[b].data) {
            let d = x - y;
            acc += d * d;
        }
        let rg = self.any_grad(&[a, b]);
        self.push("mse_loss", vec![1], vec![acc / n], rg, Op::MseLoss(a, b))
    }

    /// Identity forward; gradients never flow back through it.
    pub fn stop_gradient(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.nodes[a].data.clone();
        self.push("stop_gradient", self.nodes[a].dims.clone(), data, false, Op::StopGradient(a))
    }

    /// Per-channel modulation out[n,c,:,:] = gamma[n,c] * x[n,c,:,:] + beta[n,c].
    pub fn affine_scale_shift(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let dx = self.nodes[x].dims.clone();
        if dx.len() != 4 {
            return Err(Error::invalid("affine_scale_shift", format!("input must be 4-d, got {:?}", dx)));
        }
        let (n, c, h, w) = (dx[0], dx[1], dx[2], dx[3]);
        let want = vec![n, c];
        if self.nodes[gamma].dims != want {
            return Err(Error::ShapeMismatch { op: "affine_scale_shift", lhs: want, rhs: self.nodes[gamma].dims.clone() });
        }
        if self.nodes[beta].dims != want {
            return Err(Error::ShapeMismatch { op: "affine_scale_shift", lhs: want, rhs: self.nodes[beta].dims.clone() });
        }
        let inner = h * w;
        let mut out = vec![0.0f32; n * c * inner];
        for ni in 0..n {
            for ci in 0..c {
                let g = self.nodes[gamma].data[ni * c + ci];
                let b = self.nodes[beta].data[ni * c + ci];
                let base = (ni * c + ci) * inner;
                let src = &self.nodes[x].data[base..base + inner];
                let dst = &mut out[base..base + inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = g * s + b;
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push("affine_scale_shift", dx, out, rg, Op::AffineScaleShift { input: x, gamma, beta })
    }

    /// VQ code lookup: out[n,c,i,j] = table[indices[n*h*w + i*w + j], c].
    /// `out_spatial` is (n, h, w); the channel count comes from the table.
    pub fn gather_vq(&mut self, table: TensorId, indices: &[usize], out_spatial: (usize, usize, usize)) -> Result<TensorId> {
        let dt = self.nodes[table].dims.clone();
        if dt.len() != 2 {
            return Err(Error::invalid("gather_vq", format!("table must be 2-d, got {:?}", dt)));
        }
        let (k, nz) = (dt[0], dt[1]);
        let (n, h, w) = out_spatial;
        if indices.len() != n * h * w {
            return Err(Error::invalid("gather_vq", format!("expected {} indices, got {}", n * h * w, indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::invalid("gather_vq", format!("index {bad} out of range for {k} codes")));
        }
        let hw = h * w;
        let mut out = vec![0.0f32; n * nz * hw];
        for ni in 0..n {
            for (s, &idx) in indices[ni * hw..(ni + 1) * hw].iter().enumerate() {
                let code = &self.nodes[table].data[idx * nz..(idx + 1) * nz];
                for ci in 0..nz {
                    out[(ni * nz + ci) * hw + s] = code[ci];
                }
            }
        }
        let rg = self.nodes[table].requires_grad;
        self.push(
            "gather_vq",
            vec![n, nz, h, w],
            out,
            rg,
            Op::GatherVq { table, indices: indices.to_vec() },
        )
    }

    /// LQ scalar lookup: out[flat] = table[channel(flat), indices[flat]] for a
    /// (n, nz, h, w) output; table is (nz, r_c).
    pub fn gather_lq(&mut self, table: TensorId, indices: &[usize], out_dims: &[usize]) -> Result<TensorId> {
        let dt = self.nodes[table].dims.clone();
        if dt.len() != 2 || out_dims.len() != 4 || out_dims[1] != dt[0] {
            return Err(Error::ShapeMismatch { op: "gather_lq", lhs: dt, rhs: out_dims.to_vec() });
        }
        let rc = dt[1];
        if indices.len() != numel(out_dims) {
            return Err(Error::invalid("gather_lq", format!("expected {} indices, got {}", numel(out_dims), indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rc) {
            return Err(Error::invalid("gather_lq", format!("index {bad} out of range for {rc} entries")));
        }
        let (nz, hw) = (out_dims[1], out_dims[2] * out_dims[3]);
        let mut out = vec![0.0f32; indices.len()];
        for (flat, (&idx, o)) in indices.iter().zip(&mut out).enumerate() {
            let ci = (flat / hw) % nz;
            *o = self.nodes[table].data[ci * rc + idx];
        }
        let rg = self.nodes[table].requires_grad;
        self.push(
            "gather_lq",
            out_dims.to_vec(),
            out,
            rg,
            Op::GatherLq { table, indices: indices.to_vec() },
        )
    }

    /// Reverse-mode sweep from a scalar loss. Returns gradients for every
    /// `requires_grad` tensor reachable from it.
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward", "empty tape"));
        }
        if self.nodes[loss].data.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss].dims),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<f32>>], id: TensorId, add: impl FnOnce(&mut [f32])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let buf = grads[id].get_or_insert_with(|| vec![0.0; self.nodes[id].data.len()]);
        add(buf);
    }

    fn backprop_node(&self, id: TensorId, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::Add(a, b) => {
                self.accum(grads, a, |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                self.accum(grads, b, |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accum(grads, a, |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                self.accum(grads, b, |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a].data, &self.nodes[b].data);
                self.accum(grads, a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bv[i];
                    }
                });
                self.accum(grads, b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accum(grads, a, |buf| {
                    for (d, x) in buf.iter_mut().zip(g) {
                        *d += s * x;
                    }
                });
            }
            Op::AddScalar(a, _) => {
                self.accum(grads, a, |buf| {
                    for (d, x) in buf.iter_mut().zip(g) {
                        *d += x;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a].dims[0], self.nodes[a].dims[1]);
                let n = self.nodes[b].dims[1];
                let (av, bv) = (&self.nodes[a].data, &self.nodes[b].data);
                // dA = G B^T
                self.accum(grads, a, |buf| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0f32;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[p * n + j];
                            }
                            buf[i * k + p] += acc;
                        }
                    }
                });
                // dB = A^T G
                self.accum(grads, b, |buf| {
                    for p in 0..k {
                        for i in 0..m {
                            let x = av[i * k + p];
                            for j in 0..n {
                                buf[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::BiasAdd(x, bias) => {
                let dx = &self.nodes[x].dims;
                let c = dx[1];
                let inner: usize = if dx.len() == 4 { dx[2] * dx[3] } else { 1 };
                let per_sample = c * inner;
                self.accum(grads, x, |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                self.accum(grads, bias, |buf| {
                    for chunk in g.chunks(per_sample) {
                        for ci in 0..c {
                            let mut acc = 0.0f32;
                            for &v in &chunk[ci * inner..(ci + 1) * inner] {
                                acc += v;
                            }
                            buf[ci] += acc;
                        }
                    }
                });
            }
            Op::Conv2d { input, weight, stride, pad } => {
                conv::conv2d_backward(self, input, weight, stride, pad, &self.nodes[id].dims, g, grads);
            }
            Op::Conv2dTranspose { input, weight, stride, pad } => {
                conv::conv2d_transpose_backward(self, input, weight, stride, pad, g, grads);
            }
            Op::Relu(a) => {
                let av = &self.nodes[a].data;
                self.accum(grads, a, |buf| {
                    for i in 0..buf.len() {
                        if av[i] > 0.0 {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::Silu(a) => {
                let av = &self.nodes[a].data;
                self.accum(grads, a, |buf| {
                    for i in 0..buf.len() {
                        let s = sigmoid(av[i]);
                        buf[i] += g[i] * s * (1.0 + av[i] * (1.0 - s));
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = &self.nodes[id].data;
                self.accum(grads, a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * (1.0 - yv[i] * yv[i]);
                    }
                });
            }
            Op::Reshape(a) => {
                self.accum(grads, a, |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let out_dims = &self.nodes[id].dims;
                let outer: usize = out_dims[..axis].iter().product();
                let inner: usize = out_dims[axis + 1..].iter().product();
                let total_ax = out_dims[axis];
                let mut offset = 0usize;
                for &inp in &inputs {
                    let ax = self.nodes[inp].dims[axis];
                    self.accum(grads, inp, |buf| {
                        for o in 0..outer {
                            let src = &g[(o * total_ax + offset) * inner..(o * total_ax + offset + ax) * inner];
                            let dst = &mut buf[o * ax * inner..(o + 1) * ax * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += ax;
                }
            }
            Op::Mean(a) => {
                let n = self.nodes[a].data.len() as f32;
                let gv = g[0] / n;
                self.accum(grads, a, |buf| {
                    for d in buf.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[0];
                self.accum(grads, a, |buf| {
                    for d in buf.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::L1Loss(a, b) => {
                let n = self.nodes[a].data.len() as f32;
                let gv = g[0] / n;
                let (av, bv) = (&self.nodes[a].data, &self.nodes[b].data);
                self.accum(grads, a, |buf| {
                    for i in 0..buf.len() {
                        let d = av[i] - bv[i];
                        buf[i] += gv * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
                    }
                });
                self.accum(grads, b, |buf| {
                    for i in 0..buf.len() {
                        let d = av[i] - bv[i];
                        buf[i] -= gv * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
            Op::MseLoss(a, b) => {
                let n = self.nodes[a].data.len() as f32;
                let gv = 2.0 * g[0] / n;
                let (av, bv) = (&self.nodes[a].data, &self.nodes[b].data);
                self.accum(grads, a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gv * (av[i] - bv[i]);
                    }
                });
                self.accum(grads, b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] -= gv * (av[i] - bv[i]);
                    }
                });
            }
            Op::AffineScaleShift { input, gamma, beta } => {
                let dx = &self.nodes[input].dims;
                let (n, c, inner) = (dx[0], dx[1], dx[2] * dx[3]);
                let gv = &self.nodes[gamma].data;
                let xv = &self.nodes[input].data;
                self.accum(grads, input, |buf| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let gm = gv[ni * c + ci];
                            let base = (ni * c + ci) * inner;
                            for i in 0..inner {
                                buf[base + i] += g[base + i] * gm;
                            }
                        }
                    }
                });
                self.accum(grads, gamma, |buf| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * inner;
                            let mut acc = 0.0f32;
                            for i in 0..inner {
                                acc += g[base + i] * xv[base + i];
                            }
                            buf[ni * c + ci] += acc;
                        }
                    }
                });
                self.accum(grads, beta, |buf| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * inner;
                            let mut acc = 0.0f32;
                            for i in 0..inner {
                                acc += g[base + i];
                            }
                            buf[ni * c + ci] += acc;
                        }
                    }
                });
            }
            Op::GatherVq { table, indices } => {
                let out_dims = &self.nodes[id].dims;
                let (n, nz, hw) = (out_dims[0], out_dims[1], out_dims[2] * out_dims[3]);
                self.accum(grads, table, |buf| {
                    for ni in 0..n {
                        for (s, &idx) in indices[ni * hw..(ni + 1) * hw].iter().enumerate() {
                            for ci in 0..nz {
                                buf[idx * nz + ci] += g[(ni * nz + ci) * hw + s];
                            }
                        }
                    }
                });
            }
            Op::GatherLq { table, indices } => {
                let out_dims = &self.nodes[id].dims;
                let (nz, hw) = (out_dims[1], out_dims[2] * out_dims[3]);
                let rc = self.nodes[table].dims[1];
                self.accum(grads, table, |buf| {
                    for (flat, &idx) in indices.iter().enumerate() {
                        let ci = (flat / hw) % nz;
                        buf[ci * rc + idx] += g[flat];
                    }
                });
            }
        }
        Ok(())
    }
}

/// 2D convolution entry points live on Tape but the heavy loops sit in conv.rs.
impl Tape {
    /// Input (N,Cin,H,W), weight (Cout,Cin,KH,KW), zero padding `pad` on all
    /// sides, strides (sh, sw).
    pub fn conv2d(&mut self, input: TensorId, weight: TensorId, stride: (usize, usize), pad: usize) -> Result<TensorId> {
        let (dims, data) = conv::conv2d_forward(self, input, weight, stride, pad)?;
        let rg = self.any_grad(&[input, weight]);
        self.push("conv2d", dims, data, rg, Op::Conv2d { input, weight, stride, pad })
    }

    /// Input (N,Cin,H,W), weight (Cin,Cout,KH,KW); out spatial
    /// (H-1)*sh - 2*pad + KH.
    pub fn conv2d_transpose(&mut self, input: TensorId, weight: TensorId, stride: (usize, usize), pad: usize) -> Result<TensorId> {
        let (dims, data) = conv::conv2d_transpose_forward(self, input, weight, stride, pad)?;
        let rg = self.any_grad(&[input, weight]);
        self.push("conv2d_transpose", dims, data, rg, Op::Conv2dTranspose { input, weight, stride, pad })
    }
}
