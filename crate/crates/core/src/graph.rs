//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation applied to its variables in creation
//! order. [`Graph::backward`] walks that record in reverse and returns a fresh
//! [`Gradients`] value; the graph itself is never mutated by a backward pass,
//! so repeated calls yield identical results.
//!
//! Parameters are bound by reference when the graph is created from a
//! [`ParamSet`], occupying the first `params.len()` slots of the tape.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::metrics::nearest_indices;
use crate::params::{ParamId, ParamSet};
use crate::tensor::{broadcast_shape, numel, split_axis, Broadcast, Tensor};

/// A variable recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Point-set distance flavor used by [`Graph::chamfer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChamferKind {
    /// Sum of the two directed mean squared nearest distances.
    L2,
    /// Half the sum of the two directed mean nearest distances.
    L1,
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, p: usize, q: usize, r: usize, a_shared: bool, b_shared: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Relu { a: Var },
    Softmax { a: Var, axis: usize },
    Permute { a: Var, map: Vec<usize> },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    ReduceMax { a: Var, argmax: Vec<usize> },
    ReduceSum { a: Var, axis: usize, mean: bool },
    SumAll { a: Var, mean: bool },
    IndexSelect { a: Var, axis: usize, indices: Vec<usize> },
    Chamfer { a: Var, b: Var, kind: ChamferKind, ab: Vec<usize>, ba: Vec<usize>, n: usize, m: usize },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Confined to one thread; independent graphs may run concurrently.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    bound_params: usize,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), bound_params: 0 }
    }

    /// Creates a graph whose first slots are the parameters of `params`, all
    /// requiring gradients.
    pub fn with_params(params: &'p ParamSet) -> Self {
        let nodes = params
            .tensors()
            .iter()
            .map(|t| Node { value: Value::Borrowed(t), op: Op::Leaf, requires_grad: true })
            .collect();
        Graph { nodes, bound_params: params.len() }
    }

    pub fn param(&self, id: ParamId) -> Var {
        debug_assert!(id.0 < self.bound_params, "parameter {} not bound to this graph", id.0);
        Var(id.0)
    }

    pub fn bound_params(&self) -> usize {
        self.bound_params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.tensor()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, t: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Batched matrix product `[.., p, q] x [.., q, r] -> [.., p, r]`.
    ///
    /// Batch dimensions must be equal, or one side must be a plain matrix
    /// shared across the other side's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(dim_err!("matmul needs rank >= 2 operands, got {:?} and {:?}", sa, sb));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return Err(dim_err!("matmul inner dimensions differ: {:?} x {:?}", sa, sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let b_shared = bb.is_empty();
        let a_shared = !b_shared && ba.is_empty();
        if !a_shared && !b_shared && ba != bb {
            return Err(dim_err!("matmul batch dimensions differ: {:?} x {:?}", sa, sb));
        }
        let batch_shape = if b_shared { ba.to_vec() } else { bb.to_vec() };
        let batch = numel(&batch_shape);
        let mut out_shape = batch_shape;
        out_shape.extend_from_slice(&[p, r]);
        let mut out = vec![0.0; batch * p * r];
        {
            let (da, db) = (self.data(a), self.data(b));
            if b_shared {
                gemm(batch * p, q, r, da, q, 1, db, r, 1, &mut out, 0.0);
            } else {
                for i in 0..batch {
                    let ao = if a_shared { 0 } else { i * p * q };
                    gemm(p, q, r, &da[ao..ao + p * q], q, 1, &db[i * q * r..(i + 1) * q * r], r, 1,
                        &mut out[i * p * r..(i + 1) * p * r], 0.0);
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b, batch, p, q, r, a_shared, b_shared }, rg))
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb)
            .ok_or_else(|| dim_err!("cannot broadcast {:?} with {:?}", sa, sb))?;
        let (ma, mb) = (Broadcast::new(sa, &out_shape), Broadcast::new(sb, &out_shape));
        let (da, db) = (self.data(a), self.data(b));
        let n = numel(&out_shape);
        let out: Vec<f64> = match (&ma, &mb) {
            (Broadcast::Same, Broadcast::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            (Broadcast::Same, Broadcast::Suffix(k)) => {
                da.chunks(*k).flat_map(|row| row.iter().zip(db).map(|(&x, &y)| f(x, y))).collect()
            }
            _ => (0..n).map(|i| f(da[ma.index(i)], db[mb.index(i)])).collect(),
        };
        Ok((Tensor::new(out_shape, out)?, self.rg(a) || self.rg(b)))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.broadcast_binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    /// Elementwise difference with broadcasting.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.broadcast_binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.broadcast_binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, c }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Relu { a }, rg)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("softmax axis {axis} invalid for shape {:?}", shape));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.data(a);
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..len {
                    mx = mx.max(x[base + k * inner]);
                }
                let mut sum = 0.0;
                for k in 0..len {
                    let e = libm::exp(x[base + k * inner] - mx);
                    y[base + k * inner] = e;
                    sum += e;
                }
                for k in 0..len {
                    y[base + k * inner] /= sum;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, y)?, Op::Softmax { a, axis }, rg))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if d0 >= shape.len() || d1 >= shape.len() {
            return Err(dim_err!("transpose axes ({d0}, {d1}) invalid for shape {:?}", shape));
        }
        let mut out_shape = shape.clone();
        out_shape.swap(d0, d1);
        let map = swap_index_map(&shape, d0, d1);
        let x = self.data(a);
        let y: Vec<f64> = map.iter().map(|&i| x[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, y)?, Op::Permute { a, map }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if numel(shape) != v.numel() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", v.shape(), shape));
        }
        let t = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| contract_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {axis} invalid for shape {:?}", base));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(dim_err!("concat shape mismatch along axis {axis}: {:?} vs {:?}", base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                out.extend_from_slice(&self.data(p)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Maximum along `axis` (removed). Gradient goes to the first maximal element.
    pub fn reduce_max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(dim_err!("reduce_max axis {axis} invalid for shape {:?}", shape));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.data(a);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for k in 1..len {
                    let idx = base + k * inner;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out[o * inner + i] = x[best];
                argmax[o * inner + i] = best;
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::ReduceMax { a, argmax }, rg))
    }

    fn reduce_sum_impl(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(dim_err!("reduction axis {axis} invalid for shape {:?}", shape));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::ReduceSum { a, axis, mean }, rg))
    }

    pub fn reduce_sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_sum_impl(a, axis, false)
    }

    pub fn reduce_mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_sum_impl(a, axis, true)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll { a, mean: false }, rg)
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll { a, mean: true }, rg)
    }

    /// Gathers `indices` along `axis`. Indices may repeat.
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("index_select axis {axis} invalid for shape {:?}", shape));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(dim_err!("index {bad} out of range for axis {axis} of shape {:?}", shape));
        }
        let x = self.data(a);
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &k in indices {
                out.extend_from_slice(&x[(o * len + k) * inner..(o * len + k + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::IndexSelect { a, axis, indices: indices.to_vec() }, rg))
    }

    /// Chamfer distance between point sets `a: [.., n, 3]` and `b: [.., m, 3]`.
    ///
    /// Leading dimensions must match; the result has those leading dimensions
    /// (rank 0 for plain point sets). Nearest-neighbor ties resolve to the
    /// lowest index and gradients flow through each point's matched pair.
    pub fn chamfer(&mut self, a: Var, b: Var, kind: ChamferKind) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != 3 || sb[sb.len() - 1] != 3 {
            return Err(dim_err!("chamfer needs [.., n, 3] point sets, got {:?} and {:?}", sa, sb));
        }
        if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(dim_err!("chamfer batch dimensions differ: {:?} vs {:?}", sa, sb));
        }
        let (n, m) = (sa[sa.len() - 2], sb[sb.len() - 2]);
        if n == 0 || m == 0 {
            return Err(contract_err!("chamfer distance of an empty point set"));
        }
        let batch_shape = sa[..sa.len() - 2].to_vec();
        let batch = numel(&batch_shape);
        let (da, db) = (self.data(a), self.data(b));
        if !da.iter().chain(db).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("chamfer input has a non-finite coordinate".into()));
        }
        let mut ab = Vec::with_capacity(batch * n);
        let mut ba = Vec::with_capacity(batch * m);
        let mut out = Vec::with_capacity(batch);
        for i in 0..batch {
            let pa = to_points(&da[i * n * 3..(i + 1) * n * 3]);
            let pb = to_points(&db[i * m * 3..(i + 1) * m * 3]);
            let nab = nearest_indices(&pa, &pb);
            let nba = nearest_indices(&pb, &pa);
            let term = |src: &[[f64; 3]], dst: &[[f64; 3]], nn: &[usize]| -> f64 {
                let s: f64 = src
                    .iter()
                    .zip(nn)
                    .map(|(p, &j)| {
                        let d2 = sq_dist(p, &dst[j]);
                        match kind {
                            ChamferKind::L2 => d2,
                            ChamferKind::L1 => libm::sqrt(d2),
                        }
                    })
                    .sum();
                s / src.len() as f64
            };
            let total = term(&pa, &pb, &nab) + term(&pb, &pa, &nba);
            out.push(match kind {
                ChamferKind::L2 => total,
                ChamferKind::L1 => 0.5 * total,
            });
            ab.extend(nab);
            ba.extend(nba);
        }
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(batch_shape, out)?;
        Ok(self.push(t, Op::Chamfer { a, b, kind, ab, ba, n, m }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(contract_err!("backward requires a scalar loss, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.tensor();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, batch, p, q, r, a_shared, b_shared } => {
                let (batch, p, q, r) = (*batch, *p, *q, *r);
                let (da, db) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    let ga = self.grad_buf(grads, *a);
                    if *b_shared {
                        // dA = dC . B^T
                        gemm(batch * p, r, q, g, r, 1, db, 1, r, ga, 1.0);
                    } else {
                        for i in 0..batch {
                            let ao = if *a_shared { 0 } else { i * p * q };
                            gemm(p, r, q, &g[i * p * r..(i + 1) * p * r], r, 1,
                                &db[i * q * r..(i + 1) * q * r], 1, r, &mut ga[ao..ao + p * q], 1.0);
                        }
                    }
                }
                if self.rg(*b) {
                    let gb = self.grad_buf(grads, *b);
                    if *b_shared {
                        // dB = A^T . dC
                        gemm(q, batch * p, r, da, 1, q, g, r, 1, gb, 1.0);
                    } else {
                        for i in 0..batch {
                            let ao = if *a_shared { 0 } else { i * p * q };
                            gemm(q, p, r, &da[ao..ao + p * q], 1, q, &g[i * p * r..(i + 1) * p * r], r, 1,
                                &mut gb[i * q * r..(i + 1) * q * r], 1.0);
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                let out_shape = out.shape();
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                let is_mul = matches!(node.op, Op::Mul { .. });
                let ma = Broadcast::new(self.shape(*a), out_shape);
                let mb = Broadcast::new(self.shape(*b), out_shape);
                if self.rg(*a) {
                    let other = self.data(*b);
                    let ga = self.grad_buf(grads, *a);
                    if !is_mul && matches!(ma, Broadcast::Same) {
                        ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
                    } else if let (false, Broadcast::Suffix(k)) = (is_mul, &ma) {
                        for row in g.chunks(*k) {
                            ga.iter_mut().zip(row).for_each(|(x, gi)| *x += gi);
                        }
                    } else {
                        for (i, gi) in g.iter().enumerate() {
                            ga[ma.index(i)] += if is_mul { gi * other[mb.index(i)] } else { *gi };
                        }
                    }
                }
                if self.rg(*b) {
                    let other = self.data(*a);
                    let gb = self.grad_buf(grads, *b);
                    if !is_mul && matches!(mb, Broadcast::Same) {
                        gb.iter_mut().zip(g).for_each(|(x, gi)| *x += sign * gi);
                    } else if let (false, Broadcast::Suffix(k)) = (is_mul, &mb) {
                        for row in g.chunks(*k) {
                            gb.iter_mut().zip(row).for_each(|(x, gi)| *x += sign * gi);
                        }
                    } else {
                        for (i, gi) in g.iter().enumerate() {
                            gb[mb.index(i)] += if is_mul { gi * other[ma.index(i)] } else { sign * gi };
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                let ga = self.grad_buf(grads, *a);
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += c * gi);
            }
            Op::Relu { a } => {
                let y = out.data();
                let ga = self.grad_buf(grads, *a);
                for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    if *yi > 0.0 {
                        *x += gi;
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let ga = self.grad_buf(grads, *a);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                        for k in 0..len {
                            let j = base + k * inner;
                            ga[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::Permute { a, map } => {
                let ga = self.grad_buf(grads, *a);
                for (gi, &src) in g.iter().zip(map) {
                    ga[src] += gi;
                }
            }
            Op::Reshape { a } => {
                let ga = self.grad_buf(grads, *a);
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        let gp = self.grad_buf(grads, p);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (x, gi) in gp[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *x += gi;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::ReduceMax { a, argmax } => {
                let ga = self.grad_buf(grads, *a);
                for (gi, &src) in g.iter().zip(argmax) {
                    ga[src] += gi;
                }
            }
            Op::ReduceSum { a, axis, mean } => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                let f = if *mean { 1.0 / len as f64 } else { 1.0 };
                let ga = self.grad_buf(grads, *a);
                for o in 0..outer {
                    for k in 0..len {
                        let row = &mut ga[(o * len + k) * inner..(o * len + k + 1) * inner];
                        for (x, gi) in row.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *x += f * gi;
                        }
                    }
                }
            }
            Op::SumAll { a, mean } => {
                let n = self.value(*a).numel();
                let f = if *mean { g[0] / n.max(1) as f64 } else { g[0] };
                let ga = self.grad_buf(grads, *a);
                ga.iter_mut().for_each(|x| *x += f);
            }
            Op::IndexSelect { a, axis, indices } => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                let k = indices.len();
                let ga = self.grad_buf(grads, *a);
                for o in 0..outer {
                    for (slot, &src) in indices.iter().enumerate() {
                        let from = &g[(o * k + slot) * inner..(o * k + slot + 1) * inner];
                        for (x, gi) in ga[(o * len + src) * inner..(o * len + src + 1) * inner].iter_mut().zip(from) {
                            *x += gi;
                        }
                    }
                }
            }
            Op::Chamfer { a, b, kind, ab, ba, n, m } => {
                let (n, m) = (*n, *m);
                let (da, db) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                let mut gra = vec![0.0; da.len()];
                let mut grb = vec![0.0; db.len()];
                for (bi, gi) in g.iter().enumerate() {
                    let half = match kind {
                        ChamferKind::L2 => 1.0,
                        ChamferKind::L1 => 0.5,
                    };
                    let pa = &da[bi * n * 3..(bi + 1) * n * 3];
                    let pb = &db[bi * m * 3..(bi + 1) * m * 3];
                    let ga = &mut gra[bi * n * 3..(bi + 1) * n * 3];
                    let gb = &mut grb[bi * m * 3..(bi + 1) * m * 3];
                    directed_grad(pa, pb, &ab[bi * n..(bi + 1) * n], *kind, gi * half / n as f64, ga, gb);
                    directed_grad(pb, pa, &ba[bi * m..(bi + 1) * m], *kind, gi * half / m as f64, gb, ga);
                }
                if self.rg(*a) {
                    let ga = self.grad_buf(grads, *a);
                    ga.iter_mut().zip(&gra).for_each(|(x, v)| *x += v);
                }
                if self.rg(*b) {
                    let gb = self.grad_buf(grads, *b);
                    gb.iter_mut().zip(&grb).for_each(|(x, v)| *x += v);
                }
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

/// Accumulates the gradient of `w * sum_i dist(src_i, dst_nn(i))` into
/// `g_src` and `g_dst`.
fn directed_grad(src: &[f64], dst: &[f64], nn: &[usize], kind: ChamferKind, w: f64, g_src: &mut [f64], g_dst: &mut [f64]) {
    for (i, &j) in nn.iter().enumerate() {
        let d = [src[3 * i] - dst[3 * j], src[3 * i + 1] - dst[3 * j + 1], src[3 * i + 2] - dst[3 * j + 2]];
        let f = match kind {
            ChamferKind::L2 => 2.0 * w,
            ChamferKind::L1 => {
                let norm = libm::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
                if norm == 0.0 {
                    continue;
                }
                w / norm
            }
        };
        for c in 0..3 {
            g_src[3 * i + c] += f * d[c];
            g_dst[3 * j + c] -= f * d[c];
        }
    }
}

pub(crate) fn to_points(flat: &[f64]) -> Vec<[f64; 3]> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// For every flat index of the transposed tensor, the flat source index.
fn swap_index_map(shape: &[usize], d0: usize, d1: usize) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(d0, d1);
    let mut strides = in_strides;
    strides.swap(d0, d1);
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// `c = a . b + beta * c` for an `m x k` by `k x n` product with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, c: &mut [f64], beta: f64) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index dgemm touches inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa as isize, csa as isize,
            b.as_ptr(), rsb as isize, csb as isize,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer of `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` with zeros for unreachable variables.
    pub fn wrt(&self, graph: &Graph<'_>, v: Var) -> Tensor {
        let shape = graph.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradients of every bound parameter, in parameter order.
    pub fn into_param_grads(mut self, params: &ParamSet) -> Vec<Vec<f64>> {
        params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| self.grads.get_mut(i).and_then(Option::take).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let v = g.constant(mat(&[&[3.0], &[4.0]]));
        let y = g.matmul(i, v).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);
        let a = g.constant(mat(&[&[1.0, 2.0]]));
        let y = g.matmul(a, v).unwrap();
        assert_eq!(g.value(y).data(), &[11.0]);
        assert_eq!(g.shape(y), &[1, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0; 4]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
        let x = g.constant(Tensor::from_vec(vec![1000.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert_eq!(d[0], 1.0);
        assert!(d[1] >= 0.0 && d[1] < 1e-300);
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn elementwise_basics() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let m = g.constant(mat(&[&[1.0, 5.0], &[3.0, 2.0]]));
        let y = g.reduce_max(m, 0).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 5.0]);
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.constant(Tensor::from_vec(vec![3.0]));
        let y = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
        let c = g.constant(Tensor::zeros([3]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn reduce_max_tie_goes_to_lowest_index() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![2.0, 2.0, 1.0]));
        let y = g.reduce_max(x, 0).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[2.0, 4.0]);
        // A second pass over the same tape is identical.
        let again = g.backward(loss).unwrap();
        assert_eq!(again.get(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_constant_loss_gives_zero_grads() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let c = g.constant(Tensor::scalar(3.0));
        let loss = g.scale(c, 2.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(&g, w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn transpose_swaps_axes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = g.transpose(x, 0, 1).unwrap();
        assert_eq!(g.shape(y), &[3, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn chamfer_single_points() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new([1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        let b = g.constant(Tensor::new([1, 3], vec![1.0, 0.0, 0.0]).unwrap());
        let l2 = g.chamfer(a, b, ChamferKind::L2).unwrap();
        let l1 = g.chamfer(a, b, ChamferKind::L1).unwrap();
        assert_eq!(g.value(l2).item(), Some(2.0));
        assert_eq!(g.value(l1).item(), Some(1.0));
    }
}
