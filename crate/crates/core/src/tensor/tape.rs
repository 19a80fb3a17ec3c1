//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Primitive
//! applications append nodes in topological order (inputs always precede
//! their consumers), and [`Tape::backward`] replays them in reverse,
//! accumulating gradients by addition into pre-zeroed slots so shared
//! subexpressions combine correctly. The tape is rebuilt on every forward
//! pass; there is no graph caching.

use std::sync::Arc;

use super::kernels::{
    binary_broadcast, broadcast_shapes, broadcast_to, invert_permutation, layer_norm_last,
    matmul_broadcast, permute, reduce_to_shape, softmax_axis, MatKind,
};
use super::{gelu_grad_scalar, gelu_scalar, Result, Scalar, Tensor, TensorError};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Gelu(Var),
    SumAll(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Broadcast(Var),
    Gather {
        x: Var,
        map: Arc<Vec<u32>>,
        split: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Single-owner: one tape per forward pass, never shared
/// across concurrent training steps.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` required one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots[v.0].as_ref()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a tensor that does not participate in differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Record a differentiable leaf (a parameter or input under study).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    // ── Elementwise and linear primitives ───────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = binary_broadcast(
            self.value(a).data(),
            self.value(a).shape(),
            self.value(b).data(),
            self.value(b).shape(),
            |x, y| x + y,
        )?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = binary_broadcast(
            self.value(a).data(),
            self.value(a).shape(),
            self.value(b).data(),
            self.value(b).shape(),
            |x, y| x - y,
        )?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = binary_broadcast(
            self.value(a).data(),
            self.value(a).shape(),
            self.value(b).data(),
            self.value(b).shape(),
            |x, y| x * y,
        )?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let value = self.value(a).map(|x| x * cv);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Contracted product over the trailing two axes with batch broadcasting.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = matmul_broadcast(
            self.value(a).data(),
            self.value(a).shape(),
            self.value(b).data(),
            self.value(b).shape(),
            MatKind::NN,
        )?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Matmul(a, b), rg))
    }

    /// `a @ b^T` over the trailing two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = matmul_broadcast(
            self.value(a).data(),
            self.value(a).shape(),
            self.value(b).data(),
            self.value(b).shape(),
            MatKind::NT,
        )?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MatmulNT(a, b), rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let data = softmax_axis(self.value(a).data(), self.value(a).shape(), axis)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax(a, axis), rg))
    }

    /// Layer normalization over the last axis followed by the affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Invalid {
                context: "layer_norm",
                message: format!("eps must be positive, got {eps}"),
            });
        }
        let data = layer_norm_last(
            self.value(x).data(),
            self.value(x).shape(),
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        )?;
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::LayerNorm { x, gain, bias, eps },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| T::from_f64(gelu_scalar(x.to_f64())));
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Sum of all entries; result has rank 0.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in self.value(a).data() {
            acc += v;
        }
        let rg = self.rg(a);
        self.push(Tensor::scalar(acc), Op::SumAll(a), rg)
    }

    /// Mean of all entries; result has rank 0.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.value(a).rank();
        if perm.len() != rank {
            return Err(TensorError::Invalid {
                context: "permute",
                message: format!("permutation {perm:?} for rank {rank}"),
            });
        }
        let (shape, data) = permute(self.value(a).data(), self.value(a).shape(), perm);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Permute(a, perm.to_vec()),
            rg,
        ))
    }

    /// Materialized broadcast of `a` up to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = broadcast_shapes(self.value(a).shape(), shape)?;
        if out != shape {
            return Err(TensorError::ShapeMismatch {
                context: "broadcast target",
                lhs: self.value(a).shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = broadcast_to(self.value(a).data(), self.value(a).shape(), shape);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Broadcast(a), rg))
    }

    /// View `a` as `[prefix, inner]` split at axis `split`, and for every
    /// prefix block emit `inner'[i] = inner[map[i]]`. The output tail shape
    /// must hold exactly `map.len()` elements. Repeated indices are allowed;
    /// their gradients accumulate.
    pub fn gather(
        &mut self,
        a: Var,
        split: usize,
        map: Arc<Vec<u32>>,
        out_tail: &[usize],
    ) -> Result<Var> {
        let shape = self.value(a).shape();
        if split > shape.len() {
            return Err(TensorError::BadAxis {
                axis: split,
                rank: shape.len(),
            });
        }
        let prefix: usize = shape[..split].iter().product();
        let inner: usize = shape[split..].iter().product();
        let tail_numel: usize = out_tail.iter().product();
        if tail_numel != map.len() {
            return Err(TensorError::Invalid {
                context: "gather",
                message: format!(
                    "tail shape {out_tail:?} holds {tail_numel} elements but map has {}",
                    map.len()
                ),
            });
        }
        if let Some(&bad) = map.iter().find(|&&i| i as usize >= inner) {
            return Err(TensorError::Invalid {
                context: "gather",
                message: format!("index {bad} out of range for inner extent {inner}"),
            });
        }
        let data_in = self.value(a).data();
        let mut data = Vec::with_capacity(prefix * map.len());
        for b in 0..prefix {
            let block = &data_in[b * inner..(b + 1) * inner];
            for &i in map.iter() {
                data.push(block[i as usize]);
            }
        }
        let mut out_shape = shape[..split].to_vec();
        out_shape.extend_from_slice(out_tail);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Gather { x: a, map, split },
            rg,
        ))
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                context: "concat",
                message: "no parts".into(),
            });
        }
        let rank = self.value(parts[0]).rank();
        if axis >= rank {
            return Err(TensorError::BadAxis { axis, rank });
        }
        let mut out_shape = self.value(parts[0]).shape().to_vec();
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != rank
                || s[..axis] != out_shape[..axis]
                || s[axis + 1..] != out_shape[axis + 1..]
            {
                return Err(TensorError::ShapeMismatch {
                    context: "concat",
                    lhs: out_shape,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let ax = t.shape()[axis];
                let start = o * ax * inner;
                data.extend_from_slice(&t.data()[start..start + ax * inner]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    // ── Backward pass ───────────────────────────────────────────────────

    /// Accumulate gradients of the scalar `loss` with respect to every node
    /// that requires them, in reverse topological order. Leaves without
    /// `requires_grad` are untouched.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::from_parts(lt.shape().to_vec(), vec![T::ONE]));

        for i in (0..=loss.0).rev() {
            if slots[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = slots[i].clone().unwrap();
            self.propagate(Var(i), &g, &mut slots)?;
        }
        Ok(Gradients { slots })
    }

    fn accumulate(&self, slots: &mut [Option<Tensor<T>>], v: Var, contrib: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match slots[v.0].take() {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), contrib.shape());
                let (shape, mut data) = acc.into_parts();
                for (d, c) in data.iter_mut().zip(contrib.data()) {
                    *d += *c;
                }
                slots[v.0] = Some(Tensor::from_parts(shape, data));
            }
            None => slots[v.0] = Some(contrib),
        }
    }

    fn reduce_grad(&self, g: &Tensor<T>, to: Var) -> Tensor<T> {
        let target = self.value(to).shape();
        let data = reduce_to_shape(g.data(), g.shape(), target);
        Tensor::from_parts(target.to_vec(), data)
    }

    fn propagate(
        &self,
        v: Var,
        g: &Tensor<T>,
        slots: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &self.nodes[v.0].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    let ga = self.reduce_grad(g, *a);
                    self.accumulate(slots, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.reduce_grad(g, *b);
                    self.accumulate(slots, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    let ga = self.reduce_grad(g, *a);
                    self.accumulate(slots, *a, ga);
                }
                if self.rg(*b) {
                    let neg = g.map(|x| -x);
                    let gb = self.reduce_grad(&neg, *b);
                    self.accumulate(slots, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let (shape, data) = binary_broadcast(
                        g.data(),
                        g.shape(),
                        self.value(*b).data(),
                        self.value(*b).shape(),
                        |x, y| x * y,
                    )?;
                    let ga = self.reduce_grad(&Tensor::from_parts(shape, data), *a);
                    self.accumulate(slots, *a, ga);
                }
                if self.rg(*b) {
                    let (shape, data) = binary_broadcast(
                        g.data(),
                        g.shape(),
                        self.value(*a).data(),
                        self.value(*a).shape(),
                        |x, y| x * y,
                    )?;
                    let gb = self.reduce_grad(&Tensor::from_parts(shape, data), *b);
                    self.accumulate(slots, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    let cv = T::from_f64(*c);
                    self.accumulate(slots, *a, g.map(|x| x * cv));
                }
            }
            Op::Matmul(a, b) => {
                // d a = g @ b^T, d b = a^T @ g, then fold broadcast batch dims.
                if self.rg(*a) {
                    let (shape, data) = matmul_broadcast(
                        g.data(),
                        g.shape(),
                        self.value(*b).data(),
                        self.value(*b).shape(),
                        MatKind::NT,
                    )?;
                    let ga = self.reduce_grad(&Tensor::from_parts(shape, data), *a);
                    self.accumulate(slots, *a, ga);
                }
                if self.rg(*b) {
                    let (shape, data) = matmul_broadcast(
                        self.value(*a).data(),
                        self.value(*a).shape(),
                        g.data(),
                        g.shape(),
                        MatKind::TN,
                    )?;
                    let gb = self.reduce_grad(&Tensor::from_parts(shape, data), *b);
                    self.accumulate(slots, *b, gb);
                }
            }
            Op::MatmulNT(a, b) => {
                // out = a @ b^T: d a = g @ b, d b = g^T @ a.
                if self.rg(*a) {
                    let (shape, data) = matmul_broadcast(
                        g.data(),
                        g.shape(),
                        self.value(*b).data(),
                        self.value(*b).shape(),
                        MatKind::NN,
                    )?;
                    let ga = self.reduce_grad(&Tensor::from_parts(shape, data), *a);
                    self.accumulate(slots, *a, ga);
                }
                if self.rg(*b) {
                    let (shape, data) = matmul_broadcast(
                        g.data(),
                        g.shape(),
                        self.value(*a).data(),
                        self.value(*a).shape(),
                        MatKind::TN,
                    )?;
                    let gb = self.reduce_grad(&Tensor::from_parts(shape, data), *b);
                    self.accumulate(slots, *b, gb);
                }
            }
            Op::Softmax(a, axis) => {
                if self.rg(*a) {
                    let y = self.value(v);
                    let shape = y.shape();
                    let axis_len = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let mut dx = vec![T::ZERO; y.numel()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * axis_len * inner + i;
                            let mut dot = T::ZERO;
                            for s in 0..axis_len {
                                let k = base + s * inner;
                                dot += g.data()[k] * y.data()[k];
                            }
                            for s in 0..axis_len {
                                let k = base + s * inner;
                                dx[k] = y.data()[k] * (g.data()[k] - dot);
                            }
                        }
                    }
                    self.accumulate(
                        slots,
                        *a,
                        Tensor::from_parts(shape.to_vec(), dx),
                    );
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let c = *xv.shape().last().unwrap();
                let slices = xv.numel() / c;
                let gv = self.value(*gain).data();
                let mut dx = vec![T::ZERO; xv.numel()];
                let mut dgain = vec![0.0f64; c];
                let mut dbias = vec![0.0f64; c];
                for s in 0..slices {
                    let xs = &xv.data()[s * c..(s + 1) * c];
                    let gs = &g.data()[s * c..(s + 1) * c];
                    let mut mean = 0.0f64;
                    for v in xs {
                        mean += v.to_f64();
                    }
                    mean /= c as f64;
                    let mut var = 0.0f64;
                    for v in xs {
                        let d = v.to_f64() - mean;
                        var += d * d;
                    }
                    var /= c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    // dxhat_j = g_j * gain_j; dx follows the closed form.
                    let mut sum_dxhat = 0.0f64;
                    let mut sum_dxhat_xhat = 0.0f64;
                    let mut xhat = vec![0.0f64; c];
                    let mut dxhat = vec![0.0f64; c];
                    for j in 0..c {
                        xhat[j] = (xs[j].to_f64() - mean) * inv;
                        dxhat[j] = gs[j].to_f64() * gv[j].to_f64();
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                        dgain[j] += gs[j].to_f64() * xhat[j];
                        dbias[j] += gs[j].to_f64();
                    }
                    for j in 0..c {
                        let val = inv / c as f64
                            * (c as f64 * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        dx[s * c + j] = T::from_f64(val);
                    }
                }
                if self.rg(*x) {
                    self.accumulate(slots, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if self.rg(*gain) {
                    let t = Tensor::from_parts(
                        vec![c],
                        dgain.iter().map(|&v| T::from_f64(v)).collect(),
                    );
                    self.accumulate(slots, *gain, t);
                }
                if self.rg(*bias) {
                    let t = Tensor::from_parts(
                        vec![c],
                        dbias.iter().map(|&v| T::from_f64(v)).collect(),
                    );
                    self.accumulate(slots, *bias, t);
                }
            }
            Op::Gelu(a) => {
                if self.rg(*a) {
                    let xv = self.value(*a);
                    let data: Vec<T> = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gg)| gg * T::from_f64(gelu_grad_scalar(x.to_f64())))
                        .collect();
                    self.accumulate(slots, *a, Tensor::from_parts(xv.shape().to_vec(), data));
                }
            }
            Op::SumAll(a) => {
                if self.rg(*a) {
                    let gv = g.data()[0];
                    let shape = self.value(*a).shape().to_vec();
                    let n: usize = shape.iter().product();
                    self.accumulate(slots, *a, Tensor::from_parts(shape, vec![gv; n]));
                }
            }
            Op::Reshape(a) => {
                if self.rg(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    self.accumulate(
                        slots,
                        *a,
                        Tensor::from_parts(shape, g.data().to_vec()),
                    );
                }
            }
            Op::Permute(a, perm) => {
                if self.rg(*a) {
                    let inv = invert_permutation(perm);
                    let (shape, data) = permute(g.data(), g.shape(), &inv);
                    self.accumulate(slots, *a, Tensor::from_parts(shape, data));
                }
            }
            Op::Broadcast(a) => {
                if self.rg(*a) {
                    let ga = self.reduce_grad(g, *a);
                    self.accumulate(slots, *a, ga);
                }
            }
            Op::Gather { x, map, split } => {
                if self.rg(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let prefix: usize = shape[..*split].iter().product();
                    let inner: usize = shape[*split..].iter().product();
                    let l = map.len();
                    let mut dx = vec![T::ZERO; prefix * inner];
                    for b in 0..prefix {
                        let gb = &g.data()[b * l..(b + 1) * l];
                        let block = &mut dx[b * inner..(b + 1) * inner];
                        for (i, &m) in map.iter().enumerate() {
                            block[m as usize] += gb[i];
                        }
                    }
                    self.accumulate(slots, *x, Tensor::from_parts(shape, dx));
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.value(v).shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0usize;
                for &p in parts {
                    let ps = self.value(p).shape().to_vec();
                    let ax = ps[*axis];
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(ps.iter().product());
                        for o in 0..outer {
                            let start = (o * total_axis + offset) * inner;
                            dp.extend_from_slice(&g.data()[start..start + ax * inner]);
                        }
                        self.accumulate(slots, p, Tensor::from_parts(ps, dp));
                    }
                    offset += ax;
                }
            }
        }
        Ok(())
    }
}

/// Outcome of a finite-difference check.
#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub pass: bool,
}

/// Compare reverse-mode gradients of a scalar-valued program against central
/// finite differences, coordinate by coordinate. The program is rebuilt for
/// every evaluation (define-by-run), and everything runs in f64.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |points: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let t = tape.value(out);
        if t.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: t.shape().to_vec(),
            });
        }
        let v = t.item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite {
                context: "grad_check objective",
            });
        }
        Ok(v)
    };

    // Analytic gradients once.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_coord: 0,
        pass: true,
    };
    for (ii, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[ii])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for ci in 0..input.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            {
                let (shape, mut d) = plus[ii].clone().into_parts();
                d[ci] += h;
                plus[ii] = Tensor::from_parts(shape, d);
                let (shape, mut d) = minus[ii].clone().into_parts();
                d[ci] -= h;
                minus[ii] = Tensor::from_parts(shape, d);
            }
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let ad = analytic.data()[ci];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_input = ii;
                report.worst_coord = ci;
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}
