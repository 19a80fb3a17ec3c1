//! Shape machinery and the numeric kernels behind tape primitives.
//!
//! Broadcasting follows the usual right-aligned convention. Every kernel sums
//! in a fixed sequential order per output element, so results are
//! bit-reproducible for a given binary regardless of thread count.

use rayon::prelude::*;

use super::{Result, Scalar, TensorError};

// Below this many multiply-adds a parallel dispatch costs more than it saves.
const PAR_THRESHOLD: usize = 32_768;

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        // A 1-extent expands to the other side, even when that side is 0.
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(TensorError::ShapeMismatch {
                context: "broadcast",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

#[inline]
fn dim_from_right(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

/// Row-major strides, with stride 0 on axes of extent 1 so the same code path
/// walks broadcast inputs.
fn broadcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let mut strides = vec![0usize; out_rank];
    let mut acc = 1usize;
    for (k, &d) in shape.iter().rev().enumerate() {
        strides[out_rank - 1 - k] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

/// Apply `f` elementwise over two broadcast inputs.
pub fn binary_broadcast<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<usize>, Vec<T>)> {
    let out_shape = broadcast_shapes(a_shape, b_shape)?;
    let numel: usize = out_shape.iter().product();
    // Fast paths: identical shapes, and scalar right-hand side.
    if a_shape == b_shape {
        let data = a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
        return Ok((out_shape, data));
    }
    if b.len() == 1 {
        let y = b[0];
        let data = a.iter().map(|&x| f(x, y)).collect();
        return Ok((out_shape, data));
    }
    let rank = out_shape.len();
    let sa = broadcast_strides(a_shape, rank);
    let sb = broadcast_strides(b_shape, rank);
    let mut data = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for _ in 0..numel {
        data.push(f(a[oa], b[ob]));
        // Odometer increment, updating the two offsets incrementally.
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
        }
    }
    Ok((out_shape, data))
}

/// Sum `data` (of shape `from`) down to shape `to`, which must be
/// broadcast-compatible. Used to push gradients back through broadcasts.
pub fn reduce_to_shape<T: Scalar>(data: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return data.to_vec();
    }
    let to_numel: usize = to.iter().product();
    let mut out = vec![T::ZERO; to_numel];
    let rank = from.len();
    let st = broadcast_strides(to, rank);
    let mut idx = vec![0usize; rank];
    let mut ot = 0usize;
    for &v in data {
        out[ot] += v;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ot += st[ax];
            if idx[ax] < from[ax] {
                break;
            }
            idx[ax] = 0;
            ot -= st[ax] * from[ax];
        }
    }
    out
}

/// Broadcast `data` from shape `from` up to shape `to` (materialized).
pub fn broadcast_to<T: Scalar>(data: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return data.to_vec();
    }
    let numel: usize = to.iter().product();
    let rank = to.len();
    let sf = broadcast_strides(from, rank);
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut of = 0usize;
    for _ in 0..numel {
        out.push(data[of]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            of += sf[ax];
            if idx[ax] < to[ax] {
                break;
            }
            idx[ax] = 0;
            of -= sf[ax] * to[ax];
        }
    }
    out
}

/// Single `m x k` by `k x n` product into `out`, accumulating.
/// i-k-j loop order keeps the inner loop contiguous on both `b` and `out`.
#[inline]
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + ap * bv;
            }
        }
    }
}

/// `m x k` times `n x k` transposed (`a @ b^T`), accumulating into `out`.
#[inline]
fn gemm_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `k x m` transposed times `k x n` (`a^T @ b`), accumulating into `out`.
#[inline]
fn gemm_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatKind {
    /// a @ b
    NN,
    /// a @ b^T
    NT,
    /// a^T @ b
    TN,
}

/// Batched matmul with numpy-style broadcasting of the batch prefix.
///
/// The trailing two axes are the matrix; everything in front broadcasts.
/// Returns the output shape and data. `m`, `k`, `n` refer to the contracted
/// product a(m,k) x b(k,n) after accounting for `kind`.
pub fn matmul_broadcast<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    kind: MatKind,
) -> Result<(Vec<usize>, Vec<T>)> {
    if a_shape.len() < 2 || b_shape.len() < 2 {
        return Err(TensorError::ShapeMismatch {
            context: "matmul requires rank >= 2",
            lhs: a_shape.to_vec(),
            rhs: b_shape.to_vec(),
        });
    }
    let (am, ak) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
    let (bk, bn) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
    let (m, k, k2, n) = match kind {
        MatKind::NN => (am, ak, bk, bn),
        MatKind::NT => (am, ak, bn, bk),
        MatKind::TN => (ak, am, bk, bn),
    };
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            context: "matmul inner dimensions",
            lhs: a_shape.to_vec(),
            rhs: b_shape.to_vec(),
        });
    }
    let a_batch = &a_shape[..a_shape.len() - 2];
    let b_batch = &b_shape[..b_shape.len() - 2];
    let batch_shape = broadcast_shapes(a_batch, b_batch)?;
    let batch: usize = batch_shape.iter().product();
    let rank = batch_shape.len();
    let sa = broadcast_strides(a_batch, rank);
    let sb = broadcast_strides(b_batch, rank);
    let a_mat = a_shape[a_shape.len() - 2] * a_shape[a_shape.len() - 1];
    let b_mat = b_shape[b_shape.len() - 2] * b_shape[b_shape.len() - 1];

    let mut out_shape = batch_shape.clone();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![T::ZERO; batch * m * n];

    // Map a linear batch index to (a offset, b offset) through the strides.
    let offsets = |bi: usize| -> (usize, usize) {
        let mut rem = bi;
        let mut oa = 0;
        let mut ob = 0;
        for ax in (0..rank).rev() {
            let c = rem % batch_shape[ax];
            rem /= batch_shape[ax];
            oa += c * sa[ax];
            ob += c * sb[ax];
        }
        (oa * a_mat, ob * b_mat)
    };

    let run_one = |bi: usize, chunk: &mut [T]| {
        let (oa, ob) = offsets(bi);
        let asl = &a[oa..oa + a_mat];
        let bsl = &b[ob..ob + b_mat];
        match kind {
            MatKind::NN => gemm_acc(asl, bsl, chunk, m, k, n),
            MatKind::NT => gemm_nt_acc(asl, bsl, chunk, m, k, n),
            MatKind::TN => gemm_tn_acc(asl, bsl, chunk, m, k, n),
        }
    };

    if batch > 1 && batch * m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(m * n)
            .enumerate()
            .for_each(|(bi, chunk)| run_one(bi, chunk));
    } else if batch == 1 && m > 1 && m * k * n >= PAR_THRESHOLD {
        // Split rows of a single large product across threads.
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
            match kind {
                MatKind::NN => {
                    let arow = &a[i * k..(i + 1) * k];
                    for (p, &ap) in arow.iter().enumerate() {
                        let brow = &b[p * n..(p + 1) * n];
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o = *o + ap * bv;
                        }
                    }
                }
                MatKind::NT => {
                    let arow = &a[i * k..(i + 1) * k];
                    for (j, o) in orow.iter_mut().enumerate() {
                        let brow = &b[j * k..(j + 1) * k];
                        let mut acc = T::ZERO;
                        for (&x, &y) in arow.iter().zip(brow) {
                            acc += x * y;
                        }
                        *o = acc;
                    }
                }
                MatKind::TN => {
                    for p in 0..k {
                        let av = a[p * m + i];
                        let brow = &b[p * n..(p + 1) * n];
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o = *o + av * bv;
                        }
                    }
                }
            }
        });
    } else {
        for bi in 0..batch {
            let chunk = &mut out[bi * m * n..(bi + 1) * m * n];
            run_one(bi, chunk);
        }
    }
    Ok((out_shape, out))
}

/// Softmax along `axis` with max-subtraction; errors if a slice has no finite
/// entry. Exponentials go through f64.
pub fn softmax_axis<T: Scalar>(
    data: &[T],
    shape: &[usize],
    axis: usize,
) -> Result<Vec<T>> {
    if axis >= shape.len() {
        return Err(TensorError::BadAxis {
            axis,
            rank: shape.len(),
        });
    }
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![T::ZERO; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut maxv = f64::NEG_INFINITY;
            for a in 0..axis_len {
                let v = data[base + a * inner].to_f64();
                if v > maxv {
                    maxv = v;
                }
            }
            if !maxv.is_finite() {
                return Err(TensorError::DegenerateSoftmax);
            }
            let mut denom = 0.0f64;
            for a in 0..axis_len {
                denom += (data[base + a * inner].to_f64() - maxv).exp();
            }
            for a in 0..axis_len {
                let e = (data[base + a * inner].to_f64() - maxv).exp();
                out[base + a * inner] = T::from_f64(e / denom);
            }
        }
    }
    Ok(out)
}

/// Layer normalization over the last axis: zero mean, unit variance per
/// slice, then affine `gain * x + bias`. Moments accumulate in f64.
pub fn layer_norm_last<T: Scalar>(
    data: &[T],
    shape: &[usize],
    gain: &[T],
    bias: &[T],
    eps: f64,
) -> Result<Vec<T>> {
    let c = *shape.last().ok_or(TensorError::BadAxis { axis: 0, rank: 0 })?;
    if gain.len() != c || bias.len() != c {
        return Err(TensorError::ShapeMismatch {
            context: "layer_norm affine params",
            lhs: vec![c],
            rhs: vec![gain.len(), bias.len()],
        });
    }
    let slices = data.len() / c;
    let mut out = vec![T::ZERO; data.len()];
    for s in 0..slices {
        let x = &data[s * c..(s + 1) * c];
        let mut mean = 0.0f64;
        for v in x {
            mean += v.to_f64();
        }
        mean /= c as f64;
        let mut var = 0.0f64;
        for v in x {
            let d = v.to_f64() - mean;
            var += d * d;
        }
        var /= c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let orow = &mut out[s * c..(s + 1) * c];
        for j in 0..c {
            let xhat = (x[j].to_f64() - mean) * inv;
            orow[j] = T::from_f64(xhat * gain[j].to_f64() + bias[j].to_f64());
        }
    }
    Ok(out)
}

/// Reorder axes; `perm[i]` names the input axis landing at output axis `i`.
pub fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    debug_assert_eq!(perm.len(), rank);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = data.len();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += walk[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= walk[ax] * out_shape[ax];
        }
    }
    (out_shape, out)
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
