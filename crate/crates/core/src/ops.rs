//! Forward kernels on plain tensors.
//!
//! These are the value-level definitions; [`crate::autograd::Tape`] records
//! them and supplies the matching gradient rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceMode {
    Max,
    Mean,
    Sum,
}

/// Result of a reduction. `argmax` holds, for max reductions, the index along
/// the reduced axis that receives the gradient: the lowest maximal index.
#[derive(Debug, Clone)]
pub struct Reduced<T: Scalar> {
    pub value: Tensor<T>,
    pub argmax: Option<Vec<usize>>,
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip_with<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub(crate) fn map<T: Scalar>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    map(a, |x| x * s)
}

pub fn erf<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    map(a, T::erf)
}

pub fn max0<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    map(a, |x| if x > T::zero() { x } else { T::zero() })
}

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner extents {k} and {k2} differ"),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Accumulates `a·b` into `out`.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with eight independent partial sums so the loop vectorises.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// Accumulates `g·bᵀ` into `out[m×k]` for `g[m×n]`, `b[k×n]`.
pub(crate) fn matmul_bt_into<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(grow, brow);
        }
    }
}

/// Accumulates `aᵀ·g` into `out[k×n]` for `a[m×k]`, `g[m×n]`.
pub(crate) fn matmul_at_into<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn reduce<T: Scalar>(x: &Tensor<T>, axis: usize, mode: ReduceMode) -> Result<Reduced<T>> {
    if axis >= x.rank() {
        return Err(Error::dim(
            "reduce",
            format!("axis {axis} for rank {}", x.rank()),
        ));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    if len == 0 {
        return Err(Error::EmptyReduction {
            axis,
            shape: x.shape().to_vec(),
        });
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    let src = x.data();
    let mut out = vec![T::zero(); outer * inner];
    let mut argmax = (mode == ReduceMode::Max).then(|| vec![0usize; outer * inner]);
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| src[(o * len + l) * inner + i];
            let slot = o * inner + i;
            match mode {
                ReduceMode::Sum | ReduceMode::Mean => {
                    let mut acc = T::zero();
                    for l in 0..len {
                        acc += at(l);
                    }
                    out[slot] = if mode == ReduceMode::Mean {
                        acc / T::from_usize(len).unwrap()
                    } else {
                        acc
                    };
                }
                ReduceMode::Max => {
                    let mut best = 0;
                    for l in 1..len {
                        // strict comparison keeps the lowest maximal index
                        if at(l) > at(best) {
                            best = l;
                        }
                    }
                    out[slot] = at(best);
                    argmax.as_mut().unwrap()[slot] = best;
                }
            }
        }
    }
    Ok(Reduced {
        value: Tensor::from_parts(shape, out),
        argmax,
    })
}

pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat", "no parts"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::dim("concat", format!("axis {axis} for rank {rank}")));
    }
    for p in parts {
        let compatible = p.rank() == rank
            && p
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(Error::dim(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", p.shape(), first.shape()),
            ));
        }
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

/// Contiguous sub-range `[start, start+len)` along `axis`.
pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::dim(
            "narrow",
            format!("[{start}, {}) on axis {axis} of {:?}", start + len, x.shape()),
        ));
    }
    let (outer, full, inner) = axis_split(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

/// Splits along `axis` into consecutive pieces of the given sizes.
pub fn split<T: Scalar>(x: &Tensor<T>, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    if axis >= x.rank() || sizes.iter().sum::<usize>() != x.shape()[axis] {
        return Err(Error::dim(
            "split",
            format!("sizes {sizes:?} on axis {axis} of {:?}", x.shape()),
        ));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let piece = narrow(x, axis, start, len);
            start += len;
            piece
        })
        .collect()
}

/// Selects rows (first-axis slices) by index; indices may repeat.
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, index: &[usize]) -> Result<Tensor<T>> {
    let rows = x.shape()[0];
    let width = x.numel() / rows;
    let mut out = Vec::with_capacity(index.len() * width);
    for &i in index {
        if i >= rows {
            return Err(Error::dim("gather_rows", format!("row {i} of {rows}")));
        }
        out.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
    }
    if index.is_empty() {
        return Err(Error::dim("gather_rows", "empty index"));
    }
    let mut shape = x.shape().to_vec();
    shape[0] = index.len();
    Ok(Tensor::from_parts(shape, out))
}

/// Normalises each row of an `n×c` tensor to zero mean and unit variance.
/// Returns the output and the per-row inverse standard deviations.
pub fn row_normalize<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, c) = x.dims2()?;
    let cf = T::from_usize(c).unwrap();
    let mut out = vec![T::zero(); n * c];
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / cf;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / cf;
        let is = T::one() / (var + eps).sqrt();
        for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    Ok((Tensor::from_parts(vec![n, c], out), inv_std))
}

/// Mean softmax cross-entropy of `logits[b×k]` against class labels.
/// Returns the loss and the softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::dim(
            "softmax_cross_entropy",
            format!("{} labels for {b} rows", labels.len()),
        ));
    }
    let mut probs = vec![T::zero(); b * k];
    let mut loss = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Range(format!("label {label} for {k} classes")));
        }
        let row = logits.row(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let denom = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
        for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
            *p = (v - max).exp() / denom;
        }
        loss += denom.ln() + max - row[label];
    }
    Ok((loss / T::from_usize(b).unwrap(), probs))
}
