//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the
//! information its gradient rule needs. [`Tape::backward`] walks the nodes in
//! reverse and writes each gradient into the node tensor's gradient slot.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::LocalStencil;
use crate::graphlu::{self, GraphLuForm};
use crate::ops::{self, ReduceMode};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Erf(Var),
    Max0(Var),
    Reduce {
        x: Var,
        axis: usize,
        mode: ReduceMode,
        argmax: Option<Vec<usize>>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    RowNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    GraphLu {
        x: Var,
        eps: Var,
        form: GraphLuForm,
    },
    LocalConv {
        x: Var,
        weights: Var,
        stencil: Arc<LocalStencil>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Its gradient is tracked when the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that takes part in differentiation.
    pub fn param(&mut self, mut value: Tensor<T>) -> Var {
        value.set_requires_grad(true);
        self.leaf(value)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut value: Tensor<T>) -> Var {
        value.set_requires_grad(false);
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient written by the last [`Tape::backward`] call, if `v` lies on a
    /// differentiable path.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Moves the value out, leaving an empty tape slot behind.
    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = ops::scale(self.value(a), s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn erf(&mut self, a: Var) -> Var {
        let out = ops::erf(self.value(a));
        self.push(out, Op::Erf(a), &[a])
    }

    pub fn max0(&mut self, a: Var) -> Var {
        let out = ops::max0(self.value(a));
        self.push(out, Op::Max0(a), &[a])
    }

    pub fn reduce(&mut self, x: Var, axis: usize, mode: ReduceMode) -> Result<Var> {
        let r = ops::reduce(self.value(x), axis, mode)?;
        Ok(self.push(
            r.value,
            Op::Reduce {
                x,
                axis,
                mode,
                argmax: r.argmax,
            },
            &[x],
        ))
    }

    /// Sum of every element, as a rank-0 value.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, vec![n])?;
        self.reduce(flat, 0, ReduceMode::Sum)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat(&values, axis)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = ops::narrow(self.value(x), axis, start, len)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let out = ops::gather_rows(self.value(x), index)?;
        Ok(self.push(
            out,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Repeats a length-`c` vector (any shape with `c` elements) into `n`
    /// identical rows.
    pub fn broadcast_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let c = self.value(v).numel();
        let row = self.reshape(v, vec![1, c])?;
        self.gather_rows(row, &vec![0; n])
    }

    /// `x·W + b` for `x[n×i]`, `W[i×o]`, `b[o]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => {
                let n = self.shape(y)[0];
                let rows = self.broadcast_rows(b, n)?;
                self.add(y, rows)
            }
            None => Ok(y),
        }
    }

    /// Zero-mean, unit-variance normalisation of each row.
    pub fn row_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let (out, inv_std) = ops::row_normalize(self.value(x), eps)?;
        Ok(self.push(out, Op::RowNorm { x, inv_std }, &[x]))
    }

    pub fn graphlu(&mut self, x: Var, eps: Var, form: GraphLuForm) -> Result<Var> {
        let e = self.scalar_of(eps, "graphlu epsilon")?;
        let out = ops::map(self.value(x), |v| graphlu::graphlu_value(v, e, form));
        Ok(self.push(out, Op::GraphLu { x, eps, form }, &[x, eps]))
    }

    /// Per-channel stencil sum `y_i = Σ_o w[o] ⊙ x_{nbr(i,o)}`.
    pub fn local_conv(&mut self, x: Var, weights: Var, stencil: Arc<LocalStencil>) -> Result<Var> {
        let out = stencil.apply(self.value(x), self.value(weights))?;
        Ok(self.push(
            out,
            Op::LocalConv {
                x,
                weights,
                stencil,
            },
            &[x, weights],
        ))
    }

    /// Mean softmax cross-entropy of `logits[b×k]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    fn scalar_of(&self, v: Var, what: &str) -> Result<T> {
        let t = self.value(v);
        if t.numel() != 1 {
            return Err(Error::dim(
                "scalar",
                format!("{what} must hold one value, has shape {:?}", t.shape()),
            ));
        }
        Ok(t.data()[0])
    }

    /// Back-propagates from a single-element output, seeding its gradient
    /// with one. Previous gradients on this tape are cleared first.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("output must be a single value, has shape {:?}", self.shape(output)),
            ));
        }
        self.backward_with(output, vec![T::one()])
    }

    /// Back-propagates an explicit upstream gradient `seed` for `output`.
    pub fn backward_with(&mut self, output: Var, seed: Vec<T>) -> Result<()> {
        if seed.len() != self.value(output).numel() {
            return Err(Error::dim("backward", "seed length differs from output"));
        }
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
            self.nodes[id].value.accumulate_grad(&g)?;
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        // Returns the accumulator for `v`, or None when `v` needs no gradient.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(slot);
        };
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).shape()[1];
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |da| ops::matmul_bt_into(g, bd, da, m, k, n));
                acc(*b, &mut |db| ops::matmul_at_into(ad, g, db, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(d, &x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(bd) {
                        *d += x * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(ad) {
                        *d += x * y;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *s)),
            Op::Erf(a) => {
                let two_over_sqrt_pi = T::from_f64_lossy(std::f64::consts::FRAC_2_SQRT_PI);
                let ad = val(*a).data();
                acc(*a, &mut |da| {
                    for ((d, &x), &v) in da.iter_mut().zip(g).zip(ad) {
                        *d += x * two_over_sqrt_pi * (-(v * v)).exp();
                    }
                });
            }
            Op::Max0(a) => {
                let ad = val(*a).data();
                acc(*a, &mut |da| {
                    for ((d, &x), &v) in da.iter_mut().zip(g).zip(ad) {
                        if v > T::zero() {
                            *d += x;
                        }
                    }
                });
            }
            Op::Reduce {
                x,
                axis,
                mode,
                argmax,
            } => {
                let (outer, len, inner) = ops::axis_split(val(*x).shape(), *axis);
                let inv_len = T::one() / T::from_usize(len).unwrap();
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let gv = g[o * inner + i];
                            match mode {
                                ReduceMode::Sum | ReduceMode::Mean => {
                                    let w = if *mode == ReduceMode::Mean { gv * inv_len } else { gv };
                                    for l in 0..len {
                                        dx[(o * len + l) * inner + i] += w;
                                    }
                                }
                                ReduceMode::Max => {
                                    let l = argmax.as_ref().unwrap()[o * inner + i];
                                    dx[(o * len + l) * inner + i] += gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = nodes[id].value.shape();
                let (outer, total, inner) = ops::axis_split(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    acc(p, &mut |dp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut dp[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = ops::axis_split(val(*x).shape(), *axis);
                let len = nodes[id].value.shape()[*axis];
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        add_into(&mut dx[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Gather { x, index } => {
                let width = val(*x).numel() / val(*x).shape()[0];
                acc(*x, &mut |dx| {
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut dx[i * width..(i + 1) * width], &g[r * width..(r + 1) * width]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |dx| add_into(dx, g)),
            Op::RowNorm { x, inv_std } => {
                let y = nodes[id].value.data();
                let (n, c) = val(*x).dims2()?;
                let cf = T::from_usize(c).unwrap();
                acc(*x, &mut |dx| {
                    for i in 0..n {
                        let gr = &g[i * c..(i + 1) * c];
                        let yr = &y[i * c..(i + 1) * c];
                        let mean_g = gr.iter().fold(T::zero(), |a, &v| a + v) / cf;
                        let mean_gy = gr.iter().zip(yr).fold(T::zero(), |a, (&u, &v)| a + u * v) / cf;
                        for j in 0..c {
                            dx[i * c + j] += inv_std[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                });
            }
            Op::GraphLu { x, eps, form } => {
                let e = val(*eps).data()[0];
                let xd = val(*x).data();
                let mut deps = T::zero();
                let partials: Vec<(T, T)> = xd.iter().map(|&v| graphlu::graphlu_partials(v, e, *form)).collect();
                acc(*x, &mut |dx| {
                    for ((d, &gv), &(px, _)) in dx.iter_mut().zip(g).zip(&partials) {
                        *d += gv * px;
                    }
                });
                for (&gv, &(_, pe)) in g.iter().zip(&partials) {
                    deps += gv * pe;
                }
                acc(*eps, &mut |de| de[0] += deps);
            }
            Op::LocalConv {
                x,
                weights,
                stencil,
            } => {
                let (xv, wv) = (val(*x), val(*weights));
                acc(*x, &mut |dx| stencil.backward_input(g, wv.data(), dx));
                acc(*weights, &mut |dw| stencil.backward_weights(g, xv.data(), dw));
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let k = val(*logits).shape()[1];
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                acc(*logits, &mut |dl| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let target = if j == label { T::one() } else { T::zero() };
                            dl[r * k + j] += scale * (probs[r * k + j] - target);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
