//! Reverse-mode gradient tape over [`Tensor2`] values.
//!
//! Operations are appended in forward order; [`Tape::backward`] walks them in
//! exact reverse order and accumulates gradients additively wherever a value
//! fans out. Leaves created with [`Tape::param`] borrow their tensor, so
//! recording a forward pass does not copy model weights.

use std::borrow::Cow;

use crate::error::{Error, Result};

use super::tensor::{matmul, matmul_nt, matmul_tn, Scalar, Tensor2};

/// Norms below this are rejected by [`Tape::l2_normalize`].
pub const NORM_EPSILON: f64 = 1e-12;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        x: usize,
        w: usize,
        b: usize,
    },
    Relu {
        x: usize,
    },
    MaxPoolRows {
        x: usize,
        argmax: Vec<usize>,
    },
    L2Normalize {
        x: usize,
        norm: f64,
    },
    MaskedLogSoftmax {
        x: usize,
        keep: Vec<bool>,
        probs: Vec<f64>,
    },
    Nll {
        x: usize,
        target: usize,
    },
}

#[derive(Debug)]
struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor2<T>>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor2<T>>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, t: &'a Tensor2<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Owned leaf that receives a gradient (useful for checking ops in isolation).
    pub fn variable(&mut self, t: Tensor2<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor2<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor2<T> {
        &self.nodes[v.0].value
    }

    /// `x · w + b`, with `b` a `1 × Dout` row broadcast over the rows of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if bv.rows() != 1 || bv.cols() != wv.cols() {
            return Err(Error::ShapeMismatch {
                op: "affine",
                detail: format!("bias {:?} for weight {:?}", bv.shape(), wv.shape()),
            });
        }
        let mut out = matmul(xv, wv).map_err(|_| Error::ShapeMismatch {
            op: "affine",
            detail: format!("input {:?} with weight {:?}", xv.shape(), wv.shape()),
        })?;
        let bias = bv.row(0);
        for i in 0..out.rows() {
            for (o, &bj) in out.row_mut(i).iter_mut().zip(bias) {
                *o += bj;
            }
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Cow::Owned(out),
            Op::Affine {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.needs(x);
        self.push(Cow::Owned(out), Op::Relu { x: x.0 }, rg)
    }

    /// Column-wise maximum over rows, producing a `1 × F` row.
    /// Ties resolve to the lowest row index.
    pub fn maxpool_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut best: Vec<T> = xv.row(0).to_vec();
        let mut argmax = vec![0usize; cols];
        for i in 1..xv.rows() {
            for (j, &v) in xv.row(i).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let out = Tensor2::new(1, cols, best).expect("non-empty row");
        let rg = self.needs(x);
        self.push(Cow::Owned(out), Op::MaxPoolRows { x: x.0, argmax }, rg)
    }

    /// Scales a `1 × D` row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "l2_normalize",
                detail: format!("expected a row vector, got {:?}", xv.shape()),
            });
        }
        let norm = xv.sum_squares().sqrt();
        if norm.is_nan() || norm <= NORM_EPSILON {
            return Err(Error::NearZeroNorm(norm));
        }
        let inv = T::from_f64_lossy(1.0 / norm);
        let out = xv.map(|v| v * inv);
        let rg = self.needs(x);
        Ok(self.push(Cow::Owned(out), Op::L2Normalize { x: x.0, norm }, rg))
    }

    /// Log-softmax of a `1 × C` row in which the `mask`ed indices are excluded
    /// from the normalizer. Masked outputs hold `-inf` and receive no gradient.
    pub fn masked_log_softmax(&mut self, x: Var, mask: &[u32]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "masked_log_softmax",
                detail: format!("expected a row vector, got {:?}", xv.shape()),
            });
        }
        let c = xv.cols();
        let mut keep = vec![true; c];
        for &m in mask {
            let m = m as usize;
            if m >= c {
                return Err(Error::InvalidInput(format!(
                    "mask index {m} out of range for {c} logits"
                )));
            }
            keep[m] = false;
        }
        let row = xv.row(0);
        let max = row
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(v, _)| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::AllMasked);
        }
        let sum: f64 = row
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(v, _)| (v.as_f64() - max).exp())
            .sum();
        let lse = max + sum.ln();
        let mut probs = vec![0.0; c];
        let mut out = Vec::with_capacity(c);
        for (j, (&v, &k)) in row.iter().zip(&keep).enumerate() {
            if k {
                let lp = v.as_f64() - lse;
                probs[j] = lp.exp();
                out.push(T::from_f64_lossy(lp));
            } else {
                out.push(T::neg_infinity());
            }
        }
        let out = Tensor2::new(1, c, out)?;
        let rg = self.needs(x);
        Ok(self.push(
            Cow::Owned(out),
            Op::MaskedLogSoftmax {
                x: x.0,
                keep,
                probs,
            },
            rg,
        ))
    }

    /// Negative of entry `target` of a `1 × C` row, as a `1 × 1` scalar.
    pub fn nll(&mut self, x: Var, target: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != 1 || target >= xv.cols() {
            return Err(Error::ShapeMismatch {
                op: "nll",
                detail: format!("target {target} for {:?}", xv.shape()),
            });
        }
        let v = -xv.get(0, target);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "log-probability at target {target}"
            )));
        }
        let out = Tensor2::new(1, 1, vec![v])?;
        let rg = self.needs(x);
        Ok(self.push(Cow::Owned(out), Op::Nll { x: x.0, target }, rg))
    }

    /// Propagates `d root / d root = 1` back through the tape.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("root must be a scalar, got {:?}", rv.shape()),
            });
        }
        self.backward_with(root, Tensor2::new(1, 1, vec![T::one()])?)
    }

    /// Vector-Jacobian product: propagates `upstream` (shaped like `root`)
    /// back through the tape.
    pub fn backward_with(&self, root: Var, upstream: Tensor2<T>) -> Result<Gradients<T>> {
        if upstream.shape() != self.value(root).shape() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!(
                    "upstream {:?} for root {:?}",
                    upstream.shape(),
                    self.value(root).shape()
                ),
            });
        }
        let mut grads: Vec<Option<Tensor2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(upstream);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let (lower, rest) = grads.split_at_mut(idx);
            let Some(g) = rest[0].as_ref() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    if self.nodes[*x].requires_grad {
                        accumulate(lower, *x, matmul_nt(g, wv)?);
                    }
                    if self.nodes[*w].requires_grad {
                        accumulate(lower, *w, matmul_tn(xv, g)?);
                    }
                    if self.nodes[*b].requires_grad {
                        let mut db = Tensor2::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for (d, &gv) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                                *d += gv;
                            }
                        }
                        accumulate(lower, *b, db);
                    }
                }
                Op::Relu { x } => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                        if yv <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    accumulate(lower, *x, dx);
                }
                Op::MaxPoolRows { x, argmax } => {
                    let (rows, cols) = self.nodes[*x].value.shape();
                    let mut dx = Tensor2::zeros(rows, cols);
                    for (j, &i) in argmax.iter().enumerate() {
                        dx.data_mut()[i * cols + j] += g.get(0, j);
                    }
                    accumulate(lower, *x, dx);
                }
                Op::L2Normalize { x, norm } => {
                    let y = &node.value;
                    let proj: f64 = y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(a, b)| a.as_f64() * b.as_f64())
                        .sum();
                    let mut dx = g.clone();
                    for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                        *d = T::from_f64_lossy((d.as_f64() - yv.as_f64() * proj) / norm);
                    }
                    accumulate(lower, *x, dx);
                }
                Op::MaskedLogSoftmax { x, keep, probs } => {
                    let gsum: f64 = g
                        .data()
                        .iter()
                        .zip(keep)
                        .filter(|(_, &k)| k)
                        .map(|(v, _)| v.as_f64())
                        .sum();
                    let mut dx = Tensor2::zeros(1, keep.len());
                    for (j, d) in dx.data_mut().iter_mut().enumerate() {
                        if keep[j] {
                            *d = T::from_f64_lossy(g.get(0, j).as_f64() - probs[j] * gsum);
                        }
                    }
                    accumulate(lower, *x, dx);
                }
                Op::Nll { x, target } => {
                    let cols = self.nodes[*x].value.cols();
                    let mut dx = Tensor2::zeros(1, cols);
                    dx.data_mut()[*target] = -g.get(0, 0);
                    accumulate(lower, *x, dx);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor2<T>>], idx: usize, g: Tensor2<T>) {
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of a scalar root with respect to every recorded value that
/// requires one.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor2<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor2<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
