//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation in execution order, so the node list
//! is already topologically sorted. [`Tape::backward`] walks it once in
//! reverse and accumulates vector-Jacobian products into a gradient slot per
//! node; fan-out is handled by summing into the slot.

use rand::Rng;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddScalar(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Cosine {
        a: Var,
        b: Var,
    },
    Sum(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed operations.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], one optional slot per node.
pub struct Gradients<T: Real = f32> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots.get_mut(v.0).and_then(|g| g.take())
    }
}

fn rows_cols<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, format!("expected a matrix, got shape {other:?}"))),
    }
}

/// Shape treated as `[rows, cols]`; vectors are a single row.
fn as_rows<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [c] => Ok((1, *c)),
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, format!("expected rank 1 or 2, got shape {other:?}"))),
    }
}

fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} out of range for shape {:?}", x.shape()),
        ));
    }
    x.check_finite("softmax")?;
    let (outer, n, inner) = axis_geometry(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(src[idx(j)]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (src[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[idx(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Non-finite inputs are rejected here so every later
    /// value is finite by construction.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        value.check_finite("leaf")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = rows_cols(ta, "matmul")?;
        let (k2, n) = rows_cols(tb, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = rows_cols(t, "transpose")?;
        let src = t.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), &[a], "transpose")
    }

    /// Elementwise sum of equal shapes, or tensor plus a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let out: Vec<T> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
            let t = Tensor::new(ta.shape(), out)?;
            return self.push(t, Op::Add(a, b), &[a, b], "add");
        }
        let (tensor, scalar) = match (ta.is_scalar(), tb.is_scalar()) {
            (_, true) => (a, b),
            (true, false) => (b, a),
            _ => {
                return Err(Error::Dimension {
                    op: "add",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                })
            }
        };
        let s = self.value(scalar).item();
        let t = self.value(tensor).map(|x| x + s);
        self.push(t, Op::AddScalar(tensor, scalar), &[tensor, scalar], "add")
    }

    /// `x[..×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.last_dim();
        if tb.len() != n || tb.rank() > 1 {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let b = tb.data();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        self.push(t, Op::AddRow(x, bias), &[x, bias], "add_row")
    }

    /// Elementwise product of equal shapes, or tensor times a one-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let out: Vec<T> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
            let t = Tensor::new(ta.shape(), out)?;
            return self.push(t, Op::Mul(a, b), &[a, b], "mul");
        }
        let (tensor, scalar) = match (ta.is_scalar(), tb.is_scalar()) {
            (_, true) => (a, b),
            (true, false) => (b, a),
            _ => {
                return Err(Error::Dimension {
                    op: "mul",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                })
            }
        };
        let s = self.value(scalar).item();
        let t = self.value(tensor).map(|x| x * s);
        self.push(t, Op::MulScalar(tensor, scalar), &[tensor, scalar], "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), &[a], "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(t, Op::Relu(a), &[a], "relu")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = softmax(self.value(x), axis)?;
        self.push(t, Op::Softmax { x, axis }, &[x], "softmax")
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (b, c) = rows_cols(tl, "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Label {
                index,
                label,
                classes: c,
            });
        }
        let probs = softmax(tl, 1)?.into_data();
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = tl.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            total += lse - row[y];
        }
        let loss = total / T::from_usize(b).unwrap();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Per-row normalisation over the last axis with `eps = 1e-5`, then
    /// `gain ⊙ x̂ + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let tx = self.value(x);
        let d = tx.last_dim();
        if d < 2 {
            return Err(Error::shape("layernorm", "feature dimension must be at least 2"));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != d || tb.len() != d {
            return Err(Error::Dimension {
                op: "layernorm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let eps = T::of(EPS);
        let df = T::from_usize(d).unwrap();
        let rows = tx.rows();
        let mut xhat = vec![T::zero(); tx.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
            "layernorm",
        )
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)` so that
    /// evaluation is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let tx = self.value(x);
        let out: Vec<T> = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(tx.shape(), out)?;
        self.push(t, Op::Dropout { x, mask }, &[x], "dropout")
    }

    /// Scales every row to unit L2 norm. Zero rows are an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        let rows = tx.rows();
        let mut norms = Vec::with_capacity(rows);
        let mut out = tx.data().to_vec();
        for r in 0..rows {
            let norm = tx.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(Error::numeric("normalize_rows", format!("row {r} has zero norm")));
            }
            for v in &mut out[r * d..(r + 1) * d] {
                *v /= norm;
            }
            norms.push(norm);
        }
        let t = Tensor::new(tx.shape(), out)?;
        self.push(t, Op::NormalizeRows { x, norms }, &[x], "normalize_rows")
    }

    /// `a·b / (‖a‖‖b‖)` for two equal-length vectors; yields a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::Dimension {
                op: "cosine_similarity",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let s = cosine(ta.data(), tb.data())?;
        self.push(Tensor::scalar(s), Op::Cosine { a, b }, &[a, b], "cosine_similarity")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Column means of a `[rows × cols]` matrix as a `[cols]` vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = as_rows(t, "mean_rows")?;
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        let rf = T::from_usize(r).unwrap();
        out.iter_mut().for_each(|v| *v /= rf);
        self.push(Tensor::vector(out), Op::MeanRows(a), &[a], "mean_rows")
    }

    /// Joins matrices (or vectors, as single rows) side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "nothing to concatenate"));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| as_rows(self.value(p), "concat_cols"))
            .collect::<Result<_>>()?;
        let rows = dims[0].0;
        if let Some(bad) = dims.iter().position(|d| d.0 != rows) {
            return Err(Error::Dimension {
                op: "concat_cols",
                lhs: self.value(parts[0]).shape().to_vec(),
                rhs: self.value(parts[bad]).shape().to_vec(),
            });
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if self.value(parts[0]).rank() == 1 {
            vec![total]
        } else {
            vec![rows, total]
        };
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Stacks matrices (or vectors, as single rows) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "nothing to concatenate"));
        }
        let cols = self.value(parts[0]).last_dim();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c) = as_rows(t, "concat_rows")?;
            if c != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(t.data());
        }
        let t = Tensor::new(&[rows, cols], out)?;
        self.push(t, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = rows_cols(t, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} out of range for {c}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let t = Tensor::new(&[r, len], out)?;
        self.push(t, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = rows_cols(t, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} out of range for {r}", start + len),
            ));
        }
        let out = t.data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(&[len, c], out)?;
        self.push(t, Op::SliceRows { x, start }, &[x], "slice_rows")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x), &[x], "reshape")
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lt.shape()),
            ));
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::full(lt.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            self.propagate(i, &g, &mut slots)?;
            slots[i] = Some(g);
        }
        Ok(Gradients { slots })
    }

    fn accumulate(&self, slots: &mut [Option<Tensor<T>>], v: Var, grad: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut slots[v.0] {
            Some(existing) => {
                for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *e += *g;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, slots: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(gd, tb.data(), &mut da, m, n, k);
                    self.accumulate(slots, *a, Tensor::new(&[m, k], da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(ta.data(), gd, &mut db, m, k, n);
                    self.accumulate(slots, *b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (out.shape()[0], out.shape()[1]);
                let mut da = vec![T::zero(); m * n];
                for r in 0..n {
                    for c in 0..m {
                        da[c * n + r] = gd[r * m + c];
                    }
                }
                self.accumulate(slots, *a, Tensor::new(&[m, n], da)?);
            }
            Op::Add(a, b) => {
                self.accumulate(slots, *a, g.clone());
                self.accumulate(slots, *b, g.clone());
            }
            Op::AddScalar(t, s) => {
                self.accumulate(slots, *t, g.clone());
                let st = self.value(*s);
                self.accumulate(slots, *s, Tensor::full(st.shape(), g.sum()));
            }
            Op::AddRow(x, bias) => {
                self.accumulate(slots, *x, g.clone());
                let n = out.last_dim();
                let mut db = vec![T::zero(); n];
                for row in gd.chunks(n) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                let shape = self.value(*bias).shape().to_vec();
                self.accumulate(slots, *bias, Tensor::new(&shape, db)?);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da: Vec<T> = gd.iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                let db: Vec<T> = gd.iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                self.accumulate(slots, *a, Tensor::new(ta.shape(), da)?);
                self.accumulate(slots, *b, Tensor::new(tb.shape(), db)?);
            }
            Op::MulScalar(t, s) => {
                let (tt, ts) = (self.value(*t), self.value(*s));
                let sv = ts.item();
                self.accumulate(slots, *t, g.map(|x| x * sv));
                let ds: T = gd.iter().zip(tt.data()).map(|(&x, &y)| x * y).sum();
                self.accumulate(slots, *s, Tensor::full(ts.shape(), ds));
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(slots, *a, g.map(|x| x * c));
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let da: Vec<T> = gd
                    .iter()
                    .zip(ta.data())
                    .map(|(&x, &v)| if v > T::zero() { x } else { T::zero() })
                    .collect();
                self.accumulate(slots, *a, Tensor::new(ta.shape(), da)?);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_geometry(out.shape(), *axis);
                let y = out.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + ii;
                        let dot: T = (0..n).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(slots, *x, Tensor::new(out.shape(), dx)?);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let tl = self.value(*logits);
                let c = tl.shape()[1];
                let scale = g.item() / T::from_usize(labels.len()).unwrap();
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    dx[i * c + y] -= scale;
                }
                self.accumulate(slots, *logits, Tensor::new(tl.shape(), dx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.last_dim();
                let df = T::from_usize(d).unwrap();
                let gv = self.value(*gain).data();
                let mut dx = vec![T::zero(); gd.len()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] = inv / df * (df * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                self.accumulate(slots, *x, Tensor::new(out.shape(), dx)?);
                let gs = self.value(*gain).shape().to_vec();
                self.accumulate(slots, *gain, Tensor::new(&gs, dgain)?);
                let bs = self.value(*bias).shape().to_vec();
                self.accumulate(slots, *bias, Tensor::new(&bs, dbias)?);
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<T> = gd.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                self.accumulate(slots, *x, Tensor::new(out.shape(), dx)?);
            }
            Op::NormalizeRows { x, norms } => {
                let d = out.last_dim();
                let y = out.data();
                let mut dx = vec![T::zero(); y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.accumulate(slots, *x, Tensor::new(out.shape(), dx)?);
            }
            Op::Cosine { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let s = out.item();
                let na2: T = ta.norm_sq();
                let nb2: T = tb.norm_sq();
                let nab = (na2 * nb2).sqrt();
                let gv = g.item();
                let da: Vec<T> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| gv * (y / nab - s * x / na2))
                    .collect();
                let db: Vec<T> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| gv * (x / nab - s * y / nb2))
                    .collect();
                self.accumulate(slots, *a, Tensor::new(ta.shape(), da)?);
                self.accumulate(slots, *b, Tensor::new(tb.shape(), db)?);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                self.accumulate(slots, *a, Tensor::full(ta.shape(), g.item()));
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let (r, c) = as_rows(ta, "mean_rows")?;
                let rf = T::from_usize(r).unwrap();
                let mut da = Vec::with_capacity(r * c);
                for _ in 0..r {
                    da.extend(gd.iter().map(|&v| v / rf));
                }
                self.accumulate(slots, *a, Tensor::new(ta.shape(), da)?);
            }
            Op::ConcatCols(parts) => {
                let total = out.last_dim();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let c = tp.last_dim();
                    let mut dp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        dp.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    self.accumulate(slots, p, Tensor::new(tp.shape(), dp)?);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let n = tp.len();
                    self.accumulate(slots, p, Tensor::new(tp.shape(), gd[offset..offset + n].to_vec())?);
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (r, c) = (tx.shape()[0], tx.shape()[1]);
                let len = out.shape()[1];
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                self.accumulate(slots, *x, Tensor::new(tx.shape(), dx)?);
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let c = tx.shape()[1];
                let mut dx = vec![T::zero(); tx.len()];
                dx[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.accumulate(slots, *x, Tensor::new(tx.shape(), dx)?);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(slots, *x, g.clone().reshape(&shape)?);
            }
        }
        Ok(())
    }
}

/// Cosine similarity of two slices. Zero-norm inputs are an error rather
/// than being patched with an epsilon.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "cosine_similarity",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let na: T = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb: T = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(Error::numeric("cosine_similarity", "zero-norm input"));
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let s = dot / (na * nb);
    Ok(s.max(-T::one()).min(T::one()))
}
