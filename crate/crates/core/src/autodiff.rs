//! Reverse-mode automatic differentiation over a single-threaded tape.
//!
//! A [`Graph`] records every operation as a node whose operands always have a
//! smaller index, so the node vector is already in topological order and
//! [`Graph::backward`] is one reverse sweep that visits each node once.
//!
//! ```
//! use orderlab::autodiff::Graph;
//! use orderlab::tensor::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::vector(&[1.0, -2.0, 3.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Transpose(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Softmax {
        x: Var,
        axis: usize,
    },
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    KlDiv {
        p: Var,
        q: Var,
        axis: usize,
        lp: Vec<T>,
        lq: Vec<T>,
        raw: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// The tape. Build it forward with the op methods, then call [`Graph::backward`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

// Splits `(outer, len, inner)` around `axis`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

// `0.5·(1 + tanh u)` is `σ(2u)`, and `exp` is much cheaper than `tanh`.
fn gelu_gate<T: Real>(x: T) -> (T, T) {
    let c = T::of(SQRT_2_OVER_PI);
    let u = c * (x + T::of(GELU_CUBIC) * x * x * x);
    let du = c * (T::one() + T::of(3.0 * GELU_CUBIC) * x * x);
    (T::one() / (T::one() + (-(u + u)).exp()), du)
}

fn gelu_scalar<T: Real>(x: T) -> T {
    x * gelu_gate(x).0
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (s, du) = gelu_gate(x);
    s + T::of(2.0) * x * s * (T::one() - s) * du
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn broadcast_zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let vb = self.value(b).data();
        let n = vb.len();
        let data = va
            .data()
            .chunks_exact(n)
            .flat_map(|chunk| chunk.iter().zip(vb).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("broadcast keeps shape")
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let out = self.broadcast_zip(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("sub", a, b)?;
        let out = self.broadcast_zip(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let out = self.broadcast_zip(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let va = self.value(a);
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| x * s).collect()).unwrap();
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    fn matrix_dims(&self, op: &'static str, a: Var, b: Var) -> Result<((usize, usize), (usize, usize))> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(((sa[0], sa[1]), (sb[0], sb[1])))
    }

    /// `[m×k] · [k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = self.matrix_dims("matmul", a, b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `[m×k] · [n×k]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = self.matrix_dims("matmul_bt", a, b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_bt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_bt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(a).data();
        let out: Vec<T> = (0..r * c).map(|i| d[(i % r) * c + i / r]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    /// Gathers rows of a 2-D `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: s.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let out = self.gather_rows("embedding", table, ids)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    fn gather_rows(&self, op: &'static str, x: Var, rows: &[usize]) -> Result<Tensor<T>> {
        let v = self.value(x);
        let (n, c) = (v.rows(), v.cols());
        if rows.is_empty() {
            return Err(Error::contract(format!("{op}: empty row selection")));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::Index { op, index: r, limit: n });
            }
            out.extend_from_slice(v.row(r));
        }
        Tensor::new(vec![rows.len(), c], out)
    }

    /// Picks rows of a 2-D tensor (repeats allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let out = self.gather_rows("select_rows", x, rows)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = (v.rows(), v.cols());
        if v.shape().len() != 2 || len == 0 || start + len > c {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + len,
                limit: c,
            });
        }
        let out: Vec<T> = (0..r).flat_map(|i| v.row(i)[start..start + len].iter().copied()).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_cols: no operands"))?;
        let r = self.shape(first)[0];
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                op: "softmax",
                index: axis,
                limit: shape.len(),
            });
        }
        let (outer, len, inner) = lanes(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let max = (0..len).map(|j| src[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[idx(j)] = out[idx(j)] / total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Row softmax over a `[queries × keys]` score matrix where query `i` may only
    /// see keys `j <= i + (keys - queries)`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] > s[1] {
            return Err(Error::Shape {
                op: "causal_softmax",
                lhs: s,
                rhs: vec![],
            });
        }
        let (q, k) = (s[0], s[1]);
        let offset = k - q;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); q * k];
        for i in 0..q {
            let visible = i + offset + 1;
            let row = &src[i * k..i * k + visible];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let dst = &mut out[i * k..i * k + visible];
            let mut total = T::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                total = total + *d;
            }
            for d in dst.iter_mut() {
                *d = *d / total;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(s, out)?, Op::CausalSoftmax(x), rg))
    }

    /// Normalizes over the last axis, then applies `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let n = v.cols();
        if n < 1 {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: v.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::of(eps);
        let nt = T::of(n as f64);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = v.rows();
        let mut xhat = Vec::with_capacity(v.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(v.numel());
        for r in 0..rows {
            let row = v.row(r);
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / nt;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &a) in row.iter().enumerate() {
                let h = (a - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| gelu_scalar(a)).collect()).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean of `-log softmax(logits)[t, target_t]` over rows where `mask[t]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let v = self.value(logits);
        let (rows, vocab) = (v.rows(), v.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: v.shape().to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::contract("cross_entropy: mask selects no supervised positions"));
        }
        let mut probs = vec![T::zero(); v.numel()];
        let mut total = T::zero();
        for t in 0..rows {
            if !mask[t] {
                continue;
            }
            let target = targets[t];
            if target >= vocab {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: target,
                    limit: vocab,
                });
            }
            let row = v.row(t);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&a| (a - max).exp()).sum();
            let lse = max + z.ln();
            total = total + (lse - row[target]);
            for (j, &a) in row.iter().enumerate() {
                probs[t * vocab + j] = (a - lse).exp();
            }
        }
        let loss = total / T::of(count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// `KL(softmax(p) ‖ softmax(q))` along `axis`, evaluated in log space.
    /// The output drops `axis` (a lone axis reduces to shape `[1]`).
    pub fn kl_divergence(&mut self, p: Var, q: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(p).to_vec();
        if shape != self.shape(q) {
            return Err(Error::Shape {
                op: "kl_divergence",
                lhs: shape,
                rhs: self.shape(q).to_vec(),
            });
        }
        if axis >= shape.len() {
            return Err(Error::Index {
                op: "kl_divergence",
                index: axis,
                limit: shape.len(),
            });
        }
        let (outer, len, inner) = lanes(&shape, axis);
        let (pv, qv) = (self.value(p).data(), self.value(q).data());
        let mut lp = vec![T::zero(); pv.len()];
        let mut lq = vec![T::zero(); pv.len()];
        let mut raw = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                for (src, dst) in [(pv, &mut lp), (qv, &mut lq)] {
                    let max = (0..len).map(|j| src[idx(j)]).fold(T::neg_infinity(), T::max);
                    let z: T = (0..len).map(|j| (src[idx(j)] - max).exp()).sum();
                    let lse = max + z.ln();
                    for j in 0..len {
                        dst[idx(j)] = src[idx(j)] - lse;
                    }
                }
                let kl: T = (0..len).map(|j| lp[idx(j)].exp() * (lp[idx(j)] - lq[idx(j)])).sum();
                raw.push(kl);
            }
        }
        let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|&(a, _)| a != axis).map(|(_, &s)| s).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = raw.iter().map(|&k| k.max(T::zero())).collect();
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::KlDiv {
                p,
                q,
                axis,
                lp,
                lq,
                raw,
            },
            rg,
        ))
    }

    /// Propagates d(loss)/d(node) to every reachable node that requires a gradient.
    /// Gradients from any previous call are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let Some(grad) = node.grad.take() else { continue };
            backprop(before, &node.op, &node.value, &grad);
            node.grad = Some(grad);
        }
        Ok(())
    }
}

fn accumulate<T: Real>(nodes: &mut [Node<T>], v: Var, f: impl FnOnce(&mut [T], &Tensor<T>)) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let n = node.value.numel();
    let g = node.grad.get_or_insert_with(|| vec![T::zero(); n]);
    f(g, &node.value);
}

fn value_of<T: Real>(nodes: &[Node<T>], v: Var) -> &Tensor<T> {
    &nodes[v.0].value
}

// Sums a leading-axis-broadcast gradient down to `len` trailing elements.
fn reduce_broadcast<T: Real>(g: &[T], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for chunk in g.chunks_exact(len) {
        for (o, &x) in out.iter_mut().zip(chunk) {
            *o = *o + x;
        }
    }
    out
}

fn backprop<T: Real>(nodes: &mut [Node<T>], op: &Op<T>, out: &Tensor<T>, g: &[T]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) { -T::one() } else { T::one() };
            accumulate(nodes, *a, |ga, _| {
                for (x, &d) in ga.iter_mut().zip(g) {
                    *x = *x + d;
                }
            });
            let nb = value_of(nodes, *b).numel();
            let red = reduce_broadcast(g, nb);
            accumulate(nodes, *b, |gb, _| {
                for (x, &d) in gb.iter_mut().zip(&red) {
                    *x = *x + sign * d;
                }
            });
        }
        Op::Mul(a, b) => {
            let bv = value_of(nodes, *b).data().to_vec();
            let av = value_of(nodes, *a).data().to_vec();
            let nb = bv.len();
            accumulate(nodes, *a, |ga, _| {
                for (i, (x, &d)) in ga.iter_mut().zip(g).enumerate() {
                    *x = *x + d * bv[i % nb];
                }
            });
            let prod: Vec<T> = g.iter().zip(&av).map(|(&d, &x)| d * x).collect();
            let red = reduce_broadcast(&prod, nb);
            accumulate(nodes, *b, |gb, _| {
                for (x, &d) in gb.iter_mut().zip(&red) {
                    *x = *x + d;
                }
            });
        }
        Op::Scale(a, s) => accumulate(nodes, *a, |ga, _| {
            for (x, &d) in ga.iter_mut().zip(g) {
                *x = *x + d * *s;
            }
        }),
        Op::MatMul(a, b) => {
            let (m, k) = (value_of(nodes, *a).shape()[0], value_of(nodes, *a).shape()[1]);
            let n = value_of(nodes, *b).shape()[1];
            if nodes[a.0].requires_grad {
                let bv = value_of(nodes, *b).data().to_vec();
                accumulate(nodes, *a, |ga, _| kernels::matmul_bt_acc(g, &bv, ga, m, n, k));
            }
            if nodes[b.0].requires_grad {
                let av = value_of(nodes, *a).data().to_vec();
                accumulate(nodes, *b, |gb, _| kernels::matmul_at_acc(&av, g, gb, m, k, n));
            }
        }
        Op::MatMulBt(a, b) => {
            let (m, k) = (value_of(nodes, *a).shape()[0], value_of(nodes, *a).shape()[1]);
            let n = value_of(nodes, *b).shape()[0];
            if nodes[a.0].requires_grad {
                let bv = value_of(nodes, *b).data().to_vec();
                accumulate(nodes, *a, |ga, _| kernels::matmul_acc(g, &bv, ga, m, n, k));
            }
            if nodes[b.0].requires_grad {
                let av = value_of(nodes, *a).data().to_vec();
                // dB[n×k] += dCᵀ · A
                accumulate(nodes, *b, |gb, _| kernels::matmul_at_acc(g, &av, gb, m, n, k));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[1], out.shape()[0]);
            accumulate(nodes, *a, |ga, _| {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                    }
                }
            });
        }
        Op::Embedding { table: x, ids: rows } | Op::SelectRows { x, rows } => {
            let c = out.cols();
            accumulate(nodes, *x, |gx, _| {
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        gx[r * c + j] = gx[r * c + j] + g[k * c + j];
                    }
                }
            });
        }
        Op::SliceCols { x, start } => {
            let (r, len) = (out.shape()[0], out.shape()[1]);
            accumulate(nodes, *x, |gx, v| {
                let c = v.cols();
                for i in 0..r {
                    for j in 0..len {
                        gx[i * c + start + j] = gx[i * c + start + j] + g[i * len + j];
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let (r, total) = (out.shape()[0], out.shape()[1]);
            let mut offset = 0;
            for p in parts {
                let w = value_of(nodes, *p).shape()[1];
                accumulate(nodes, *p, |gp, _| {
                    for i in 0..r {
                        for j in 0..w {
                            gp[i * w + j] = gp[i * w + j] + g[i * total + offset + j];
                        }
                    }
                });
                offset += w;
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = lanes(out.shape(), *axis);
            let y = out.data();
            accumulate(nodes, *x, |gx, _| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: T = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..len {
                            let t = base + j * inner;
                            gx[t] = gx[t] + y[t] * (g[t] - dot);
                        }
                    }
                }
            });
        }
        Op::CausalSoftmax(x) => {
            let k = out.cols();
            let y = out.data();
            accumulate(nodes, *x, |gx, _| {
                for (row, (yr, gr)) in y.chunks_exact(k).zip(g.chunks_exact(k)).enumerate() {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        let t = row * k + j;
                        gx[t] = gx[t] + yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let n = out.cols();
            let gv = value_of(nodes, *gain).data().to_vec();
            accumulate(nodes, *x, |gx, _| {
                let nt = T::of(n as f64);
                for (r, &rs) in rstd.iter().enumerate() {
                    let row = r * n..(r + 1) * n;
                    let dxhat: Vec<T> = g[row.clone()].iter().zip(&gv).map(|(&d, &w)| d * w).collect();
                    let mean_d = dxhat.iter().copied().sum::<T>() / nt;
                    let mean_dx = dxhat.iter().zip(&xhat[row.clone()]).map(|(&d, &h)| d * h).sum::<T>() / nt;
                    for (j, &d) in dxhat.iter().enumerate() {
                        let t = r * n + j;
                        gx[t] = gx[t] + rs * (d - mean_d - xhat[t] * mean_dx);
                    }
                }
            });
            accumulate(nodes, *gain, |gg, _| {
                for (t, (&d, &h)) in g.iter().zip(xhat).enumerate() {
                    gg[t % n] = gg[t % n] + d * h;
                }
            });
            accumulate(nodes, *bias, |gb, _| {
                for (t, &d) in g.iter().enumerate() {
                    gb[t % n] = gb[t % n] + d;
                }
            });
        }
        Op::Gelu(x) => accumulate(nodes, *x, |gx, v| {
            for ((o, &d), &a) in gx.iter_mut().zip(g).zip(v.data()) {
                *o = *o + d * gelu_grad(a);
            }
        }),
        Op::Sum(x) => accumulate(nodes, *x, |gx, _| {
            for o in gx.iter_mut() {
                *o = *o + g[0];
            }
        }),
        Op::Mean(x) => accumulate(nodes, *x, |gx, _| {
            let s = g[0] / T::of(gx.len() as f64);
            for o in gx.iter_mut() {
                *o = *o + s;
            }
        }),
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            probs,
            count,
        } => accumulate(nodes, *logits, |gx, v| {
            let vocab = v.cols();
            let s = g[0] / T::of(*count as f64);
            for (t, &m) in mask.iter().enumerate() {
                if !m {
                    continue;
                }
                for j in 0..vocab {
                    let onehot = if j == targets[t] { T::one() } else { T::zero() };
                    let i = t * vocab + j;
                    gx[i] = gx[i] + s * (probs[i] - onehot);
                }
            }
        }),
        Op::KlDiv {
            p,
            q,
            axis,
            lp,
            lq,
            raw,
        } => {
            let shape = value_of(nodes, *p).shape().to_vec();
            let (outer, len, inner) = lanes(&shape, *axis);
            let lane = |o: usize, i: usize| o * inner + i;
            accumulate(nodes, *p, |gp, _| {
                for o in 0..outer {
                    for i in 0..inner {
                        let (d, kl) = (g[lane(o, i)], raw[lane(o, i)]);
                        for j in 0..len {
                            let t = o * len * inner + i + j * inner;
                            gp[t] = gp[t] + d * lp[t].exp() * ((lp[t] - lq[t]) - kl);
                        }
                    }
                }
            });
            accumulate(nodes, *q, |gq, _| {
                for o in 0..outer {
                    for i in 0..inner {
                        let d = g[lane(o, i)];
                        for j in 0..len {
                            let t = o * len * inner + i + j * inner;
                            gq[t] = gq[t] + d * (lq[t].exp() - lp[t].exp());
                        }
                    }
                }
            });
        }
    }
}

/// Dense kernels on row-major slices, backed by a single-threaded GEMM so
/// results are reproducible run to run.
pub mod kernels {
    use crate::tensor::Real;

    /// `c[m×n] = a[m×k] · b[k×n]`
    pub fn matmul<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
        T::gemm(m, k, n, a, [k, 1], b, [n, 1], T::zero(), c);
    }

    /// `c[m×n] += a[m×k] · b[k×n]`
    pub fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
        T::gemm(m, k, n, a, [k, 1], b, [n, 1], T::one(), c);
    }

    /// `c[m×n] = a[m×k] · b[n×k]ᵀ`
    pub fn matmul_bt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
        T::gemm(m, k, n, a, [k, 1], b, [1, k], T::zero(), c);
    }

    /// `c[m×n] += a[m×k] · b[n×k]ᵀ`
    pub fn matmul_bt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
        T::gemm(m, k, n, a, [k, 1], b, [1, k], T::one(), c);
    }

    /// `c[k×n] += a[m×k]ᵀ · b[m×n]`
    pub fn matmul_at_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
        T::gemm(k, m, n, a, [1, k], b, [n, 1], T::one(), c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn additive_and_multiplicative_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let i = g.constant(Tensor::identity(2));
        let s = g.add(a, z).unwrap();
        let m = g.matmul(a, i).unwrap();
        assert_eq!(g.value(s), g.value(a));
        assert_eq!(g.value(m), g.value(a));
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(Tensor::matrix(&[&[5.0], &[6.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }), "{err}");
        let c = g.constant(Tensor::zeros(&[4]));
        assert!(matches!(g.add(a, c), Err(Error::Shape { op: "add", .. })));
        let table = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            g.embedding(table, &[0, 3]),
            Err(Error::Index { op: "embedding", index: 3, limit: 3 })
        ));
        assert!(matches!(g.softmax(a, 2), Err(Error::Index { op: "softmax", .. })));
        assert!(matches!(g.kl_divergence(a, c, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::vector(&[0.0, 0.0]));
        let b = g.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        let b_shift = g.constant(Tensor::vector(&[101.0, 102.0, 103.0]));
        let sa = g.softmax(a, 0).unwrap();
        let sb = g.softmax(b, 0).unwrap();
        let sc = g.softmax(b_shift, 0).unwrap();
        assert_eq!(g.value(sa).data(), &[0.5, 0.5]);
        assert!(close(g.value(sb).data(), &[0.0900, 0.2447, 0.6652], 1e-3));
        assert!(close(g.value(sb).data(), g.value(sc).data(), 1e-12));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::matrix(&[&[1.0, 9.0, 9.0], &[1.0, 1.0, 9.0], &[0.0, 0.0, 0.0]]));
        let p = g.causal_softmax(s).unwrap();
        let v = g.value(p).data();
        assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&v[3..6], &[0.5, 0.5, 0.0]);
        assert!(close(&v[6..9], &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(&[&[1.0, -1.0], &[3.0, 3.0]]));
        let ones = g.constant(Tensor::vector(&[1.0, 1.0]));
        let twos = g.constant(Tensor::vector(&[2.0, 2.0]));
        let bias = g.constant(Tensor::vector(&[0.5, -0.5]));
        let zero = g.constant(Tensor::vector(&[0.0, 0.0]));
        let y1 = g.layer_norm(x, ones, zero, 1e-5).unwrap();
        let y2 = g.layer_norm(x, twos, zero, 1e-5).unwrap();
        let yb = g.layer_norm(x, ones, bias, 1e-5).unwrap();
        let v1 = g.value(y1).data().to_vec();
        assert!(close(&v1[..2], &[1.0, -1.0], 1e-4));
        assert_eq!(&v1[2..], &[0.0, 0.0]);
        assert_eq!(&g.value(yb).data()[2..], &[0.5, -0.5]);
        let doubled: Vec<f64> = v1.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.value(y2).data(), doubled.as_slice());
    }

    #[test]
    fn gelu_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(&[0.0, 10.0, 1.0]));
        let y = g.gelu(x);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-4);
        assert!((v[2] - 0.8412).abs() < 1e-3);
    }

    #[test]
    fn gelu_monotone_on_grid() {
        let grid: Vec<f64> = (0..400).map(|i| -0.75 + i as f64 * 0.05).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(&grid));
        let y = g.gelu(x);
        assert!(g.value(y).data().windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let uniform = g.constant(Tensor::zeros(&[1, 4]));
        let l = g.cross_entropy(uniform, &[3], &[true]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
        let sharp = g.constant(Tensor::matrix(&[&[0.0, 100.0, 0.0]]));
        let l = g.cross_entropy(sharp, &[1], &[true]).unwrap();
        assert!(g.value(l).item() < 1e-12);
        let x = g.constant(Tensor::matrix(&[&[1.0, 2.0, 3.0]]));
        let l = g.cross_entropy(x, &[2], &[true]).unwrap();
        assert!((g.value(l).item() - 0.4076).abs() < 1e-3);
        assert!(matches!(g.cross_entropy(x, &[2], &[false]), Err(Error::Contract(_))));
        assert!(matches!(g.cross_entropy(x, &[3], &[true]), Err(Error::Index { .. })));
    }

    #[test]
    fn softmax_cross_entropy_gradient_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::matrix(&[&[0.3, -1.2, 2.0, 0.1]]));
        let l = g.cross_entropy(x, &[1], &[true]).unwrap();
        g.backward(l).unwrap();
        let s = g.softmax(x, 1).unwrap();
        let mut expected = g.value(s).data().to_vec();
        expected[1] -= 1.0;
        assert!(close(g.grad(x).unwrap(), &expected, 1e-12));
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(&[&[0.3, -2.0, 5.0], &[1.0, 1.0, 1.0]]));
        let k = g.kl_divergence(x, x, 1).unwrap();
        assert!(g.value(k).data().iter().all(|&v| v <= 1e-9));
        let p = g.constant(Tensor::vector(&[30.0, 0.0]));
        let q = g.constant(Tensor::vector(&[0.0, 0.0]));
        let k = g.kl_divergence(p, q, 0).unwrap();
        assert!((g.value(k).item() - 2f64.ln()).abs() < 1e-9);
        let p = g.constant(Tensor::vector(&[30.0, 0.0, 0.0]));
        let q = g.constant(Tensor::vector(&[0.0, 0.0, 0.0]));
        let pq = g.kl_divergence(p, q, 0).unwrap();
        let qp = g.kl_divergence(q, p, 0).unwrap();
        assert!((g.value(pq).item() - g.value(qp).item()).abs() > 1.0);
    }

    #[test]
    fn kl_gradient_reaches_both_operands() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::vector(&[0.5, -0.1, 1.0]));
        let q = g.param(Tensor::vector(&[0.0, 0.2, -0.3]));
        let k = g.kl_divergence(p, q, 0).unwrap();
        g.backward(k).unwrap();
        assert!(g.grad(p).unwrap().iter().any(|&v| v != 0.0));
        assert!(g.grad(q).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::matrix(&[&[1.5, -2.0], &[0.25, 4.0]]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, -4.0, 0.5, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(&[1.0, 2.0]));
        let c = g.constant(Tensor::vector(&[3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }
}
