//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and enough saved state to run the adjoint. Leaves are either
//! constants (no gradient) or parameters. Gradients only propagate along
//! nodes that transitively depend on a parameter.
//!
//! Operations panic on shape mismatches: shapes are fixed by the model code,
//! and user-facing entry points validate their inputs before building a graph.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Reshape(Var),
    SwapLast(Var),
    Conv2d { input: Var, kernel: Var, stride: usize },
    MaxPool { input: Var, argmax: Vec<usize> },
    Select { input: Var, index: usize },
    Stack(Vec<Var>),
    StackCols(Vec<Var>),
    SelectCol { input: Var, index: usize },
    Gather { table: Var, indices: Vec<usize> },
    ConcatCols(Var, Var),
    SliceCols { input: Var, start: usize },
    MulRows { x: Var, w: Var },
    Normalize { x: Var, norms: Vec<f64> },
    RowDot(Var, Var),
    Softmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Pick { x: Var, index: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// influence the root through any differentiable path.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    let cols = *t.shape().last().expect("rank >= 1");
    (t.len() / cols.max(1), cols)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise operands differ in shape");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::new(x.shape(), x.data().iter().map(|v| f(*v)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |p, q| p + q);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |p, q| p - q);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |p, q| p * q);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |p, q| p / q);
        self.push(t, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.map(a, |v| v * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |v| v + c);
        self.push(t, Op::AddConst(a), &[a])
    }

    /// Sums a non-empty list of same-shape nodes left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// `a` viewed as `[rows, k]` times `b` of shape `[k, n]`; leading dims of `a` are kept.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, w) = (self.value(a), self.value(b));
        assert_eq!(w.ndim(), 2, "matmul rhs must be a matrix");
        let (m, k) = rows_cols(x);
        assert_eq!(k, w.dim(0), "matmul inner dims {:?} x {:?}", x.shape(), w.shape());
        let n = w.dim(1);
        let mut out = vec![0.0; m * n];
        matmul_acc(x.data(), w.data(), &mut out, m, k, n);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(&shape, out).unwrap();
        self.push(t, Op::MatMul(a, b), &[a, b])
    }

    /// `a [m,k] * b[n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = rows_cols(x);
        let (n, k2) = rows_cols(y);
        assert_eq!(k, k2, "matmul_nt inner dims");
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(x.data(), y.data(), &mut out, m, k, n);
        let t = Tensor::new(&[m, n], out).unwrap();
        self.push(t, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |v| if v < 0.0 { 0.0 } else { v });
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, |v| 1.0 / (1.0 + libm::exp(-v)));
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, libm::tanh);
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape).expect("reshape");
        self.push(t, Op::Reshape(a), &[a])
    }

    /// `[a, b, c] -> [a, c, b]`.
    pub fn swap_last(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (a, b, c) = (v.dim(0), v.dim(1), v.dim(2));
        let mut out = vec![0.0; v.len()];
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    out[(i * c + k) * b + j] = v.data()[(i * b + j) * c + k];
                }
            }
        }
        let t = Tensor::new(&[a, c, b], out).unwrap();
        self.push(t, Op::SwapLast(x), &[x])
    }

    /// Strided 2-D convolution with "same"-style padding `kh/2`, no bias.
    /// `input [n,h,w,ci]`, `kernel [kh,kw,ci,co]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Var {
        let (x, k) = (self.value(input), self.value(kernel));
        let (n, h, w, ci) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (kh, kw, kci, co) = (k.dim(0), k.dim(1), k.dim(2), k.dim(3));
        assert_eq!(ci, kci, "conv channel mismatch");
        let (ho, wo) = (conv_out(h, kh, stride), conv_out(w, kw, stride));
        let (ph, pw) = (kh / 2, kw / 2);
        let mut out = vec![0.0; n * ho * wo * co];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = &mut out[((b * ho + oy) * wo + ox) * co..][..co];
                    for ky in 0..kh {
                        let Some(iy) = (oy * stride + ky).checked_sub(ph).filter(|&y| y < h) else {
                            continue;
                        };
                        for kx in 0..kw {
                            let Some(ix) = (ox * stride + kx).checked_sub(pw).filter(|&v| v < w)
                            else {
                                continue;
                            };
                            let px = &x.data()[((b * h + iy) * w + ix) * ci..][..ci];
                            let kk = &k.data()[(ky * kw + kx) * ci * co..][..ci * co];
                            matmul_acc(px, kk, o, 1, ci, co);
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[n, ho, wo, co], out).unwrap();
        self.push(t, Op::Conv2d { input, kernel, stride }, &[input, kernel])
    }

    /// Max over the middle axis of `[a, b, c] -> [a, c]`. With `lens`, row `i`
    /// only considers the first `lens[i]` entries of the middle axis.
    pub fn max_pool(&mut self, input: Var, lens: Option<&[usize]>) -> Var {
        let x = self.value(input);
        let (a, b, c) = (x.dim(0), x.dim(1), x.dim(2));
        let mut out = vec![f64::NEG_INFINITY; a * c];
        let mut argmax = vec![0usize; a * c];
        for i in 0..a {
            let len = lens.map_or(b, |l| l[i]);
            assert!(len >= 1 && len <= b, "max_pool needs 1..={b} valid rows, got {len}");
            for j in 0..len {
                for k in 0..c {
                    let idx = (i * b + j) * c + k;
                    if x.data()[idx] > out[i * c + k] {
                        out[i * c + k] = x.data()[idx];
                        argmax[i * c + k] = idx;
                    }
                }
            }
        }
        let t = Tensor::new(&[a, c], out).unwrap();
        self.push(t, Op::MaxPool { input, argmax }, &[input])
    }

    /// `[a, b, c] -> [a, c]` taking index `index` of the middle axis.
    pub fn select(&mut self, input: Var, index: usize) -> Var {
        let x = self.value(input);
        let (a, b, c) = (x.dim(0), x.dim(1), x.dim(2));
        assert!(index < b);
        let mut out = Vec::with_capacity(a * c);
        for i in 0..a {
            out.extend_from_slice(&x.data()[(i * b + index) * c..][..c]);
        }
        let t = Tensor::new(&[a, c], out).unwrap();
        self.push(t, Op::Select { input, index }, &[input])
    }

    /// Stacks `[a, c]` nodes along a new middle axis: `[a, len, c]`.
    pub fn stack(&mut self, vars: &[Var]) -> Var {
        let first = self.value(vars[0]);
        let (a, c) = (first.dim(0), first.dim(1));
        let b = vars.len();
        let mut out = vec![0.0; a * b * c];
        for (j, v) in vars.iter().enumerate() {
            let x = self.value(*v);
            assert_eq!(x.shape(), [a, c], "stack operands differ in shape");
            for i in 0..a {
                out[(i * b + j) * c..][..c].copy_from_slice(&x.data()[i * c..][..c]);
            }
        }
        let t = Tensor::new(&[a, b, c], out).unwrap();
        self.push(t, Op::Stack(vars.to_vec()), vars)
    }

    /// Stacks `[r]` vectors as columns of `[r, len]`.
    pub fn stack_cols(&mut self, vars: &[Var]) -> Var {
        let r = self.value(vars[0]).len();
        let m = vars.len();
        let mut out = vec![0.0; r * m];
        for (j, v) in vars.iter().enumerate() {
            let x = self.value(*v);
            assert_eq!(x.len(), r);
            for i in 0..r {
                out[i * m + j] = x.data()[i];
            }
        }
        let t = Tensor::new(&[r, m], out).unwrap();
        self.push(t, Op::StackCols(vars.to_vec()), vars)
    }

    /// Column `index` of `[r, m]` as `[r]`.
    pub fn select_col(&mut self, input: Var, index: usize) -> Var {
        let x = self.value(input);
        let (r, m) = rows_cols(x);
        let out = (0..r).map(|i| x.data()[i * m + index]).collect();
        self.push(Tensor::vector(out), Op::SelectCol { input, index }, &[input])
    }

    /// Row lookup into `table [v, e]` producing `[indices.len(), e]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let e = t.dim(1);
        let mut out = Vec::with_capacity(indices.len() * e);
        for &i in indices {
            out.extend_from_slice(&t.data()[i * e..][..e]);
        }
        let v = Tensor::new(&[indices.len(), e], out).unwrap();
        self.push(v, Op::Gather { table, indices: indices.to_vec() }, &[table])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let (r, p) = rows_cols(x);
        let (r2, q) = rows_cols(y);
        assert_eq!(r, r2);
        let mut out = Vec::with_capacity(r * (p + q));
        for i in 0..r {
            out.extend_from_slice(&x.data()[i * p..][..p]);
            out.extend_from_slice(&y.data()[i * q..][..q]);
        }
        let t = Tensor::new(&[r, p + q], out).unwrap();
        self.push(t, Op::ConcatCols(a, b), &[a, b])
    }

    /// Columns `start..start + len` of `x` viewed as `[r, c]`.
    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Var {
        let x = self.value(input);
        let (r, c) = rows_cols(x);
        assert!(start + len <= c, "slice_cols out of range");
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x.data()[i * c + start..][..len]);
        }
        let t = Tensor::new(&[r, len], out).unwrap();
        self.push(t, Op::SliceCols { input, start }, &[input])
    }

    /// Scales row `i` of `x` (viewed as `[r, c]`) by `w[i]`.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (r, c) = rows_cols(xv);
        assert_eq!(wv.len(), r, "mul_rows weight length");
        let mut out = xv.data().to_vec();
        for i in 0..r {
            let s = wv.data()[i];
            out[i * c..][..c].iter_mut().for_each(|v| *v *= s);
        }
        let t = Tensor::new(xv.shape(), out).unwrap();
        self.push(t, Op::MulRows { x, w }, &[x, w])
    }

    /// L2-normalizes each row; zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = rows_cols(xv);
        let mut out = xv.data().to_vec();
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &mut out[i * c..][..c];
            let n = libm::sqrt(dot(row, row));
            norms[i] = n;
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let t = Tensor::new(xv.shape(), out).unwrap();
        self.push(t, Op::Normalize { x, norms }, &[x])
    }

    /// Row-wise dot product `[r, c] x [r, c] -> [r]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let (r, c) = rows_cols(x);
        let out = (0..r).map(|i| dot(&x.data()[i * c..][..c], &y.data()[i * c..][..c])).collect();
        self.push(Tensor::vector(out), Op::RowDot(a, b), &[a, b])
    }

    /// Softmax along the last axis. Entries with `mask[i] == false` get
    /// probability zero; each row needs at least one unmasked entry.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let xv = self.value(x);
        let (r, c) = rows_cols(xv);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let keep = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let row = &xv.data()[i * c..][..c];
            assert!((0..c).any(keep), "softmax row {i} fully masked");
            let mx = (0..c).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in (0..c).filter(|&j| keep(j)) {
                let e = libm::exp(row[j] - mx);
                out[i * c + j] = e;
                total += e;
            }
            out[i * c..][..c].iter_mut().for_each(|v| *v /= total);
        }
        let t = Tensor::new(xv.shape(), out).unwrap();
        self.push(t, Op::Softmax(x), &[x])
    }

    /// Per-row `-log softmax(logits)[label]`, shape `[r]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let xv = self.value(logits);
        let (r, c) = rows_cols(xv);
        assert_eq!(labels.len(), r);
        let mut probs = vec![0.0; r * c];
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &xv.data()[i * c..][..c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + libm::log(row.iter().map(|v| libm::exp(v - mx)).sum::<f64>());
            for j in 0..c {
                probs[i * c + j] = libm::exp(row[j] - lse);
            }
            out[i] = lse - row[labels[i]];
        }
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push(Tensor::vector(out), op, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Flat element `index` as a scalar node.
    pub fn pick(&mut self, x: Var, index: usize) -> Var {
        let v = self.value(x).data()[index];
        self.push(Tensor::scalar(v), Op::Pick { x, index }, &[x])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let t = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(t.data_mut());
    }

    fn acc_scaled(&self, grads: &mut [Option<Tensor>], v: Var, g: &[f64], s: f64) {
        self.acc(grads, v, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g));
    }

    fn propagate(&self, node: &Node, gt: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = gt.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_scaled(grads, *a, g, 1.0);
                self.acc_scaled(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_scaled(grads, *a, g, 1.0);
                self.acc_scaled(grads, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / bv[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * y[i] / bv[i];
                    }
                });
            }
            Op::Scale(a, s) => self.acc_scaled(grads, *a, g, *s),
            Op::AddConst(a) | Op::Reshape(a) => self.acc_scaled(grads, *a, g, 1.0),
            Op::MatMul(a, b) => {
                let (x, w) = (self.value(*a), self.value(*b));
                let (m, k) = rows_cols(x);
                let n = w.dim(1);
                self.acc(grads, *a, |d| matmul_nt_acc(g, w.data(), d, m, n, k));
                self.acc(grads, *b, |d| matmul_tn_acc(x.data(), g, d, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (x, z) = (self.value(*a), self.value(*b));
                let (m, k) = rows_cols(x);
                let n = z.dim(0);
                self.acc(grads, *a, |d| matmul_acc(g, z.data(), d, m, n, k));
                self.acc(grads, *b, |d| matmul_tn_acc(g, x.data(), d, m, n, k));
            }
            Op::Relu(a) => self.acc(grads, *a, |d| {
                for i in 0..d.len() {
                    if y[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            }),
            Op::Sigmoid(a) => self.acc(grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Tanh(a) => self.acc(grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::SwapLast(x) => {
                let s = node.value.shape();
                let (a, c, b) = (s[0], s[1], s[2]);
                self.acc(grads, *x, |d| {
                    for i in 0..a {
                        for j in 0..b {
                            for k in 0..c {
                                d[(i * b + j) * c + k] += g[(i * c + k) * b + j];
                            }
                        }
                    }
                });
            }
            Op::Conv2d { input, kernel, stride } => {
                self.conv2d_backward(*input, *kernel, *stride, node.value.shape(), g, grads)
            }
            Op::MaxPool { input, argmax } => self.acc(grads, *input, |d| {
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += g[o];
                }
            }),
            Op::Select { input, index } => {
                let s = self.value(*input).shape();
                let (a, b, c) = (s[0], s[1], s[2]);
                self.acc(grads, *input, |d| {
                    for i in 0..a {
                        for k in 0..c {
                            d[(i * b + index) * c + k] += g[i * c + k];
                        }
                    }
                });
            }
            Op::Stack(vars) => {
                let s = node.value.shape();
                let (a, b, c) = (s[0], s[1], s[2]);
                for (j, v) in vars.iter().enumerate() {
                    self.acc(grads, *v, |d| {
                        for i in 0..a {
                            for k in 0..c {
                                d[i * c + k] += g[(i * b + j) * c + k];
                            }
                        }
                    });
                }
            }
            Op::StackCols(vars) => {
                let m = vars.len();
                for (j, v) in vars.iter().enumerate() {
                    self.acc(grads, *v, |d| {
                        for (i, di) in d.iter_mut().enumerate() {
                            *di += g[i * m + j];
                        }
                    });
                }
            }
            Op::SelectCol { input, index } => {
                let (_, m) = rows_cols(self.value(*input));
                self.acc(grads, *input, |d| {
                    for (i, gi) in g.iter().enumerate() {
                        d[i * m + index] += gi;
                    }
                });
            }
            Op::Gather { table, indices } => {
                let e = self.value(*table).dim(1);
                self.acc(grads, *table, |d| {
                    for (r, &i) in indices.iter().enumerate() {
                        for k in 0..e {
                            d[i * e + k] += g[r * e + k];
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (r, p) = rows_cols(self.value(*a));
                let q = self.value(*b).len() / r.max(1);
                self.acc(grads, *a, |d| {
                    for i in 0..r {
                        for k in 0..p {
                            d[i * p + k] += g[i * (p + q) + k];
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..r {
                        for k in 0..q {
                            d[i * q + k] += g[i * (p + q) + p + k];
                        }
                    }
                });
            }
            Op::SliceCols { input, start } => {
                let (r, c) = rows_cols(self.value(*input));
                let len = node.value.dim(1);
                self.acc(grads, *input, |d| {
                    for i in 0..r {
                        for k in 0..len {
                            d[i * c + start + k] += g[i * len + k];
                        }
                    }
                });
            }
            Op::MulRows { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (r, c) = rows_cols(xv);
                self.acc(grads, *x, |d| {
                    for i in 0..r {
                        let s = wv.data()[i];
                        for k in 0..c {
                            d[i * c + k] += g[i * c + k] * s;
                        }
                    }
                });
                self.acc(grads, *w, |d| {
                    for (i, di) in d.iter_mut().enumerate().take(r) {
                        *di += dot(&g[i * c..][..c], &xv.data()[i * c..][..c]);
                    }
                });
            }
            Op::Normalize { x, norms } => {
                let c = *node.value.shape().last().unwrap();
                self.acc(grads, *x, |d| {
                    for (i, &n) in norms.iter().enumerate() {
                        if n == 0.0 {
                            continue;
                        }
                        let yr = &y[i * c..][..c];
                        let gr = &g[i * c..][..c];
                        let proj = dot(yr, gr);
                        for k in 0..c {
                            d[i * c + k] += (gr[k] - yr[k] * proj) / n;
                        }
                    }
                });
            }
            Op::RowDot(a, b) => {
                let (x, z) = (self.value(*a), self.value(*b));
                let (r, c) = rows_cols(x);
                self.acc(grads, *a, |d| {
                    for i in 0..r {
                        for k in 0..c {
                            d[i * c + k] += g[i] * z.data()[i * c + k];
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..r {
                        for k in 0..c {
                            d[i * c + k] += g[i] * x.data()[i * c + k];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let (r, c) = rows_cols(&node.value);
                self.acc(grads, *x, |d| {
                    for i in 0..r {
                        let yr = &y[i * c..][..c];
                        let gr = &g[i * c..][..c];
                        let inner = dot(yr, gr);
                        for k in 0..c {
                            d[i * c + k] += yr[k] * (gr[k] - inner);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = probs.len() / labels.len().max(1);
                self.acc(grads, *logits, |d| {
                    for (i, &lab) in labels.iter().enumerate() {
                        for k in 0..c {
                            let ind = if k == lab { 1.0 } else { 0.0 };
                            d[i * c + k] += g[i] * (probs[i * c + k] - ind);
                        }
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Pick { x, index } => self.acc(grads, *x, |d| d[*index] += g[0]),
        }
    }

    fn conv2d_backward(
        &self,
        input: Var,
        kernel: Var,
        stride: usize,
        out_shape: &[usize],
        g: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (x, k) = (self.value(input), self.value(kernel));
        let (n, h, w, ci) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (kh, kw, co) = (k.dim(0), k.dim(1), k.dim(3));
        let (ho, wo) = (out_shape[1], out_shape[2]);
        let (ph, pw) = (kh / 2, kw / 2);
        let want_x = self.nodes[input.0].requires_grad;
        let want_k = self.nodes[kernel.0].requires_grad;
        let mut dx = if want_x { vec![0.0; x.len()] } else { Vec::new() };
        let mut dk = if want_k { vec![0.0; k.len()] } else { Vec::new() };
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = &g[((b * ho + oy) * wo + ox) * co..][..co];
                    for ky in 0..kh {
                        let Some(iy) = (oy * stride + ky).checked_sub(ph).filter(|&y| y < h) else {
                            continue;
                        };
                        for kx in 0..kw {
                            let Some(ix) = (ox * stride + kx).checked_sub(pw).filter(|&v| v < w)
                            else {
                                continue;
                            };
                            let xo = ((b * h + iy) * w + ix) * ci;
                            let ko = (ky * kw + kx) * ci * co;
                            if want_k {
                                let px = &x.data()[xo..][..ci];
                                matmul_tn_acc(px, go, &mut dk[ko..][..ci * co], 1, ci, co);
                            }
                            if want_x {
                                let kk = &k.data()[ko..][..ci * co];
                                matmul_nt_acc(go, kk, &mut dx[xo..][..ci], 1, co, ci);
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            self.acc_scaled(grads, input, &dx, 1.0);
        }
        if want_k {
            self.acc_scaled(grads, kernel, &dk, 1.0);
        }
    }
}

/// Output extent of a padded, strided convolution along one axis.
pub fn conv_out(extent: usize, kernel: usize, stride: usize) -> usize {
    (extent + 2 * (kernel / 2) - kernel) / stride + 1
}

pub mod check {
    //! Central finite-difference checks for graph-built scalar functions.

    use super::*;

    /// Relative error `|a - b| / max(|a|, |b|, floor)`.
    pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
        libm::fabs(a - b) / libm::fabs(a).max(libm::fabs(b)).max(floor)
    }

    /// Norm-wise relative error of two gradient vectors.
    pub fn vector_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let na: f64 = a.iter().map(|x| x * x).sum();
        let nb: f64 = b.iter().map(|x| x * x).sum();
        libm::sqrt(diff) / libm::sqrt(na).max(libm::sqrt(nb)).max(floor)
    }

    /// Finite-difference gradient of `f` at `inputs[which]`, all coordinates.
    pub fn numerical_gradient(
        f: &dyn Fn(&[Tensor]) -> f64,
        inputs: &[Tensor],
        which: usize,
        eps: f64,
    ) -> Vec<f64> {
        let mut work = inputs.to_vec();
        let n = work[which].len();
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + eps;
            let plus = f(&work);
            work[which].data_mut()[i] = orig - eps;
            let minus = f(&work);
            work[which].data_mut()[i] = orig;
            *o = (plus - minus) / (2.0 * eps);
        }
        out
    }

    /// Builds the scalar with every input as a parameter, returns the analytic
    /// gradients alongside the forward value.
    pub fn analytic_gradient(
        build: &dyn Fn(&mut Graph, &[Var]) -> Var,
        inputs: &[Tensor],
    ) -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let root = build(&mut g, &vars);
        let grads = g.backward(root);
        let out = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).map_or_else(|| vec![0.0; t.len()], |x| x.data().to_vec()))
            .collect();
        (g.scalar(root), out)
    }

    /// Largest norm-wise relative error over all inputs.
    pub fn max_gradient_error(
        build: &dyn Fn(&mut Graph, &[Var]) -> Var,
        inputs: &[Tensor],
        eps: f64,
    ) -> f64 {
        let (_, analytic) = analytic_gradient(build, inputs);
        let eval = |ts: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            let root = build(&mut g, &vars);
            g.scalar(root)
        };
        (0..inputs.len())
            .map(|i| {
                let num = numerical_gradient(&eval, inputs, i, eps);
                vector_relative_error(&analytic[i], &num, 1e-8)
            })
            .fold(0.0, f64::max)
    }
}
