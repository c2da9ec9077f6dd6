//! Define-by-run gradient tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes are only ever appended, so a node's
//! inputs always precede it and a single reverse sweep visits each node once.

use super::tensor::{matmul_raw, softmax_slice, transpose_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    MulCol(Var, Var),
    MulRow(Var, Var),
    AddRow(Var, Var),
    Softmax(Var),
    CausalSoftmax(Var),
    RmsNorm { x: Var, inv_rms: Vec<f64> },
    Silu(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    GatherColumn { x: Var, col: usize, rows: Vec<usize> },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.require_matrix("matmul")?;
        let (k2, n) = tb.require_matrix("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = Tensor::matrix(m, n, matmul_raw(ta.data(), tb.data(), m, k, n))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.require_matrix("transpose")?;
        let out = Tensor::matrix(n, m, transpose_raw(ta.data(), m, n))?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    /// Element-wise product with an untracked constant of the same size.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if ta.len() != c.len() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: ta.shape().to_vec(),
                rhs: vec![c.len()],
            });
        }
        let data = ta.data().iter().zip(&c).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul_const", out, Op::MulConst(a, c), &[a])
    }

    /// Scales row `i` of `a` (m×n) by `col[i]` (m×1).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        let (m, n) = ta.require_matrix("mul_col")?;
        if tc.len() != m {
            return Err(mismatch("mul_col", ta, tc));
        }
        let mut data = ta.data().to_vec();
        for i in 0..m {
            let s = tc.data()[i];
            data[i * n..(i + 1) * n].iter_mut().for_each(|x| *x *= s);
        }
        let out = Tensor::matrix(m, n, data)?;
        self.push("mul_col", out, Op::MulCol(a, col), &[a, col])
    }

    /// Scales column `j` of `a` (m×n) by `row[j]` (length n).
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (m, n) = ta.require_matrix("mul_row")?;
        if tr.len() != n {
            return Err(mismatch("mul_row", ta, tr));
        }
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for (x, s) in data[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *x *= s;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        self.push("mul_row", out, Op::MulRow(a, row), &[a, row])
    }

    /// Adds a length-n bias to every row of `a` (m×n).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (m, n) = ta.require_matrix("add_row")?;
        if tb.len() != n {
            return Err(mismatch("add_row", ta, tb));
        }
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for (x, b) in data[i * n..(i + 1) * n].iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        self.push("add_row", out, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.require_matrix("softmax_rows")?;
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(softmax_slice(ta.row(i)));
        }
        let out = Tensor::matrix(m, n, data)?;
        self.push("softmax_rows", out, Op::Softmax(a), &[a])
    }

    /// Row softmax over a square score matrix where row `i` only sees columns `0..=i`.
    /// Masked entries are exactly zero.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.require_matrix("causal_softmax_rows")?;
        if m != n {
            return Err(mismatch("causal_softmax_rows", ta, ta));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let p = softmax_slice(&ta.row(i)[..=i]);
            data[i * n..i * n + i + 1].copy_from_slice(&p);
        }
        let out = Tensor::matrix(m, n, data)?;
        self.push("causal_softmax_rows", out, Op::CausalSoftmax(a), &[a])
    }

    /// `x / sqrt(mean(x²) + eps)` per row, without gain.
    pub fn rms_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.require_matrix("rms_norm_rows")?;
        let mut inv_rms = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = tx.row(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            data.extend(row.iter().map(|v| v * r));
        }
        let out = Tensor::matrix(m, n, data)?;
        self.push("rms_norm_rows", out, Op::RmsNorm { x, inv_rms }, &[x])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&v| v / (1.0 + (-v).exp())).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("silu", out, Op::Silu(a), &[a])
    }

    /// Picks rows of a matrix; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.require_matrix("gather_rows")?;
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one index".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Contract(format!("gather_rows index {bad} out of {m} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::matrix(idx.len(), n, data)?;
        self.push("gather_rows", out, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Places row `r` of `a` at row `idx[r]` of a zero `rows × n` matrix.
    /// Target indices must be distinct.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.require_matrix("scatter_rows")?;
        if idx.len() != m {
            return Err(Error::Shape {
                op: "scatter_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut data = vec![0.0; rows * n];
        let mut seen = vec![false; rows];
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows || seen[i] {
                return Err(Error::Contract(format!("scatter_rows bad target {i}")));
            }
            seen[i] = true;
            data[i * n..(i + 1) * n].copy_from_slice(ta.row(r));
        }
        let out = Tensor::matrix(rows, n, data)?;
        self.push("scatter_rows", out, Op::ScatterRows(a, idx.to_vec()), &[a])
    }

    /// Entries `a[rows[r], col]` as a column vector.
    pub fn gather_column(&mut self, a: Var, col: usize, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.require_matrix("gather_column")?;
        if col >= n || rows.iter().any(|&r| r >= m) || rows.is_empty() {
            return Err(Error::Contract("gather_column index out of range".into()));
        }
        let data = rows.iter().map(|&r| ta.get(r, col)).collect();
        let out = Tensor::matrix(rows.len(), 1, data)?;
        self.push(
            "gather_column",
            out,
            Op::GatherColumn {
                x: a,
                col,
                rows: rows.to_vec(),
            },
            &[a],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean next-token cross-entropy of `logits` (m×V) against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (m, v) = tl.require_matrix("cross_entropy")?;
        if targets.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Contract(format!("target {bad} outside vocabulary {v}")));
        }
        let mut probs = Vec::with_capacity(m * v);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let p = softmax_slice(tl.row(i));
            loss -= p[t].max(f64::MIN_POSITIVE).ln();
            probs.extend(p);
        }
        let out = Tensor::scalar(loss / m as f64);
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively over fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contrib),
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                if self.wants(*a) {
                    let bt = transpose_raw(tb.data(), k, n);
                    acc(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.wants(*b) {
                    let at = transpose_raw(ta.data(), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.rows(), out.cols());
                acc(*a, transpose_raw(g, m, n));
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    acc(*a, g.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|g| g * c).collect()),
            Op::MulConst(a, c) => acc(*a, g.iter().zip(c).map(|(g, c)| g * c).collect()),
            Op::MulCol(a, col) => {
                let (ta, tc) = (self.value(*a), self.value(*col));
                let (m, n) = (ta.rows(), ta.cols());
                if self.wants(*a) {
                    let mut ga = g.to_vec();
                    for i in 0..m {
                        let s = tc.data()[i];
                        ga[i * n..(i + 1) * n].iter_mut().for_each(|x| *x *= s);
                    }
                    acc(*a, ga);
                }
                if self.wants(*col) {
                    let gc = (0..m)
                        .map(|i| {
                            g[i * n..(i + 1) * n]
                                .iter()
                                .zip(ta.row(i))
                                .map(|(g, x)| g * x)
                                .sum()
                        })
                        .collect();
                    acc(*col, gc);
                }
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (self.value(*a), self.value(*row));
                let (m, n) = (ta.rows(), ta.cols());
                if self.wants(*a) {
                    let mut ga = g.to_vec();
                    for i in 0..m {
                        for (x, s) in ga[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                            *x *= s;
                        }
                    }
                    acc(*a, ga);
                }
                if self.wants(*row) {
                    let mut gr = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gr[j] += g[i * n + j] * ta.data()[i * n + j];
                        }
                    }
                    acc(*row, gr);
                }
            }
            Op::AddRow(a, bias) => {
                let n = out.cols();
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*bias) {
                    let mut gb = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        gb.iter_mut().zip(chunk).for_each(|(b, g)| *b += g);
                    }
                    acc(*bias, gb);
                }
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                // Masked entries have y = 0, so they receive no gradient.
                let n = out.cols();
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for (i, (grow, yrow)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for j in 0..n {
                        ga[i * n + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::RmsNorm { x, inv_rms } => {
                let tx = self.value(*x);
                let n = tx.cols();
                let mut gx = vec![0.0; tx.len()];
                for (i, &r) in inv_rms.iter().enumerate() {
                    let xr = tx.row(i);
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = gr.iter().zip(xr).map(|(g, x)| g * x).sum();
                    let c = r * r * r * dot / n as f64;
                    for j in 0..n {
                        gx[i * n + j] = r * gr[j] - c * xr[j];
                    }
                }
                acc(*x, gx);
            }
            Op::Silu(a) => {
                let ta = self.value(*a);
                let ga = g
                    .iter()
                    .zip(ta.data())
                    .map(|(g, &x)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                acc(*a, ga);
            }
            Op::GatherRows(a, idx) => {
                let ta = self.value(*a);
                let n = ta.cols();
                let mut ga = vec![0.0; ta.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        ga[i * n + j] += g[r * n + j];
                    }
                }
                acc(*a, ga);
            }
            Op::ScatterRows(a, idx) => {
                let n = out.cols();
                let mut ga = Vec::with_capacity(idx.len() * n);
                for &i in idx {
                    ga.extend_from_slice(&g[i * n..(i + 1) * n]);
                }
                acc(*a, ga);
            }
            Op::GatherColumn { x, col, rows } => {
                let tx = self.value(*x);
                let n = tx.cols();
                let mut gx = vec![0.0; tx.len()];
                for (r, &i) in rows.iter().enumerate() {
                    gx[i * n + col] += g[r];
                }
                acc(*x, gx);
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                acc(*a, vec![g[0]; len]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / targets.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * v + t] -= scale;
                }
                acc(*logits, gl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_cases() {
        let mut t = Tape::new();
        let i = t.constant(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = t.constant(mat(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = t.constant(mat(&[vec![1.0, 2.0]]));
        let b = t.constant(mat(&[vec![3.0], vec![4.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_rows_examples() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[vec![0.0; 4], vec![1000.0, 0.0, 0.0, 0.0]]));
        let y = t.softmax_rows(x).unwrap();
        let y = t.value(y);
        for j in 0..4 {
            assert_eq!(y.get(0, j), 0.25);
        }
        assert!((y.get(1, 0) - 1.0).abs() < 1e-12);
        assert!(y.get(1, 1).abs() < 1e-12);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = t.scale(x, 2.0).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(3x) + sum(x ⊙ x): grad = 3 + 2x
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.5, -1.0]), true);
        let a = t.scale(x, 3.0).unwrap();
        let b = t.mul(x, x).unwrap();
        let c = t.add(a, b).unwrap();
        let s = t.sum(c).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 1.0]);
    }

    #[test]
    fn overflow_is_reported() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1e300]), true);
        assert!(matches!(t.scale(x, 1e300), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn frozen_leaves_get_no_gradient_but_pass_it_through() {
        let mut t = Tape::new();
        let x = t.leaf(mat(&[vec![1.0, 2.0]]), true);
        let w = t.leaf(mat(&[vec![1.0], vec![1.0]]), false);
        let y = t.matmul(x, w).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
    }
}
