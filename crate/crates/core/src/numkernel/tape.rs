//! Reverse-mode differentiation over an append-only operation list.
//!
//! Nodes are stored in creation order, so every operation's inputs precede it
//! and a single reverse sweep is a valid topological traversal.

use super::kernels;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
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
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: T },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var },
    CrossEntropy { logits: Var, target: usize, probs: Vec<T> },
    Sum { x: Var },
    SliceCols { x: Var, start: usize, cols: usize },
    ConcatCols { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    MeanRows { x: Var },
    Reshape { x: Var },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations for one forward pass and replays them backwards.
/// Confined to a single thread; create one per forward pass or batch.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    /// Persistent gradients for leaves, accumulated across `backward` calls.
    leaf_grads: Vec<Option<Vec<T>>>,
}

/// Lane-wise `v - v` stays zero only for finite values; eight independent
/// accumulators let this vectorise.
fn all_finite<T: Scalar>(v: &[T]) -> bool {
    let mut lanes = [T::zero(); 8];
    let mut chunks = v.chunks_exact(8);
    for c in &mut chunks {
        for (l, &x) in lanes.iter_mut().zip(c) {
            // NaN exactly when x is not finite.
            #[allow(clippy::eq_op)]
            {
                *l += x - x;
            }
        }
    }
    chunks.remainder().iter().all(|x| x.is_finite()) && lanes.iter().all(|l| *l == T::zero())
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("rank >= 1");
    (shape.iter().product::<usize>() / cols, cols)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        requires_grad: bool,
        op: Op<T>,
    ) -> Result<Var> {
        if !all_finite(&value) {
            return Err(Error::Numeric { op: op_name });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// Registers a tensor; participates in differentiation iff
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Result<Var> {
        self.push(
            "leaf",
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad,
            Op::Leaf,
        )
    }

    pub fn param(&mut self, tensor: &Tensor<T>) -> Result<Var> {
        self.push("leaf", tensor.shape().to_vec(), tensor.data().to_vec(), true, Op::Leaf)
    }

    pub fn constant(&mut self, tensor: &Tensor<T>) -> Result<Var> {
        self.push("leaf", tensor.shape().to_vec(), tensor.data().to_vec(), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes are well-formed")
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn reset_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions {m}x{k} · {k2}x{n}"),
            ));
        }
        let value = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul", vec![m, n], value, rg, Op::MatMul { a, b, m, k, n })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix("transpose", x)?;
        let value = kernels::transpose(self.value(x), rows, cols);
        let rg = self.rg(&[x]);
        self.push("transpose", vec![cols, rows], value, rg, Op::Transpose { x, rows, cols })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        self.push("add", self.shape(a).to_vec(), value, rg, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        self.push("mul", self.shape(a).to_vec(), value, rg, Op::Mul(a, b))
    }

    /// Adds a bias vector to every slice along the last axis; the only
    /// broadcast the kernel supports.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = *self.shape(x).last().expect("rank >= 1");
        if self.shape(bias) != [cols] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} for last dim {cols}", self.shape(bias)),
            ));
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks_exact(cols)
            .flat_map(|r| r.iter().zip(b).map(|(&v, &bv)| v + bv))
            .collect();
        let rg = self.rg(&[x, bias]);
        self.push("add_bias", self.shape(x).to_vec(), value, rg, Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).iter().map(|&v| v * factor).collect();
        let rg = self.rg(&[x]);
        self.push("scale", self.shape(x).to_vec(), value, rg, Op::Scale { x, factor })
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        let value = kernels::softmax_rows(self.value(x), cols);
        let rg = self.rg(&[x]);
        self.push("softmax", self.shape(x).to_vec(), value, rg, Op::Softmax { x })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (_, cols) = rows_cols(self.shape(x));
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "affine {:?}/{:?} for last dim {cols}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (xhat, rstd) = kernels::layer_norm_rows(self.value(x), cols, T::from_f64(eps));
        let g = self.value(gamma);
        let b = self.value(beta);
        let value = xhat
            .chunks_exact(cols)
            .flat_map(|r| r.iter().zip(g).zip(b).map(|((&h, &gv), &bv)| h * gv + bv))
            .collect();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            self.shape(x).to_vec(),
            value,
            rg,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let rg = self.rg(&[x]);
        self.push("gelu", self.shape(x).to_vec(), value, rg, Op::Gelu { x })
    }

    /// `−log softmax(logits)[target]` for a single logits vector
    /// (shape `[C]` or `[1, C]`).
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (rows, c) = self.matrix("cross_entropy", logits)?;
        if rows != 1 {
            return Err(Error::dim(
                "cross_entropy",
                format!("expected one logits row, got {rows}"),
            ));
        }
        if target >= c {
            return Err(Error::Index(format!(
                "cross_entropy target {target} out of range for {c} classes"
            )));
        }
        let x = self.value(logits);
        let max = x.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &v in x {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        let loss = lse - x[target];
        let probs = kernels::softmax_rows(x, c);
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy { logits, target, probs },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut s = T::zero();
        for &v in self.value(x) {
            s += v;
        }
        let rg = self.rg(&[x]);
        self.push("sum", vec![1], vec![s], rg, Op::Sum { x })
    }

    /// Sums a list of scalars left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Contract("add_all on an empty list".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Columns `start..start+width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.matrix("slice_cols", x)?;
        if width == 0 || start + width > cols {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} of {cols}", start + width),
            ));
        }
        let value = self
            .value(x)
            .chunks_exact(cols)
            .flat_map(|r| r[start..start + width].iter().copied())
            .collect();
        let rg = self.rg(&[x]);
        self.push("slice_cols", vec![rows, width], value, rg, Op::SliceCols { x, start, cols })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no parts"))?;
        let (rows, _) = self.matrix("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix("concat_cols", p)?;
            if r != rows {
                return Err(Error::dim("concat_cols", format!("row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push(
            "concat_cols",
            vec![rows, total],
            value,
            rg,
            Op::ConcatCols { parts: parts.to_vec() },
        )
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix("slice_rows", x)?;
        if len == 0 || start + len > rows {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} of {rows}", start + len),
            ));
        }
        let value = self.value(x)[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(&[x]);
        self.push("slice_rows", vec![len, cols], value, rg, Op::SliceRows { x, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no parts"))?;
        let (_, cols) = self.matrix("concat_rows", first)?;
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix("concat_rows", p)?;
            if c != cols {
                return Err(Error::dim("concat_rows", format!("column counts {cols} vs {c}")));
            }
            rows += r;
            value.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        self.push(
            "concat_rows",
            vec![rows, cols],
            value,
            rg,
            Op::ConcatRows { parts: parts.to_vec() },
        )
    }

    /// Column means of a matrix, returned as `[1, cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix("mean_rows", x)?;
        let mut value = vec![T::zero(); cols];
        for r in self.value(x).chunks_exact(cols) {
            for (acc, &v) in value.iter_mut().zip(r) {
                *acc += v;
            }
        }
        let inv = T::one() / T::from_f64(rows as f64);
        value.iter_mut().for_each(|v| *v = *v * inv);
        let rg = self.rg(&[x]);
        self.push("mean_rows", vec![1, cols], value, rg, Op::MeanRows { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push("reshape", shape.to_vec(), value, rg, Op::Reshape { x })
    }

    /// Populates leaf gradients with d(loss)/d(leaf), adding to whatever
    /// previous calls accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_with_seed(loss, &[T::one()])
    }

    /// Backward pass from an arbitrary node with an explicit output
    /// cotangent.
    pub fn backward_with_seed(&mut self, out: Var, seed: &[T]) -> Result<()> {
        if seed.len() != self.value(out).len() {
            return Err(Error::dim(
                "backward",
                format!("seed len {} vs output len {}", seed.len(), self.value(out).len()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed.to_vec());

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            macro_rules! acc {
                ($v:expr) => {{
                    let v: Var = $v;
                    let len = self.nodes[v.0].value.len();
                    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
                }};
            }
            let want = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    match &mut self.leaf_grads[i] {
                        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, &v)| *b += v),
                        slot @ None => *slot = Some(g),
                    }
                    continue;
                }
                &Op::MatMul { a, b, m, k, n } => {
                    if want(a) {
                        let bv = &self.nodes[b.0].value;
                        let da = acc!(a);
                        kernels::matmul_grad_a(&g, bv, da, m, k, n);
                    }
                    if want(b) {
                        let av = &self.nodes[a.0].value;
                        let db = acc!(b);
                        kernels::matmul_grad_b(av, &g, db, m, k, n);
                    }
                }
                &Op::Transpose { x, rows, cols } => {
                    if want(x) {
                        let gt = kernels::transpose(&g, cols, rows);
                        acc!(x).iter_mut().zip(&gt).for_each(|(d, &v)| *d += v);
                    }
                }
                &Op::Add(a, b) => {
                    for v in [a, b] {
                        if want(v) {
                            acc!(v).iter_mut().zip(&g).for_each(|(d, &gv)| *d += gv);
                        }
                    }
                }
                &Op::Mul(a, b) => {
                    if want(a) {
                        let bv = &self.nodes[b.0].value;
                        let da = acc!(a);
                        for ((d, &gv), &y) in da.iter_mut().zip(&g).zip(bv) {
                            *d += gv * y;
                        }
                    }
                    if want(b) {
                        let av = &self.nodes[a.0].value;
                        let db = acc!(b);
                        for ((d, &gv), &x) in db.iter_mut().zip(&g).zip(av) {
                            *d += gv * x;
                        }
                    }
                }
                &Op::AddBias { x, bias } => {
                    if want(x) {
                        acc!(x).iter_mut().zip(&g).for_each(|(d, &gv)| *d += gv);
                    }
                    if want(bias) {
                        let db = acc!(bias);
                        let cols = db.len();
                        for r in g.chunks_exact(cols) {
                            db.iter_mut().zip(r).for_each(|(d, &gv)| *d += gv);
                        }
                    }
                }
                &Op::Scale { x, factor } => {
                    if want(x) {
                        acc!(x).iter_mut().zip(&g).for_each(|(d, &gv)| *d += gv * factor);
                    }
                }
                &Op::Softmax { x } => {
                    if want(x) {
                        let y = &node.value;
                        let cols = *node.shape.last().expect("rank >= 1");
                        kernels::softmax_rows_grad(y, &g, acc!(x), cols);
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let cols = *node.shape.last().expect("rank >= 1");
                    if want(beta) {
                        let db = acc!(beta);
                        for r in g.chunks_exact(cols) {
                            db.iter_mut().zip(r).for_each(|(d, &gv)| *d += gv);
                        }
                    }
                    if want(gamma) {
                        let dg = acc!(gamma);
                        for (r, h) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                            for ((d, &gv), &hv) in dg.iter_mut().zip(r).zip(h) {
                                *d += gv * hv;
                            }
                        }
                    }
                    if want(x) {
                        let gam = self.nodes[gamma.0].value.clone();
                        let n = T::from_f64(cols as f64);
                        let dx = acc!(x);
                        for (((gr, hr), dxr), &rs) in g
                            .chunks_exact(cols)
                            .zip(xhat.chunks_exact(cols))
                            .zip(dx.chunks_exact_mut(cols))
                            .zip(rstd)
                        {
                            let mut mean_d = T::zero();
                            let mut mean_dh = T::zero();
                            for ((&gv, &hv), &gm) in gr.iter().zip(hr).zip(&gam) {
                                let dh = gv * gm;
                                mean_d += dh;
                                mean_dh += dh * hv;
                            }
                            mean_d = mean_d / n;
                            mean_dh = mean_dh / n;
                            for (((d, &gv), &hv), &gm) in
                                dxr.iter_mut().zip(gr).zip(hr).zip(&gam)
                            {
                                *d += rs * (gv * gm - mean_d - hv * mean_dh);
                            }
                        }
                    }
                }
                &Op::Gelu { x } => {
                    if want(x) {
                        let xv = &self.nodes[x.0].value;
                        let dx = acc!(x);
                        for ((d, &gv), &v) in dx.iter_mut().zip(&g).zip(xv) {
                            *d += gv * kernels::gelu_grad(v);
                        }
                    }
                }
                Op::CrossEntropy { logits, target, probs } => {
                    let (logits, target) = (*logits, *target);
                    if want(logits) {
                        let s = g[0];
                        let dl = acc!(logits);
                        for (j, (d, &p)) in dl.iter_mut().zip(probs).enumerate() {
                            let onehot = if j == target { T::one() } else { T::zero() };
                            *d += s * (p - onehot);
                        }
                    }
                }
                &Op::Sum { x } => {
                    if want(x) {
                        let s = g[0];
                        acc!(x).iter_mut().for_each(|d| *d += s);
                    }
                }
                &Op::SliceCols { x, start, cols } => {
                    if want(x) {
                        let width = node.shape[1];
                        let dx = acc!(x);
                        for (dr, gr) in dx.chunks_exact_mut(cols).zip(g.chunks_exact(width)) {
                            dr[start..start + width]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(d, &gv)| *d += gv);
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let total = node.shape[1];
                    let mut off = 0;
                    for &p in parts {
                        let w = *self.nodes[p.0].shape.last().expect("rank >= 1");
                        if want(p) {
                            let dp = acc!(p);
                            for (dr, gr) in dp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                                dr.iter_mut()
                                    .zip(&gr[off..off + w])
                                    .for_each(|(d, &gv)| *d += gv);
                            }
                        }
                        off += w;
                    }
                }
                &Op::SliceRows { x, start } => {
                    if want(x) {
                        let cols = node.shape[1];
                        let dx = acc!(x);
                        dx[start * cols..start * cols + g.len()]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(d, &gv)| *d += gv);
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        if want(p) {
                            acc!(p)
                                .iter_mut()
                                .zip(&g[off..off + len])
                                .for_each(|(d, &gv)| *d += gv);
                        }
                        off += len;
                    }
                }
                &Op::MeanRows { x } => {
                    if want(x) {
                        let cols = node.shape[1];
                        let rows = self.nodes[x.0].value.len() / cols;
                        let inv = T::one() / T::from_f64(rows as f64);
                        let dx = acc!(x);
                        for dr in dx.chunks_exact_mut(cols) {
                            dr.iter_mut().zip(&g).for_each(|(d, &gv)| *d += gv * inv);
                        }
                    }
                }
                &Op::Reshape { x } => {
                    if want(x) {
                        acc!(x).iter_mut().zip(&g).for_each(|(d, &gv)| *d += gv);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape<f64>, v: &[f64]) -> Var {
        tape.param(&Tensor::from_f64(&[v.len()], v).unwrap()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, -2.0, 5.0]);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[3.0]);
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0]);
        let a = tape.mul(x, x).unwrap();
        let b = tape.mul(x, x).unwrap();
        let loss = tape.add(a, b).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_reset() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[2.0]);
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[8.0]);
        tape.reset_grads();
        assert!(tape.grad(x).is_none());
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        let c = tape.constant(&Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap()).unwrap();
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn overflow_is_a_numeric_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape
            .param(&Tensor::new(&[1, 1], vec![1e30]).unwrap())
            .unwrap();
        let r = tape.mul(x, x);
        assert!(matches!(r, Err(Error::Numeric { op: "mul" })));
    }

    #[test]
    fn slicing_and_concatenation_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .param(&Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let a = tape.slice_cols(x, 0, 1).unwrap();
        let b = tape.slice_cols(x, 1, 2).unwrap();
        let y = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let r0 = tape.slice_rows(y, 0, 1).unwrap();
        let r1 = tape.slice_rows(y, 1, 1).unwrap();
        let z = tape.concat_rows(&[r0, r1]).unwrap();
        let s = tape.sum(z).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }
}
