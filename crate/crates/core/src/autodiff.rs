//! Reverse-mode automatic differentiation over batched matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value; [`Tape::backward`] then sweeps the nodes in reverse insertion order
//! accumulating adjoints. Values are [`Matrix`]es whose rows are batch
//! entries; per-sample small matrices (the d×d blocks of the latent mixture)
//! are stored flattened row-major, one per row.
//!
//! The op set is exactly what the MAW networks and losses use. A tape supports
//! a single backward pass; call [`Tape::reset`] to reuse it.

use std::collections::BTreeMap;

use crate::error::{domain_err, shape_err, Result};
use crate::linalg::{matmul_nt, matmul_tn, matmul_unchecked, sym_eig, Matrix};

/// Index of a trainable parameter in the owning store.
pub type ParamId = usize;

/// Smallest eigen-gap used in the eigendecomposition adjoint.
pub const EIG_GAP_CLAMP: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Affine { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Softplus(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64>, train: bool },
    RowNorms(Var),
    RowSqNorms(Var),
    RowNormalize(Var),
    Mean(Var),
    Sum(Var),
    Cols { x: Var, start: usize },
    Rows { x: Var, start: usize },
    ConcatRows(Var, Var),
    RepeatRows(Var, usize),
    DiagSandwich { a: Var, s: Var },
    DiagEmbed(Var),
    SymEig { m: Var, d: usize },
    EigSynth { eig: Var, d: usize, keep: usize },
    BatchedMatVec { m: Var, v: Var },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Adjoints of every parameter registered on the tape.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf bound to parameter `id`.
    pub fn param(&mut self, id: ParamId, value: &Matrix) -> Var {
        self.nodes.push(Node { value: value.clone(), op: Op::Leaf, requires_grad: true, param: Some(id) });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf (data, injected noise, frozen parameters).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false, param: None });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return shape_err(format!("matmul {sa:?} by {sb:?}"));
        }
        let v = matmul_unchecked(self.value(a), self.value(b));
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `x·w + b` with `b` a 1×m row broadcast over the batch.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.1 != sw.0 || sb != (1, sw.1) {
            return shape_err(format!("affine x{sx:?} w{sw:?} b{sb:?}"));
        }
        let mut v = matmul_unchecked(self.value(x), self.value(w));
        let bias = self.value(b).as_slice().to_vec();
        for r in 0..v.rows() {
            for (o, bv) in v.row_mut(r).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(v, Op::Affine { x, w, b }, &[x, w, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// Elementwise product with a constant mask or weight matrix.
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return shape_err(format!("mul_const {:?} vs {:?}", self.shape(a), c.shape()));
        }
        let v = self.value(a).zip_map(&c, |x, y| x * y)?;
        Ok(self.push(v, Op::MulConst(a, c), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { alpha * x });
        self.push(v, Op::LeakyRelu(a, alpha), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    /// Batch normalization with statistics taken over the rows of `x`.
    /// Requires at least two rows.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c) = self.shape(x);
        self.check_bn_params(gamma, beta, c)?;
        if n < 2 {
            return domain_err("train-mode batch norm needs a batch of at least 2");
        }
        let xv = self.value(x);
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let out = self.normalize_with(x, gamma, beta, &mean, &inv_std, true);
        Ok((out, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let c = self.shape(x).1;
        self.check_bn_params(gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return shape_err("batch norm running statistics width");
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        Ok(self.normalize_with(x, gamma, beta, mean, &inv_std, false))
    }

    fn check_bn_params(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return shape_err(format!("batch norm gamma/beta must be 1x{c}"));
        }
        Ok(())
    }

    fn normalize_with(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64], train: bool) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let mut xhat = Matrix::zeros(n, c);
        for r in 0..n {
            for ((o, v), (m, s)) in xhat.row_mut(r).iter_mut().zip(xv.row(r)).zip(mean.iter().zip(inv_std)) {
                *o = (v - m) * s;
            }
        }
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        let mut y = xhat.clone();
        for r in 0..n {
            for ((o, gv), bv) in y.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std: inv_std.to_vec(), train };
        self.push(y, op, &[x, gamma, beta])
    }

    /// Euclidean norm of each row, as an n×1 column.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| crate::linalg::l2_norm(av.row(r))).collect();
        let v = Matrix::from_vec(av.rows(), 1, data).expect("row count");
        self.push(v, Op::RowNorms(a), &[a])
    }

    pub fn row_sq_norms(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().map(|x| x * x).sum()).collect();
        let v = Matrix::from_vec(av.rows(), 1, data).expect("row count");
        self.push(v, Op::RowSqNorms(a), &[a])
    }

    /// `‖x_i − y_i‖₂` per row.
    pub fn l2norm_of_diff(&mut self, x: Var, y: Var) -> Result<Var> {
        let d = self.sub(x, y)?;
        Ok(self.row_norms(d))
    }

    /// Scales every row to unit Euclidean norm; zero rows stay zero.
    pub fn unit_normalize(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let n = crate::linalg::l2_norm(v.row(r));
            if n > 0.0 {
                v.row_mut(r).iter_mut().for_each(|x| *x /= n);
            }
        }
        self.push(v, Op::RowNormalize(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.as_slice().iter().sum::<f64>() / av.len().max(1) as f64;
        self.push(Matrix::filled(1, 1, m), Op::Mean(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().sum::<f64>();
        self.push(Matrix::filled(1, 1, s), Op::Sum(a), &[a])
    }

    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.shape(a);
        if start + len > c || len == 0 {
            return shape_err(format!("columns {start}..{} of a {c}-column matrix", start + len));
        }
        let av = self.value(a);
        let mut v = Matrix::zeros(n, len);
        for r in 0..n {
            v.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        Ok(self.push(v, Op::Cols { x: a, start }, &[a]))
    }

    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.shape(a);
        if start + len > n || len == 0 {
            return shape_err(format!("rows {start}..{} of a {n}-row matrix", start + len));
        }
        let data = self.value(a).as_slice()[start * c..(start + len) * c].to_vec();
        let v = Matrix::from_vec(len, c, data)?;
        Ok(self.push(v, Op::Rows { x: a, start }, &[a]))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return shape_err(format!("concat_rows {sa:?} and {sb:?}"));
        }
        let mut data = self.value(a).as_slice().to_vec();
        data.extend_from_slice(self.value(b).as_slice());
        let v = Matrix::from_vec(sa.0 + sb.0, sa.1, data)?;
        Ok(self.push(v, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Row `i` becomes rows `i·times .. i·times + times`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let v = repeat_rows(self.value(a), times);
        self.push(v, Op::RepeatRows(a, times), &[a])
    }

    /// Per row `i`: `Aᵀ diag(s_i) A`, flattened to d² columns.
    pub fn diag_sandwich(&mut self, a: Var, s: Var) -> Result<Var> {
        let ((p, d), (n, ps)) = (self.shape(a), self.shape(s));
        if p != ps {
            return shape_err(format!("diag_sandwich A{:?} with s{:?}", (p, d), (n, ps)));
        }
        let av = self.value(a);
        let sv = self.value(s);
        let mut out = Matrix::zeros(n, d * d);
        for i in 0..n {
            let srow = sv.row(i);
            let orow = out.row_mut(i);
            for (m, &w) in srow.iter().enumerate() {
                let am = av.row(m);
                for j in 0..d {
                    let wj = w * am[j];
                    for k in j..d {
                        orow[j * d + k] += wj * am[k];
                    }
                }
            }
            for j in 0..d {
                for k in 0..j {
                    orow[j * d + k] = orow[k * d + j];
                }
            }
        }
        Ok(self.push(out, Op::DiagSandwich { a, s }, &[a, s]))
    }

    /// Rows of length d become flattened d×d diagonal matrices.
    pub fn diag_embed(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, d) = av.shape();
        let mut out = Matrix::zeros(n, d * d);
        for i in 0..n {
            for j in 0..d {
                out[(i, j * d + j)] = av[(i, j)];
            }
        }
        self.push(out, Op::DiagEmbed(a), &[a])
    }

    /// Per-row symmetric eigendecomposition of flattened d×d blocks.
    ///
    /// Each output row is `[λ₁..λ_d, U]` with eigenvalues descending and `U`
    /// (eigenvectors as columns) flattened row-major. The input is symmetrized
    /// before decomposition, so the op is a function of the symmetric part.
    pub fn sym_eig(&mut self, m: Var, d: usize) -> Result<Var> {
        let (n, c) = self.shape(m);
        if c != d * d {
            return shape_err(format!("sym_eig expects {} columns, got {c}", d * d));
        }
        let mv = self.value(m);
        let mut out = Matrix::zeros(n, d + d * d);
        for i in 0..n {
            let mut block = Matrix::from_vec(d, d, mv.row(i).to_vec())?;
            if !block.is_finite() {
                return Err(crate::error::Error::Numerical("non-finite matrix in eigendecomposition".into()));
            }
            symmetrize(&mut block);
            let e = sym_eig(&block)?;
            let orow = out.row_mut(i);
            orow[..d].copy_from_slice(&e.eigenvalues);
            orow[d..].copy_from_slice(e.eigenvectors.as_slice());
        }
        Ok(self.push(out, Op::SymEig { m, d }, &[m]))
    }

    /// Rebuilds `U diag(σ̃) Uᵀ` keeping the `keep` largest eigenvalues and
    /// zeroing the rest. Input rows come from [`Tape::sym_eig`].
    pub fn eig_synthesize(&mut self, eig: Var, d: usize, keep: usize) -> Result<Var> {
        let (n, c) = self.shape(eig);
        if c != d + d * d || keep > d {
            return shape_err(format!("eig_synthesize expects {} columns and keep ≤ {d}", d + d * d));
        }
        let ev = self.value(eig);
        let mut out = Matrix::zeros(n, d * d);
        for i in 0..n {
            let row = ev.row(i);
            let (lam, u) = row.split_at(d);
            let orow = out.row_mut(i);
            for r in 0..d {
                for cc in r..d {
                    let v: f64 = (0..keep).map(|k| u[r * d + k] * lam[k] * u[cc * d + k]).sum();
                    orow[r * d + cc] = v;
                    orow[cc * d + r] = v;
                }
            }
        }
        Ok(self.push(out, Op::EigSynth { eig, d, keep }, &[eig]))
    }

    /// Per row: `M_i · v_i` with `M_i` a flattened d×d block.
    pub fn batched_matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let ((n, c), (nv, d)) = (self.shape(m), self.shape(v));
        if n != nv || c != d * d {
            return shape_err(format!("batched_matvec M{:?} v{:?}", (n, c), (nv, d)));
        }
        let (mv, vv) = (self.value(m), self.value(v));
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            let (mrow, vrow) = (mv.row(i), vv.row(i));
            for r in 0..d {
                out[(i, r)] = (0..d).map(|k| mrow[r * d + k] * vrow[k]).sum();
            }
        }
        Ok(self.push(out, Op::BatchedMatVec { m, v }, &[m, v]))
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Every parameter leaf on the tape gets an entry; parameters the root does
    /// not depend on get zero adjoints. A parameter registered several times
    /// has its adjoints summed.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return domain_err("tape already differentiated; reset it before reuse");
        }
        if self.shape(root) != (1, 1) {
            return domain_err(format!("backward root must be scalar, got {:?}", self.shape(root)));
        }
        self.consumed = true;
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                adj[idx] = Some(g);
                continue;
            }
            for (parent, contribution) in self.local_backward(idx, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut adj[parent.0] {
                    Some(acc) => acc.axpy(1.0, &contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        let mut map: BTreeMap<ParamId, Matrix> = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(id) = node.param {
                let (r, c) = node.value.shape();
                let g = adj[idx].take().unwrap_or_else(|| Matrix::zeros(r, c));
                match map.get_mut(&id) {
                    Some(acc) => acc.axpy(1.0, &g),
                    None => {
                        map.insert(id, g);
                    }
                }
            }
        }
        Ok(Gradients { map })
    }

    /// Adjoint contributions of node `idx` to its parents. Only parents that
    /// require gradients are computed.
    fn local_backward(&self, idx: usize, g: &Matrix) -> Vec<(Var, Matrix)> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if need(*a) {
                    out.push((*a, matmul_nt(g, val(*b))));
                }
                if need(*b) {
                    out.push((*b, matmul_tn(val(*a), g)));
                }
            }
            Op::Affine { x, w, b } => {
                if need(*x) {
                    out.push((*x, matmul_nt(g, val(*w))));
                }
                if need(*w) {
                    out.push((*w, matmul_tn(val(*x), g)));
                }
                if need(*b) {
                    out.push((*b, column_sums(g)));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.scale(-1.0)));
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    out.push((*a, hadamard(g, val(*b))));
                }
                if need(*b) {
                    out.push((*b, hadamard(g, val(*a))));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.scale(*s))),
            Op::MulConst(a, c) => out.push((*a, hadamard(g, c))),
            Op::Relu(a) => {
                let x = val(*a);
                out.push((*a, zip(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })));
            }
            Op::LeakyRelu(a, alpha) => {
                let x = val(*a);
                out.push((*a, zip(g, x, |gv, xv| if xv > 0.0 { gv } else { alpha * gv })));
            }
            Op::Exp(a) => out.push((*a, hadamard(g, &node.value))),
            Op::Softplus(a) => {
                let x = val(*a);
                out.push((*a, zip(g, x, |gv, xv| gv * sigmoid(xv))));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (n, c) = g.shape();
                let gam = val(*gamma).as_slice();
                if need(*gamma) {
                    out.push((*gamma, column_sums(&hadamard(g, xhat))));
                }
                if need(*beta) {
                    out.push((*beta, column_sums(g)));
                }
                if need(*x) {
                    let mut dx = Matrix::zeros(n, c);
                    if *train {
                        let mut sum_d = vec![0.0; c];
                        let mut sum_dx = vec![0.0; c];
                        for r in 0..n {
                            for j in 0..c {
                                let dh = g[(r, j)] * gam[j];
                                sum_d[j] += dh;
                                sum_dx[j] += dh * xhat[(r, j)];
                            }
                        }
                        let nf = n as f64;
                        for r in 0..n {
                            for j in 0..c {
                                let dh = g[(r, j)] * gam[j];
                                dx[(r, j)] = inv_std[j] / nf * (nf * dh - sum_d[j] - xhat[(r, j)] * sum_dx[j]);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for j in 0..c {
                                dx[(r, j)] = g[(r, j)] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::RowNorms(a) => {
                let x = val(*a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = node.value[(r, 0)];
                    if n > 0.0 {
                        let s = g[(r, 0)] / n;
                        for (o, xv) in dx.row_mut(r).iter_mut().zip(x.row(r)) {
                            *o = s * xv;
                        }
                    }
                }
                out.push((*a, dx));
            }
            Op::RowSqNorms(a) => {
                let x = val(*a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let s = 2.0 * g[(r, 0)];
                    for (o, xv) in dx.row_mut(r).iter_mut().zip(x.row(r)) {
                        *o = s * xv;
                    }
                }
                out.push((*a, dx));
            }
            Op::RowNormalize(a) => {
                let x = val(*a);
                let y = &node.value;
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = crate::linalg::l2_norm(x.row(r));
                    if n > 0.0 {
                        let yg: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = (gv - yv * yg) / n;
                        }
                    }
                }
                out.push((*a, dx));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                out.push((*a, Matrix::filled(r, c, g[(0, 0)] / (r * c) as f64)));
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                out.push((*a, Matrix::filled(r, c, g[(0, 0)])));
            }
            Op::Cols { x, start } => {
                let (n, c) = val(*x).shape();
                let mut dx = Matrix::zeros(n, c);
                let len = g.cols();
                for r in 0..n {
                    dx.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                }
                out.push((*x, dx));
            }
            Op::Rows { x, start } => {
                let (n, c) = val(*x).shape();
                let mut dx = Matrix::zeros(n, c);
                dx.as_mut_slice()[start * c..start * c + g.len()].copy_from_slice(g.as_slice());
                out.push((*x, dx));
            }
            Op::ConcatRows(a, b) => {
                let (na, c) = val(*a).shape();
                let split = na * c;
                let (ga, gb) = g.as_slice().split_at(split);
                out.push((*a, Matrix::from_vec(na, c, ga.to_vec()).expect("shape")));
                out.push((*b, Matrix::from_vec(g.rows() - na, c, gb.to_vec()).expect("shape")));
            }
            Op::RepeatRows(a, times) => {
                let (n, c) = val(*a).shape();
                let mut dx = Matrix::zeros(n, c);
                for r in 0..n {
                    for t in 0..*times {
                        for (o, gv) in dx.row_mut(r).iter_mut().zip(g.row(r * times + t)) {
                            *o += gv;
                        }
                    }
                }
                out.push((*a, dx));
            }
            Op::DiagSandwich { a, s } => {
                let (av, sv) = (val(*a), val(*s));
                let (p, d) = av.shape();
                let n = sv.rows();
                if need(*s) {
                    let mut ds = Matrix::zeros(n, p);
                    for i in 0..n {
                        let gi = g.row(i);
                        for m in 0..p {
                            let am = av.row(m);
                            let mut acc = 0.0;
                            for j in 0..d {
                                for k in 0..d {
                                    acc += am[j] * gi[j * d + k] * am[k];
                                }
                            }
                            ds[(i, m)] = acc;
                        }
                    }
                    out.push((*s, ds));
                }
                if need(*a) {
                    let mut da = Matrix::zeros(p, d);
                    // symmetrized adjoint blocks, reused across m
                    let gs: Vec<Vec<f64>> = (0..n)
                        .map(|i| {
                            let gi = g.row(i);
                            let mut b = vec![0.0; d * d];
                            for j in 0..d {
                                for k in 0..d {
                                    b[j * d + k] = gi[j * d + k] + gi[k * d + j];
                                }
                            }
                            b
                        })
                        .collect();
                    for m in 0..p {
                        let am = av.row(m).to_vec();
                        let dam = da.row_mut(m);
                        for (i, gb) in gs.iter().enumerate() {
                            let w = sv[(i, m)];
                            if w == 0.0 {
                                continue;
                            }
                            for j in 0..d {
                                let v: f64 = (0..d).map(|k| gb[j * d + k] * am[k]).sum();
                                dam[j] += w * v;
                            }
                        }
                    }
                    out.push((*a, da));
                }
            }
            Op::DiagEmbed(a) => {
                let (n, d) = val(*a).shape();
                let mut dx = Matrix::zeros(n, d);
                for i in 0..n {
                    for j in 0..d {
                        dx[(i, j)] = g[(i, j * d + j)];
                    }
                }
                out.push((*a, dx));
            }
            Op::SymEig { m, d } => {
                let d = *d;
                let n = g.rows();
                let mut dm = Matrix::zeros(n, d * d);
                for i in 0..n {
                    let row = node.value.row(i);
                    let (lam, u) = row.split_at(d);
                    let grow = g.row(i);
                    let (glam, gu) = grow.split_at(d);
                    // inner = diag(λ̄) + F ∘ (Uᵀ Ū)
                    let mut inner = vec![0.0; d * d];
                    for a in 0..d {
                        for b in 0..d {
                            if a == b {
                                inner[a * d + b] = glam[a];
                                continue;
                            }
                            let utu: f64 = (0..d).map(|r| u[r * d + a] * gu[r * d + b]).sum();
                            inner[a * d + b] = utu / clamp_gap(lam[b] - lam[a]);
                        }
                    }
                    // U · inner · Uᵀ, symmetrized
                    let mut tmp = vec![0.0; d * d];
                    for r in 0..d {
                        for b in 0..d {
                            tmp[r * d + b] = (0..d).map(|a| u[r * d + a] * inner[a * d + b]).sum();
                        }
                    }
                    let out_row = dm.row_mut(i);
                    for r in 0..d {
                        for c in 0..d {
                            out_row[r * d + c] = (0..d).map(|b| tmp[r * d + b] * u[c * d + b]).sum();
                        }
                    }
                    for r in 0..d {
                        for c in r + 1..d {
                            let avg = 0.5 * (out_row[r * d + c] + out_row[c * d + r]);
                            out_row[r * d + c] = avg;
                            out_row[c * d + r] = avg;
                        }
                    }
                }
                out.push((*m, dm));
            }
            Op::EigSynth { eig, d, keep } => {
                let (d, keep) = (*d, *keep);
                let ev = val(*eig);
                let n = g.rows();
                let mut de = Matrix::zeros(n, d + d * d);
                for i in 0..n {
                    let row = ev.row(i);
                    let (lam, u) = row.split_at(d);
                    let gi = g.row(i);
                    let drow = de.row_mut(i);
                    for k in 0..keep {
                        let uk: Vec<f64> = (0..d).map(|r| u[r * d + k]).collect();
                        // G u_k and Gᵀ u_k
                        let mut gu = vec![0.0; d];
                        let mut gtu = vec![0.0; d];
                        for r in 0..d {
                            for c in 0..d {
                                gu[r] += gi[r * d + c] * uk[c];
                                gtu[r] += gi[c * d + r] * uk[c];
                            }
                        }
                        drow[k] = uk.iter().zip(&gu).map(|(a, b)| a * b).sum();
                        for r in 0..d {
                            drow[d + r * d + k] = lam[k] * (gu[r] + gtu[r]);
                        }
                    }
                }
                out.push((*eig, de));
            }
            Op::BatchedMatVec { m, v } => {
                let (mv, vv) = (val(*m), val(*v));
                let (n, d) = vv.shape();
                if need(*m) {
                    let mut dm = Matrix::zeros(n, d * d);
                    for i in 0..n {
                        for r in 0..d {
                            for k in 0..d {
                                dm[(i, r * d + k)] = g[(i, r)] * vv[(i, k)];
                            }
                        }
                    }
                    out.push((*m, dm));
                }
                if need(*v) {
                    let mut dv = Matrix::zeros(n, d);
                    for i in 0..n {
                        for k in 0..d {
                            dv[(i, k)] = (0..d).map(|r| mv[(i, r * d + k)] * g[(i, r)]).sum();
                        }
                    }
                    out.push((*v, dv));
                }
            }
        }
        out
    }
}

pub(crate) fn repeat_rows(a: &Matrix, times: usize) -> Matrix {
    let (n, c) = a.shape();
    let mut data = Vec::with_capacity(n * times * c);
    for r in 0..n {
        for _ in 0..times {
            data.extend_from_slice(a.row(r));
        }
    }
    Matrix::from_vec(n * times, c, data).expect("repeat shape")
}

fn symmetrize(m: &mut Matrix) {
    let d = m.rows();
    for r in 0..d {
        for c in r + 1..d {
            let avg = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = avg;
            m[(c, r)] = avg;
        }
    }
}

fn clamp_gap(gap: f64) -> f64 {
    if gap >= 0.0 {
        gap.max(EIG_GAP_CLAMP)
    } else {
        gap.min(-EIG_GAP_CLAMP)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut s = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in s.as_mut_slice().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    s
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    zip(a, b, |x, y| x * y)
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    a.zip_map(b, f).expect("adjoint shape")
}
