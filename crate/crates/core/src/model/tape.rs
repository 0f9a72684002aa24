//! A small reverse-mode differentiation tape over dense matrices.
//!
//! Every operation appends a node holding its value and whatever it needs
//! for the backward pass. Leaves are either trainable parameters or
//! constants; gradients only flow into nodes that depend on a trainable
//! leaf.

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Pre-normalization norms below this map to the first basis direction.
pub const NORM_GUARD: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddTiled(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        block: usize,
        counts: Vec<usize>,
        /// Softmax weights per (block, head), `block x count`.
        probs: Vec<Matrix>,
    },
    GatherRows(Var, Vec<usize>),
    BlockMean {
        x: Var,
        block: usize,
        counts: Vec<usize>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    /// A scalar whose partial derivatives w.r.t. its inputs were computed
    /// during the forward pass.
    Scalar(Vec<(Var, Matrix)>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// `None` when the node does not influence the loss through any
    /// trainable path.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the right shape.
    pub fn get_or_zeros(&self, v: Var) -> Matrix {
        self.grads[v.0].clone().unwrap_or_else(|| {
            let (r, c) = self.shapes[v.0];
            Matrix::zeros(r, c)
        })
    }
}

fn check(cond: bool, what: impl FnOnce() -> (String, String)) -> Result<()> {
    if cond {
        Ok(())
    } else {
        let (e, a) = what();
        Err(Error::shape(e, a))
    }
}

fn shape_str(m: &Matrix) -> String {
    format!("{}x{}", m.rows(), m.cols())
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value on tape");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose trainability is decided by the caller.
    pub fn leaf(&mut self, value: Matrix, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    /// Copies `v` into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check(bv.rows() == 1 && bv.cols() == av.cols(), || {
            (format!("1x{}", av.cols()), shape_str(bv))
        })?;
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(bv.as_slice()) {
                *x += y;
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::AddRow(a, b), ng))
    }

    /// Adds row `r % tile.rows()` of `tile` to row `r` of `a`.
    pub fn add_tiled(&mut self, a: Var, tile: Var) -> Result<Var> {
        let (av, tv) = (self.value(a), self.value(tile));
        check(
            tv.cols() == av.cols() && tv.rows() > 0 && av.rows() % tv.rows() == 0,
            || (format!("tile of width {} dividing {} rows", av.cols(), av.rows()), shape_str(tv)),
        )?;
        let mut value = av.clone();
        let p = tv.rows();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(tv.row(r % p)) {
                *x += y;
            }
        }
        let ng = self.needs(a) || self.needs(tile);
        Ok(self.push(value, Op::AddTiled(a, tile), ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let ng = self.needs(x);
        self.push(value, Op::Gelu(x), ng)
    }

    /// Per-row layer normalization with affine `gamma`, `beta` (each `1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let n = xv.cols();
        check(g.shape() == (1, n) && b.shape() == (1, n), || {
            (format!("1x{n} gain and bias"), format!("{} and {}", shape_str(g), shape_str(b)))
        })?;
        let mut xhat = Matrix::zeros(xv.rows(), n);
        let mut value = Matrix::zeros(xv.rows(), n);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (o, v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            let out = value.row_mut(r);
            for c in 0..n {
                out[c] = xhat.get(r, c) * g.as_slice()[c] + b.as_slice()[c];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product self-attention over independent blocks
    /// of `block` consecutive rows. In block `b` only the first `counts[b]`
    /// rows act as keys and values; later positions are masked out.
    pub fn block_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        block: usize,
        counts: &[usize],
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, dm) = qv.shape();
        check(kv.shape() == (n, dm) && vv.shape() == (n, dm), || {
            (format!("{n}x{dm} keys and values"), format!("{} and {}", shape_str(kv), shape_str(vv)))
        })?;
        check(heads > 0 && dm % heads == 0, || (format!("heads dividing {dm}"), format!("{heads}")))?;
        check(block > 0 && n == block * counts.len(), || {
            (format!("{} rows", block * counts.len()), format!("{n}"))
        })?;
        if let Some(&bad) = counts.iter().find(|&&c| c == 0 || c > block) {
            return Err(Error::degenerate(format!("block count {bad} outside [1, {block}]")));
        }
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(n, dm);
        let mut probs = Vec::with_capacity(counts.len() * heads);
        for (b, &count) in counts.iter().enumerate() {
            let base = b * block;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut a = Matrix::zeros(block, count);
                for i in 0..block {
                    let qi = &qv.row(base + i)[cols.clone()];
                    let row = a.row_mut(i);
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = dot(qi, &kv.row(base + j)[cols.clone()]) * scale;
                    }
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= sum);
                    let o = &mut out.row_mut(base + i)[cols.clone()];
                    for (j, &w) in a.row(i).iter().enumerate() {
                        for (ov, vv) in o.iter_mut().zip(&vv.row(base + j)[cols.clone()]) {
                            *ov += w * vv;
                        }
                    }
                }
                probs.push(a);
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                block,
                counts: counts.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(Error::shape(format!("row index < {}", xv.rows()), format!("{bad}")));
        }
        let value = xv.select_rows(rows);
        let ng = self.needs(x);
        Ok(self.push(value, Op::GatherRows(x, rows.to_vec()), ng))
    }

    /// Mean of the first `counts[b]` rows of every block of `block` rows.
    pub fn block_mean(&mut self, x: Var, block: usize, counts: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        check(block > 0 && xv.rows() == block * counts.len(), || {
            (format!("{} rows", block * counts.len()), shape_str(xv))
        })?;
        if let Some(&bad) = counts.iter().find(|&&c| c == 0 || c > block) {
            return Err(Error::degenerate(format!("block count {bad} outside [1, {block}]")));
        }
        let mut value = Matrix::zeros(counts.len(), xv.cols());
        for (b, &c) in counts.iter().enumerate() {
            let out = value.row_mut(b);
            for i in 0..c {
                for (o, v) in out.iter_mut().zip(xv.row(b * block + i)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= c as f64);
        }
        let ng = self.needs(x);
        Ok(self.push(
            value,
            Op::BlockMean {
                x,
                block,
                counts: counts.to_vec(),
            },
            ng,
        ))
    }

    /// Scales each row to unit norm. Rows with norm below [`NORM_GUARD`]
    /// become the first standard basis vector and pass no gradient.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = norm(row);
            norms.push(n);
            if n < NORM_GUARD {
                row.iter_mut().for_each(|v| *v = 0.0);
                if let Some(first) = row.first_mut() {
                    *first = 1.0;
                }
            } else {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::NormalizeRows { x, norms }, ng)
    }

    /// Records a scalar `value` with precomputed partials `d value / d input`.
    pub fn scalar(&mut self, value: f64, partials: Vec<(Var, Matrix)>) -> Result<Var> {
        for (v, g) in &partials {
            let shape = self.value(*v).shape();
            check(shape == g.shape(), || (format!("{}x{}", shape.0, shape.1), shape_str(g)))?;
        }
        let ng = partials.iter().any(|(v, _)| self.needs(*v));
        Ok(self.push(Matrix::scalar(value), Op::Scalar(partials), ng))
    }

    /// Reverse pass from the `1 x 1` node `loss`. A tape can be differentiated
    /// once; later calls return [`Error::StaleTape`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        check(self.value(loss).shape() == (1, 1), || {
            ("1x1 loss".to_string(), shape_str(self.value(loss)))
        })?;
        self.consumed = true;

        let shapes: Vec<_> = self.nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Matrix>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            let mut acc = |v: Var, delta: Matrix| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        acc(*a, g.matmul_t(val(*b))?);
                    }
                    if self.nodes[b.0].needs_grad {
                        acc(*b, val(*a).t_matmul(&g)?);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        acc(*a, g.matmul(val(*b))?);
                    }
                    if self.nodes[b.0].needs_grad {
                        acc(*b, g.t_matmul(val(*a))?);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::AddRow(a, b) => {
                    acc(*b, Matrix::row_vector(&g.column_sums()));
                    acc(*a, g.clone());
                }
                Op::AddTiled(a, tile) => {
                    let p = val(*tile).rows();
                    let mut dt = Matrix::zeros(p, g.cols());
                    for r in 0..g.rows() {
                        for (d, x) in dt.row_mut(r % p).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(*tile, dt);
                    acc(*a, g.clone());
                }
                Op::Gelu(x) => {
                    let dx = val(*x).zip(&g, |xv, gv| gelu_grad(xv) * gv);
                    acc(*x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = val(*gamma).as_slice();
                    let n = g.cols();
                    acc(*beta, Matrix::row_vector(&g.column_sums()));
                    let dgamma = xhat.zip(&g, |a, b| a * b).column_sums();
                    acc(*gamma, Matrix::row_vector(&dgamma));
                    let mut dx = Matrix::zeros(g.rows(), n);
                    for r in 0..g.rows() {
                        let dxhat: Vec<f64> = g.row(r).iter().zip(gv).map(|(a, b)| a * b).collect();
                        let xh = xhat.row(r);
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dot(&dxhat, xh) / n as f64;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    acc(*x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    block,
                    counts,
                    probs,
                } => {
                    let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                    let (n, dm) = qv.shape();
                    let dh = dm / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Matrix::zeros(n, dm);
                    let mut dk = Matrix::zeros(n, dm);
                    let mut dv = Matrix::zeros(n, dm);
                    for (b, &count) in counts.iter().enumerate() {
                        let base = b * block;
                        for h in 0..*heads {
                            let cols = h * dh..(h + 1) * dh;
                            let a = &probs[b * heads + h];
                            for i in 0..*block {
                                let go = &g.row(base + i)[cols.clone()];
                                let ai = a.row(i);
                                // dA_ij = dO_i . V_j ; dS = A * (dA - sum(dA * A))
                                let da: Vec<f64> = (0..count)
                                    .map(|j| dot(go, &vv.row(base + j)[cols.clone()]))
                                    .collect();
                                let inner = dot(&da, ai);
                                for j in 0..count {
                                    let w = ai[j];
                                    for (d, x) in
                                        dv.row_mut(base + j)[cols.clone()].iter_mut().zip(go)
                                    {
                                        *d += w * x;
                                    }
                                    let ds = w * (da[j] - inner) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    for (d, x) in dq.row_mut(base + i)[cols.clone()]
                                        .iter_mut()
                                        .zip(&kv.row(base + j)[cols.clone()])
                                    {
                                        *d += ds * x;
                                    }
                                    for (d, x) in dk.row_mut(base + j)[cols.clone()]
                                        .iter_mut()
                                        .zip(&qv.row(base + i)[cols.clone()])
                                    {
                                        *d += ds * x;
                                    }
                                }
                            }
                        }
                    }
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::GatherRows(x, rows) => {
                    let (r0, c0) = val(*x).shape();
                    let mut dx = Matrix::zeros(r0, c0);
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, s) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                    acc(*x, dx);
                }
                Op::BlockMean { x, block, counts } => {
                    let (r0, c0) = val(*x).shape();
                    let mut dx = Matrix::zeros(r0, c0);
                    for (b, &c) in counts.iter().enumerate() {
                        let inv = 1.0 / c as f64;
                        for i in 0..c {
                            for (d, s) in dx.row_mut(b * block + i).iter_mut().zip(g.row(b)) {
                                *d += s * inv;
                            }
                        }
                    }
                    acc(*x, dx);
                }
                Op::NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        if norms[r] < NORM_GUARD {
                            continue;
                        }
                        let (yr, gr) = (y.row(r), g.row(r));
                        let proj = dot(yr, gr);
                        for ((d, yv), gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d = (gv - yv * proj) / norms[r];
                        }
                    }
                    acc(*x, dx);
                }
                Op::Scalar(partials) => {
                    let s = g.get(0, 0);
                    for (v, p) in partials {
                        acc(*v, p.scale(s));
                    }
                }
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients { grads, shapes })
    }
}

impl Matrix {
    pub(crate) fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols()];
        for row in self.row_iter() {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }
}
