//! Minimal reverse-mode differentiation over row-major matrices.
//!
//! The op set is exactly what the sequential transformer needs. Attention,
//! layer norm and the tied-embedding cross entropy are fused ops with
//! hand-written adjoints.

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix shape mismatch");
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `a (n x k) * b (k x m)`
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                axpy(av, b.row(k), orow);
            }
        }
    }
    out
}

/// `a (n x m) * b^T` where `b` is `k x m`.
fn matmul_bt(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.cols);
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for k in 0..b.rows {
            out.data[i * b.rows + k] = dot(a.row(i), b.row(k));
        }
    }
    out
}

/// `a^T (k x n) * b (n x m)` where `a` is `n x k`.
fn matmul_at(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows, b.rows);
    let mut out = Matrix::zeros(a.cols, b.cols);
    for n in 0..a.rows {
        let brow = b.row(n);
        for (k, &av) in a.row(n).iter().enumerate() {
            if av != 0.0 {
                axpy(av, brow, &mut out.data[k * b.cols..(k + 1) * b.cols]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Gather { table: Var, ids: Vec<u32>, skip_zero: bool },
    MatMul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    /// Elementwise product with a constant (row masks, dropout masks).
    MulConst { x: Var, mask: Vec<f64> },
    Relu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention(Box<AttentionCache>),
    TiedCrossEntropy { hidden: Var, table: Var, targets: Vec<u32>, probs: Vec<f64> },
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    shape: AttentionShape,
    /// Softmax probabilities, `[batch][head][query][key]`, zero where masked.
    probs: Vec<f64>,
    /// Dropout multipliers over `probs`, if dropout was applied.
    drop: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionShape {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
}

struct Node {
    value: Matrix,
    op: Op,
}

pub const LN_EPS: f64 = 1e-8;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Row lookup. With `skip_zero`, id 0 receives no gradient.
    pub fn gather(&mut self, table: Var, ids: Vec<u32>, skip_zero: bool) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        self.push(out, Op::Gather { table, ids, skip_zero })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul { a, b })
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows, 1);
        let mut out = self.value(x).clone();
        for r in 0..out.rows {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias { x, bias })
    }

    /// `x * w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        self.push(out, Op::Scale { x, factor })
    }

    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(mask.len(), out.data.len());
        out.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        self.push(out, Op::MulConst { x, mask })
    }

    /// Multiplies row `r` by `factors[r]`.
    pub fn scale_rows(&mut self, x: Var, factors: &[f64]) -> Var {
        let cols = self.value(x).cols;
        let mask = factors.iter().flat_map(|f| std::iter::repeat_n(*f, cols)).collect();
        self.mul_const(x, mask)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let (rows, cols) = (xv.rows, xv.cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Multi-head scaled dot-product attention with a causal mask and a key
    /// padding mask. Query rows with no admissible key produce zeros.
    /// `drop` is an optional dropout multiplier per attention probability.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        key_valid: &[bool],
        mut drop: impl FnMut() -> Option<f64>,
    ) -> Var {
        let AttentionShape { batch, len, heads } = shape;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(batch * len, d);
        let mut probs = vec![0.0; batch * heads * len * len];
        let mut drops: Option<Vec<f64>> = None;
        let mut scores = vec![0.0; len];
        for b in 0..batch {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..len {
                    let qi = &qv.row(b * len + i)[cols.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        if key_valid[b * len + j] {
                            scores[j] = dot(qi, &kv.row(b * len + j)[cols.clone()]) * scale;
                            max = max.max(scores[j]);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let base = ((b * heads + h) * len + i) * len;
                    let mut z = 0.0;
                    for j in 0..=i {
                        if key_valid[b * len + j] {
                            let e = (scores[j] - max).exp();
                            probs[base + j] = e;
                            z += e;
                        }
                    }
                    let orow = &mut out.data[(b * len + i) * d..(b * len + i + 1) * d];
                    for j in 0..=i {
                        if !key_valid[b * len + j] {
                            continue;
                        }
                        probs[base + j] /= z;
                        let mut p = probs[base + j];
                        if let Some(m) = drop() {
                            drops.get_or_insert_with(|| vec![1.0; batch * heads * len * len])[base + j] = m;
                            p *= m;
                        }
                        axpy(p, &vv.row(b * len + j)[cols.clone()], &mut orow[cols.clone()]);
                    }
                }
            }
        }
        self.push(out, Op::Attention(Box::new(AttentionCache { q, k, v, shape, probs, drop: drops })))
    }

    /// Per-row cross entropy of `hidden * table[1..]^T` against `targets`
    /// (item indices, 0 = masked). Returns an `n x 1` loss column.
    pub fn tied_cross_entropy(&mut self, hidden: Var, table: Var, targets: Vec<u32>) -> Var {
        let (h, w) = (self.value(hidden), self.value(table));
        let n_items = w.rows - 1;
        let mut probs = vec![0.0; h.rows * n_items];
        let mut out = Matrix::zeros(h.rows, 1);
        for (r, &t) in targets.iter().enumerate() {
            if t == 0 {
                continue;
            }
            let hr = h.row(r);
            let p = &mut probs[r * n_items..(r + 1) * n_items];
            for (c, pc) in p.iter_mut().enumerate() {
                *pc = dot(hr, w.row(c + 1));
            }
            let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let target_logit = p[t as usize - 1];
            let mut z = 0.0;
            for pc in p.iter_mut() {
                *pc = (*pc - max).exp();
                z += *pc;
            }
            p.iter_mut().for_each(|pc| *pc /= z);
            out.data[r] = z.ln() + max - target_logit;
        }
        self.push(out, Op::TiedCrossEntropy { hidden, table, targets, probs })
    }

    /// Back-propagates `seed` (same shape as `output`) and returns the
    /// gradient of every requested variable.
    pub fn backward(&self, output: Var, seed: Matrix, wrt: &[Var]) -> Vec<Matrix> {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        wrt.iter()
            .map(|v| {
                grads[v.0].clone().unwrap_or_else(|| {
                    let val = self.value(*v);
                    Matrix::zeros(val.rows, val.cols)
                })
            })
            .collect()
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let acc = |v: Var, delta: Matrix, grads: &mut [Option<Matrix>]| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Gather { table, ids, skip_zero } => {
                let t = self.value(*table);
                let mut d = Matrix::zeros(t.rows, t.cols);
                for (r, &id) in ids.iter().enumerate() {
                    if *skip_zero && id == 0 {
                        continue;
                    }
                    axpy(1.0, g.row(r), d.row_mut(id as usize));
                }
                acc(*table, d, grads);
            }
            Op::MatMul { a, b } => {
                let da = matmul_bt(g, self.value(*b));
                let db = matmul_at(self.value(*a), g);
                acc(*a, da, grads);
                acc(*b, db, grads);
            }
            Op::AddBias { x, bias } => {
                let mut db = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    axpy(1.0, g.row(r), &mut db.data);
                }
                acc(*x, g.clone(), grads);
                acc(*bias, db, grads);
            }
            Op::Add { a, b } => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Scale { x, factor } => {
                let mut d = g.clone();
                d.data.iter_mut().for_each(|v| *v *= factor);
                acc(*x, d, grads);
            }
            Op::MulConst { x, mask } => {
                let mut d = g.clone();
                d.data.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                acc(*x, d, grads);
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let mut d = g.clone();
                d.data.iter_mut().zip(&xv.data).for_each(|(v, xi)| {
                    if *xi <= 0.0 {
                        *v = 0.0
                    }
                });
                acc(*x, d, grads);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = self.value(*gamma);
                let (rows, cols) = (g.rows, g.cols);
                let mut dx = Matrix::zeros(rows, cols);
                let mut dg = Matrix::zeros(1, cols);
                let mut db = Matrix::zeros(1, cols);
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    let xh = &xhat[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        dg.data[c] += gr[c] * xh[c];
                        db.data[c] += gr[c];
                        dxhat[c] = gr[c] * gam.data[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dx = dot(&dxhat, xh) / cols as f64;
                    let out = dx.row_mut(r);
                    for c in 0..cols {
                        out[c] = inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                    }
                }
                acc(*x, dx, grads);
                acc(*gamma, dg, grads);
                acc(*beta, db, grads);
            }
            Op::Attention(cache) => {
                let AttentionCache { q, k, v, shape, probs, drop } = cache.as_ref();
                let AttentionShape { batch, len, heads } = *shape;
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(qv.rows, d);
                let mut dk = Matrix::zeros(kv.rows, d);
                let mut dv = Matrix::zeros(vv.rows, d);
                let mut dp = vec![0.0; len];
                for b in 0..batch {
                    for h in 0..heads {
                        let cols = h * dh..(h + 1) * dh;
                        for i in 0..len {
                            let base = ((b * heads + h) * len + i) * len;
                            let p = &probs[base..base + len];
                            if p[..=i].iter().all(|x| *x == 0.0) {
                                continue;
                            }
                            let gi = &g.row(b * len + i)[cols.clone()];
                            let mut weighted = 0.0;
                            for j in 0..=i {
                                if p[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let m = drop.as_ref().map_or(1.0, |dm| dm[base + j]);
                                axpy(p[j] * m, gi, &mut dv.row_mut(b * len + j)[cols.clone()]);
                                dp[j] = dot(gi, &vv.row(b * len + j)[cols.clone()]) * m;
                                weighted += p[j] * dp[j];
                            }
                            for j in 0..=i {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - weighted) * scale;
                                let kj = &kv.row(b * len + j)[cols.clone()];
                                axpy(ds, kj, &mut dq.row_mut(b * len + i)[cols.clone()]);
                                let qi = &qv.row(b * len + i)[cols.clone()];
                                axpy(ds, qi, &mut dk.row_mut(b * len + j)[cols.clone()]);
                            }
                        }
                    }
                }
                acc(*q, dq, grads);
                acc(*k, dk, grads);
                acc(*v, dv, grads);
            }
            Op::TiedCrossEntropy { hidden, table, targets, probs } => {
                let (h, w) = (self.value(*hidden), self.value(*table));
                let n_items = w.rows - 1;
                let mut dh = Matrix::zeros(h.rows, h.cols);
                let mut dw = Matrix::zeros(w.rows, w.cols);
                let mut dz = vec![0.0; n_items];
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g.data[r];
                    if t == 0 || gr == 0.0 {
                        continue;
                    }
                    let p = &probs[r * n_items..(r + 1) * n_items];
                    for c in 0..n_items {
                        dz[c] = gr * p[c];
                    }
                    dz[t as usize - 1] -= gr;
                    let hr = h.row(r);
                    let dhr = &mut dh.data[r * h.cols..(r + 1) * h.cols];
                    for (c, &z) in dz.iter().enumerate() {
                        axpy(z, w.row(c + 1), dhr);
                        axpy(z, hr, dw.row_mut(c + 1));
                    }
                }
                acc(*hidden, dh, grads);
                acc(*table, dw, grads);
            }
        }
    }
}
