//! Minimal dense-tensor arithmetic with reverse-mode automatic
//! differentiation.
//!
//! Design constraints, in order: gradient-check fidelity, bitwise
//! determinism, then speed. Everything is `f64`. A [`Graph`] is an eager
//! Wengert tape: each operation appends one node holding its forward value, so
//! node ids are already topologically ordered and [`Graph::backward`] is a
//! single reverse sweep that visits each node exactly once. Gradients
//! accumulate (never overwrite) so a value used twice receives the sum of
//! both downstream contributions. All reductions run left-to-right in index
//! order, which makes results bit-reproducible for identical inputs.
//!
//! The op set is the minimum needed to express a small pre-LN transformer
//! encoder and the alignment losses: elementwise arithmetic, matrix products,
//! row softmax, row layer-norm, embedding-row gather, a fused multi-head
//! attention (one node per batch instead of thousands — same math, checked
//! against finite differences like every other op), slicing/pooling, and
//! scalar reductions.

pub mod gradcheck;

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

// ─────────────────────────────── Tensor ────────────────────────────────

/// A plain dense value: row-major `f64` data plus an optional gradient
/// buffer. Used for parameter storage; computation happens on a [`Graph`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Normal(0, std) initialization from the caller's generator.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) view: 1-D tensors are a single row, scalars are 1×1.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::Shape(format!(
                "expected rank <= 2, got shape {:?}",
                self.shape
            ))),
        }
    }
}

// ─────────────────────────────── Graph ─────────────────────────────────

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    TileRows(Var, usize),
    QuickGelu(Var),
    Sqrt(Var),
    Abs(Var),
    MatMul(Var, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    GatherRows {
        table: Var,
        ids: Vec<u32>,
    },
    /// Fused multi-head attention over a batch of equal-length sequences.
    /// `probs` holds the forward softmax weights, reused by backward.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        valid: Vec<usize>,
        probs: Vec<f64>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    SumAll(Var),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Eager reverse-mode tape. Confine one graph to one thread; tensors and
/// values read out of it are plain data and freely shareable.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>, rg: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
            grad: None,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Gradient of `v` after [`Graph::backward`]; `None` if no gradient
    /// reached it (or it does not require one).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Error if the node's value contains NaN or ±Inf.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.nodes[v.0].value.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite values in {what}")))
        }
    }

    // ── construction ──

    /// Insert a tensor as a leaf. Rank must be ≤ 2.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        Ok(self.push(Op::Leaf, r, c, t.data.clone(), t.requires_grad))
    }

    /// Leaf from raw parts; `requires_grad = false`. Handy for references
    /// that act as constants.
    pub fn constant(&mut self, rows: usize, cols: usize, data: &[f64]) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "constant: {rows}x{cols} wants {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(self.push(Op::Leaf, rows, cols, data.to_vec(), false))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if (ar, ac) != (br, bc) {
            return Err(Error::Shape(format!(
                "{what}: [{ar}x{ac}] vs [{br}x{bc}]"
            )));
        }
        Ok((ar, ac))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), r, c, v, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "sub")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), r, c, v, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "mul")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), r, c, v, rg))
    }

    /// Elementwise quotient. The caller is responsible for nonzero
    /// denominators (the cosine path checks norms first).
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "div")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Div(a, b), r, c, v, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (r, k) = self.shape(a);
        let v = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), r, k, v, rg)
    }

    /// `x[N×D] + row[1×D]`, broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != d {
            return Err(Error::Shape(format!(
                "add_row: x [{n}x{d}] needs row [1x{d}], got [{rr}x{rc}]"
            )));
        }
        let mut v = self.value(x).to_vec();
        let row_v = self.value(row);
        for r in 0..n {
            for j in 0..d {
                v[r * d + j] += row_v[j];
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(Op::AddRow(x, row), n, d, v, rg))
    }

    /// Stack `reps` copies of `x[L×D]` into `[reps·L × D]`.
    pub fn tile_rows(&mut self, x: Var, reps: usize) -> Var {
        let (l, d) = self.shape(x);
        let xv = self.value(x);
        let mut v = Vec::with_capacity(reps * l * d);
        for _ in 0..reps {
            v.extend_from_slice(xv);
        }
        let rg = self.rg(x);
        self.push(Op::TileRows(x, reps), reps * l, d, v, rg)
    }

    /// x · sigmoid(1.702 x) — the smooth GELU approximation used by
    /// CLIP-style encoders.
    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|&x| x * sigmoid(1.702 * x)).collect();
        let rg = self.rg(a);
        self.push(Op::QuickGelu(a), r, c, v, rg)
    }

    /// Elementwise square root. d/dx at exactly 0 is defined as 0
    /// (subgradient convention), so a distance between bit-identical vectors
    /// contributes a zero gradient instead of NaN.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x.sqrt()).collect();
        let rg = self.rg(a);
        self.push(Op::Sqrt(a), r, c, v, rg)
    }

    /// Elementwise absolute value; d/dx at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x.abs()).collect();
        let rg = self.rg(a);
        self.push(Op::Abs(a), r, c, v, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul: [{m}x{ka}] x [{kb}x{n}]"
            )));
        }
        let mut v = vec![0.0; m * n];
        mm(self.value(a), self.value(b), m, ka, n, &mut v);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), m, n, v, rg))
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let out = &mut v[i * c..(i + 1) * c];
            softmax_into(row, out);
        }
        let rg = self.rg(a);
        self.push(Op::SoftmaxRows(a), r, c, v, rg)
    }

    /// Per-row normalization to zero mean / unit variance (denominator D,
    /// epsilon 1e-5 inside the square root) followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        for (v, name) in [(gain, "gain"), (bias, "bias")] {
            let (r, c) = self.shape(v);
            if r != 1 || c != d {
                return Err(Error::Shape(format!(
                    "layer_norm: {name} must be [1x{d}], got [{r}x{c}]"
                )));
            }
        }
        let xv = self.value(x);
        let g = self.value(gain).to_vec();
        let b = self.value(bias).to_vec();
        let mut v = vec![0.0; n * d];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let (mean, inv_sigma) = row_norm_stats(row);
            for j in 0..d {
                v[r * d + j] = g[j] * ((row[j] - mean) * inv_sigma) + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(Op::LayerNorm { x, gain, bias }, n, d, v, rg))
    }

    /// Select rows of `table` by id: output row r is `table[ids[r]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v_rows, d) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| (i as usize) >= v_rows) {
            return Err(Error::Shape(format!(
                "gather_rows: id {bad} out of range for table [{v_rows}x{d}]"
            )));
        }
        let tv = self.value(table);
        let mut v = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            let i = i as usize;
            v.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ids.len(),
            d,
            v,
            rg,
        ))
    }

    /// Fused multi-head attention over a batch of `valid.len()` sequences of
    /// `seq_len` rows each. Keys/values at positions ≥ valid\[b\] are masked
    /// out of every softmax (pad positions contribute exactly zero weight).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        valid: &[usize],
    ) -> Result<Var> {
        let (n, d) = self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let b = valid.len();
        if b * seq_len != n {
            return Err(Error::Shape(format!(
                "attention: {b} sequences x {seq_len} rows != {n} input rows"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        if let Some(&bad) = valid.iter().find(|&&m| m == 0 || m > seq_len) {
            return Err(Error::Shape(format!(
                "attention: valid length {bad} outside 1..={seq_len}"
            )));
        }
        let dh = d / heads;
        let inv_scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut probs = vec![0.0; b * heads * seq_len * seq_len];
        let mut out = vec![0.0; n * d];
        let mut scores = vec![0.0; seq_len];
        for (bi, &m) in valid.iter().enumerate() {
            let base = bi * seq_len;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq_len {
                    let qrow = &qv[(base + i) * d + off..(base + i) * d + off + dh];
                    for (j, s) in scores[..m].iter_mut().enumerate() {
                        let krow = &kv[(base + j) * d + off..(base + j) * d + off + dh];
                        *s = dot(qrow, krow) * inv_scale;
                    }
                    let p_row = {
                        let idx = ((bi * heads + h) * seq_len + i) * seq_len;
                        &mut probs[idx..idx + seq_len]
                    };
                    softmax_into(&scores[..m], &mut p_row[..m]);
                    let orow = base + i;
                    for (j, &p) in p_row[..m].iter().enumerate() {
                        let vrow = &vv[(base + j) * d + off..(base + j) * d + off + dh];
                        for (o, &x) in out[orow * d + off..orow * d + off + dh]
                            .iter_mut()
                            .zip(vrow)
                        {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                valid: valid.to_vec(),
                probs,
            },
            n,
            d,
            out,
            rg,
        ))
    }

    /// Contiguous row slice `x[start .. start+rows]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, rows: usize) -> Result<Var> {
        let (n, d) = self.shape(x);
        if start + rows > n || rows == 0 {
            return Err(Error::Shape(format!(
                "slice_rows: [{start}, {}) out of [{n}x{d}]",
                start + rows
            )));
        }
        let v = self.value(x)[start * d..(start + rows) * d].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Op::SliceRows { x, start }, rows, d, v, rg))
    }

    /// Column-wise mean over all rows: `[N×D] → [1×D]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.shape(x);
        let xv = self.value(x);
        let mut v = vec![0.0; d];
        for r in 0..n {
            for j in 0..d {
                v[j] += xv[r * d + j];
            }
        }
        let inv = 1.0 / n as f64;
        for x in v.iter_mut() {
            *x *= inv;
        }
        let rg = self.rg(x);
        self.push(Op::MeanRows(x), 1, d, v, rg)
    }

    /// Sum of every element, as a 1×1 scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = 0.0;
        for &v in self.value(x) {
            s += v;
        }
        let rg = self.rg(x);
        self.push(Op::SumAll(x), 1, 1, vec![s], rg)
    }

    // ── reverse pass ──

    /// Reverse sweep from a scalar `loss`. Visits each node at most once, in
    /// reverse insertion (= reverse topological) order; leaf gradients end up
    /// holding the sum of every downstream contribution. Calling backward
    /// again without clearing accumulates on top.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (r, c) = self.shape(loss);
        if r * c != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got [{r}x{c}]"
            )));
        }
        if !self.rg(loss) {
            return Ok(()); // nothing on the tape requires gradients
        }
        add_into_grad(&mut self.nodes[loss.0], &[1.0]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            self.propagate(id);
        }
        Ok(())
    }

    /// Push node `id`'s gradient into its inputs. Split borrows by taking the
    /// gradient out of the node first (indices of inputs are always < id).
    fn propagate(&mut self, id: usize) {
        let g = self.nodes[id].grad.take().expect("checked by caller");
        let (rows, cols) = (self.nodes[id].rows, self.nodes[id].cols);
        // Temporarily move the op out so we can borrow other nodes freely.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, &g, |g, _| g.to_vec());
                self.acc(*b, &g, |g, _| g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(*a, &g, |g, _| g.to_vec());
                self.acc(*b, &g, |g, _| g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[b.0].value.clone();
                let av = self.nodes[a.0].value.clone();
                self.acc(*a, &g, |g, _| zip_map(g, &bv, |x, y| x * y));
                self.acc(*b, &g, |g, _| zip_map(g, &av, |x, y| x * y));
            }
            Op::Div(a, b) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                self.acc(*a, &g, |g, _| zip_map(g, &bv, |x, y| x / y));
                self.acc(*b, &g, |g, _| {
                    g.iter()
                        .zip(av.iter().zip(&bv))
                        .map(|(gi, (a, b))| -gi * a / (b * b))
                        .collect()
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(*a, &g, |g, _| g.iter().map(|x| x * c).collect());
            }
            Op::AddRow(x, row) => {
                let d = cols;
                self.acc(*x, &g, |g, _| g.to_vec());
                self.acc(*row, &g, |g, _| {
                    let mut out = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            out[j] += g[r * d + j];
                        }
                    }
                    out
                });
            }
            Op::TileRows(x, reps) => {
                let reps = *reps;
                let l = rows / reps;
                let d = cols;
                self.acc(*x, &g, |g, _| {
                    let mut out = vec![0.0; l * d];
                    for rep in 0..reps {
                        for r in 0..l {
                            for j in 0..d {
                                out[r * d + j] += g[(rep * l + r) * d + j];
                            }
                        }
                    }
                    out
                });
            }
            Op::QuickGelu(a) => {
                let av = self.nodes[a.0].value.clone();
                self.acc(*a, &g, |g, _| {
                    g.iter()
                        .zip(&av)
                        .map(|(gi, &x)| {
                            let s = sigmoid(1.702 * x);
                            gi * (s + x * 1.702 * s * (1.0 - s))
                        })
                        .collect()
                });
            }
            Op::Sqrt(a) => {
                let out = self.nodes[id].value.clone();
                self.acc(*a, &g, |g, _| {
                    g.iter()
                        .zip(&out)
                        .map(|(gi, &y)| if y == 0.0 { 0.0 } else { gi * 0.5 / y })
                        .collect()
                });
            }
            Op::Abs(a) => {
                let av = self.nodes[a.0].value.clone();
                self.acc(*a, &g, |g, _| {
                    g.iter()
                        .zip(&av)
                        .map(|(gi, &x)| gi * signum_zero(x))
                        .collect()
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let n = cols;
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                // dA += G · Bᵀ ; dB += Aᵀ · G
                self.acc(*a, &g, |g, _| {
                    let mut out = vec![0.0; m * k];
                    mm_nt(g, &bv, m, n, k, &mut out);
                    out
                });
                self.acc(*b, &g, |g, _| {
                    let mut out = vec![0.0; k * n];
                    mm_tn(&av, g, m, k, n, &mut out);
                    out
                });
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[id].value.clone();
                let d = cols;
                self.acc(*a, &g, |g, _| {
                    let mut out = vec![0.0; rows * d];
                    for r in 0..rows {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut s = 0.0;
                        for j in 0..d {
                            s += yr[j] * gr[j];
                        }
                        for j in 0..d {
                            out[r * d + j] = yr[j] * (gr[j] - s);
                        }
                    }
                    out
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let d = cols;
                let xv = self.nodes[x.0].value.clone();
                let gv = self.nodes[gain.0].value.clone();
                self.acc(*x, &g, |g, _| {
                    let mut out = vec![0.0; rows * d];
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let (mean, inv_sigma) = row_norm_stats(row);
                        // dxhat_j = g_j * gain_j; dx = (dxhat − mean(dxhat)
                        //   − xhat * mean(dxhat ⊙ xhat)) / sigma
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let xh = (row[j] - mean) * inv_sigma;
                            let dxh = g[r * d + j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xh;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let xh = (row[j] - mean) * inv_sigma;
                            let dxh = g[r * d + j] * gv[j];
                            out[r * d + j] = (dxh - m1 - xh * m2) * inv_sigma;
                        }
                    }
                    out
                });
                self.acc(*gain, &g, |g, _| {
                    let mut out = vec![0.0; d];
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let (mean, inv_sigma) = row_norm_stats(row);
                        for j in 0..d {
                            out[j] += g[r * d + j] * (row[j] - mean) * inv_sigma;
                        }
                    }
                    out
                });
                self.acc(*bias, &g, |g, _| {
                    let mut out = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            out[j] += g[r * d + j];
                        }
                    }
                    out
                });
            }
            Op::GatherRows { table, ids } => {
                let (v_rows, d) = (self.nodes[table.0].rows, self.nodes[table.0].cols);
                let ids = ids.clone();
                self.acc(*table, &g, |g, _| {
                    let mut out = vec![0.0; v_rows * d];
                    for (r, &i) in ids.iter().enumerate() {
                        let i = i as usize;
                        for j in 0..d {
                            out[i * d + j] += g[r * d + j];
                        }
                    }
                    out
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                valid,
                probs,
            } => {
                let d = cols;
                let heads = *heads;
                let seq_len = *seq_len;
                let dh = d / heads;
                let inv_scale = 1.0 / (dh as f64).sqrt();
                let qv = self.nodes[q.0].value.clone();
                let kv = self.nodes[k.0].value.clone();
                let vv = self.nodes[v.0].value.clone();
                let n = rows;
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut dp = vec![0.0; seq_len];
                let mut ds = vec![0.0; seq_len];
                for (bi, &m) in valid.iter().enumerate() {
                    let base = bi * seq_len;
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..seq_len {
                            let p_row = {
                                let idx = ((bi * heads + h) * seq_len + i) * seq_len;
                                &probs[idx..idx + seq_len]
                            };
                            let grow = &g[(base + i) * d + off..(base + i) * d + off + dh];
                            // dV[j] += p_j * dO_i ; dp_j = dO_i · V[j]
                            for j in 0..m {
                                let vrow = &vv[(base + j) * d + off..(base + j) * d + off + dh];
                                dp[j] = dot(grow, vrow);
                                let dvj =
                                    &mut dv[(base + j) * d + off..(base + j) * d + off + dh];
                                for (o, &x) in dvj.iter_mut().zip(grow) {
                                    *o += p_row[j] * x;
                                }
                            }
                            // softmax backward, then dQ/dK through the scores
                            let mut s = 0.0;
                            for j in 0..m {
                                s += p_row[j] * dp[j];
                            }
                            for j in 0..m {
                                ds[j] = p_row[j] * (dp[j] - s) * inv_scale;
                            }
                            let qrow = &qv[(base + i) * d + off..(base + i) * d + off + dh];
                            for j in 0..m {
                                let krow = &kv[(base + j) * d + off..(base + j) * d + off + dh];
                                let dqi =
                                    &mut dq[(base + i) * d + off..(base + i) * d + off + dh];
                                for (o, &x) in dqi.iter_mut().zip(krow) {
                                    *o += ds[j] * x;
                                }
                                let dkj =
                                    &mut dk[(base + j) * d + off..(base + j) * d + off + dh];
                                for (o, &x) in dkj.iter_mut().zip(qrow) {
                                    *o += ds[j] * x;
                                }
                            }
                        }
                    }
                }
                self.acc(*q, &dq, |g, _| g.to_vec());
                self.acc(*k, &dk, |g, _| g.to_vec());
                self.acc(*v, &dv, |g, _| g.to_vec());
            }
            Op::SliceRows { x, start } => {
                let d = cols;
                let (xn, _) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
                let start = *start;
                self.acc(*x, &g, |g, _| {
                    let mut out = vec![0.0; xn * d];
                    out[start * d..start * d + g.len()].copy_from_slice(g);
                    out
                });
            }
            Op::MeanRows(x) => {
                let (xn, d) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
                let inv = 1.0 / xn as f64;
                self.acc(*x, &g, |g, _| {
                    let mut out = vec![0.0; xn * d];
                    for r in 0..xn {
                        for j in 0..d {
                            out[r * d + j] = g[j] * inv;
                        }
                    }
                    out
                });
            }
            Op::SumAll(x) => {
                let (xn, d) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
                self.acc(*x, &g, |g, _| vec![g[0]; xn * d]);
            }
        }
        self.nodes[id].op = op;
    }

    /// Accumulate `make(upstream)` into the gradient of `target`, skipping
    /// subtrees that don't require gradients.
    fn acc<F: FnOnce(&[f64], &Self) -> Vec<f64>>(&mut self, target: Var, upstream: &[f64], make: F) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let contribution = make(upstream, self);
        add_into_grad(&mut self.nodes[target.0], &contribution);
    }
}

fn add_into_grad(node: &mut Node, contribution: &[f64]) {
    let n = node.rows * node.cols;
    debug_assert_eq!(contribution.len(), n);
    let g = node.grad.get_or_insert_with(|| vec![0.0; n]);
    for (gi, &c) in g.iter_mut().zip(contribution) {
        *gi += c;
    }
}

// ─────────────────────────── scalar helpers ────────────────────────────

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn signum_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// (mean, 1/sqrt(var + 1e-5)) of one row, variance denominator = row length.
fn row_norm_stats(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mut mean = 0.0;
    for &x in row {
        mean += x;
    }
    mean /= d;
    let mut var = 0.0;
    for &x in row {
        let c = x - mean;
        var += c * c;
    }
    var /= d;
    (mean, 1.0 / (var + 1e-5).sqrt())
}

fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let mut mx = f64::NEG_INFINITY;
    for &s in scores {
        if s > mx {
            mx = s;
        }
    }
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        let e = (s - mx).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

// ─────────────────────────── matmul kernels ────────────────────────────
// ikj loops with contiguous inner updates so the autovectorizer gets dense
// f64 streams; all kernels accumulate into `out`.

/// out[M×N] += a[M×K] · b[K×N]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[M×K] += a[M×N] · b[K×N]ᵀ  (rows of a dotted with rows of b)
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] += dot(arow, brow);
        }
    }
}

/// out[K×N] += a[M×K]ᵀ · b[M×N]
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// ──────────────────────────────── tests ────────────────────────────────
