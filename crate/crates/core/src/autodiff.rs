//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Graph`] records every operation eagerly: values are computed when a
//! node is created, and [`Graph::backward`] walks the tape in reverse to
//! accumulate gradients. All values are `rows x cols` matrices; callers keep
//! track of the logical layout (frame-major token rows, feature columns).

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::scan;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Grouping of query and key/value rows for the fused attention op.
///
/// Queries are `groups * q_len` rows; keys and values are `groups * kv_len`
/// rows, or just `kv_len` rows shared by every group when `shared_kv` is set.
/// Columns are split evenly across `heads`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSpec {
    pub groups: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
    pub causal: bool,
    pub shared_kv: bool,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    ScaleBy(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Abs(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<f64> },
    Gather { x: Var, idx: Vec<usize> },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GroupMean { x: Var, group: usize },
    Recurrence { z: Var, decay: Var, seq_len: usize },
    Reshape(Var),
    SumAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Eager tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    assert_eq!(t.rank(), 2, "graph values are rank-2, got {:?}", t.shape());
    (t.dim(0), t.dim(1))
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(&[rows, cols], data).expect("internal shape")
}

/// `out[m,n] += a[m,k] * b[k,n]`, accumulating over `k` in ascending order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf node. `needs_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        let value = if value.rank() == 2 {
            value
        } else {
            let (r, c) = (value.rows(), value.cols());
            value.reshape(&[r, c]).expect("rank-2 view")
        };
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "not a scalar");
        t.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(mat(m, n, out), Op::MatMul(a, b), ng)
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let sa = self.shape(a);
        assert_eq!(sa, self.shape(b), "elementwise shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        mat(sa.0, sa.1, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_same(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_same(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_same(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a + row`, broadcasting a `1 x cols` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects 1x{c}");
        let rv = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, &b) in chunk.iter_mut().zip(rv) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(mat(r, c, data), Op::AddRow(a, row), ng)
    }

    /// `a * row`, broadcasting a `1 x cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row expects 1x{c}");
        let rv = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, &b) in chunk.iter_mut().zip(rv) {
                *x *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(mat(r, c, data), Op::MulRow(a, row), ng)
    }

    /// `a * col`, broadcasting a `rows x 1` column across columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "mul_col expects {r}x1");
        let cv = self.value(col).data();
        let mut data = self.value(a).data().to_vec();
        for (chunk, &s) in data.chunks_mut(c).zip(cv) {
            for x in chunk.iter_mut() {
                *x *= s;
            }
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(mat(r, c, data), Op::MulCol(a, col), ng)
    }

    /// `scale * a + shift` with constant scalars.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (r, c) = self.shape(a);
        let data = self.value(a).data().iter().map(|&x| scale * x + shift).collect();
        let ng = self.ng(a);
        self.push(mat(r, c, data), Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// `a * s` for a `1 x 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let (r, c) = self.shape(a);
        let data = self.value(a).data().iter().map(|&x| x * sv).collect();
        let ng = self.ng(a) || self.ng(s);
        self.push(mat(r, c, data), Op::ScaleBy(a, s), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(mat(r, c, data), op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, math::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, math::sigmoid, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, math::silu, Op::Silu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, math::abs, Op::Abs(a))
    }

    /// Row-wise standardisation `(x - mean) / sqrt(var + 1e-5)` without affine terms.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / math::sqrt(var + 1e-5);
            rstd[i] = rs;
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let ng = self.ng(x);
        self.push(mat(r, c, out), Op::LayerNorm { x, rstd }, ng)
    }

    /// Fused multi-head scaled dot-product attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let (qr, d) = self.shape(q);
        let (kr, dk) = self.shape(k);
        let (vr, dv) = self.shape(v);
        let kv_groups = if spec.shared_kv { 1 } else { spec.groups };
        assert_eq!(qr, spec.groups * spec.q_len, "attention query rows");
        assert_eq!(kr, kv_groups * spec.kv_len, "attention key rows");
        assert_eq!(vr, kr, "attention value rows");
        assert_eq!(d, dk, "query/key width");
        assert_eq!(d, dv, "query/value width");
        assert!(spec.heads >= 1 && d % spec.heads == 0, "width {d} not divisible by heads");
        assert!(spec.kv_len >= 1, "attention needs at least one key");
        if spec.causal {
            assert_eq!(spec.q_len, spec.kv_len, "causal attention needs square blocks");
        }
        let dh = d / spec.heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; qr * d];
        let mut probs = vec![0.0; spec.groups * spec.heads * spec.q_len * spec.kv_len];
        let mut scores = vec![0.0; spec.kv_len];
        for g in 0..spec.groups {
            let kg = if spec.shared_kv { 0 } else { g };
            for h in 0..spec.heads {
                let co = h * dh;
                for i in 0..spec.q_len {
                    let qrow = &qd[(g * spec.q_len + i) * d + co..][..dh];
                    let limit = if spec.causal { i + 1 } else { spec.kv_len };
                    let mut mx = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate().take(limit) {
                        let krow = &kd[(kg * spec.kv_len + j) * d + co..][..dh];
                        let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                        *s = dot * scale;
                        if *s > mx {
                            mx = *s;
                        }
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut().take(limit) {
                        *s = math::exp(*s - mx);
                        z += *s;
                    }
                    let pbase = ((g * spec.heads + h) * spec.q_len + i) * spec.kv_len;
                    let orow = &mut out[(g * spec.q_len + i) * d + co..][..dh];
                    for j in 0..limit {
                        let p = scores[j] / z;
                        probs[pbase + j] = p;
                        let vrow = &vd[(kg * spec.kv_len + j) * d + co..][..dh];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(mat(qr, d, out), Op::Attention { q, k, v, spec, probs }, ng)
    }

    /// Row gather: output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let (r, c) = self.shape(x);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather index {i} out of {r} rows");
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        self.push(mat(idx.len(), c, data), Op::Gather { x, idx: idx.to_vec() }, ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(start + len <= r, "slice {start}+{len} exceeds {r} rows");
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let ng = self.ng(x);
        self.push(mat(len, c, data), Op::SliceRows { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.shape(p);
            assert_eq!(pc, c, "concat_rows width mismatch");
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(mat(rows, c, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = self.shape(p);
                assert_eq!(pr, r, "concat_cols height mismatch");
                pc
            })
            .collect();
        let c: usize = widths.iter().sum();
        let mut data = vec![0.0; r * c];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                data[i * c + off..i * c + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(mat(r, c, data), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(group >= 1 && r % group == 0, "group_mean: {r} rows not divisible by {group}");
        let src = self.value(x).data();
        let n = r / group;
        let mut data = vec![0.0; n * c];
        for gi in 0..n {
            let orow = &mut data[gi * c..(gi + 1) * c];
            for j in 0..group {
                let row = &src[(gi * group + j) * c..][..c];
                for (o, v) in orow.iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in orow.iter_mut() {
                *o /= group as f64;
            }
        }
        let ng = self.ng(x);
        self.push(mat(n, c, data), Op::GroupMean { x, group }, ng)
    }

    /// Diagonal linear recurrence `s_t = decay * s_{t-1} + z_t`, `s_0 = 0`,
    /// run independently over consecutive sequences of `seq_len` rows.
    pub fn recurrence(&mut self, z: Var, decay: Var, seq_len: usize) -> Var {
        let (r, c) = self.shape(z);
        assert_eq!(self.shape(decay), (1, c), "decay must be 1x{c}");
        assert!(seq_len >= 1 && r % seq_len == 0, "recurrence rows {r} vs seq_len {seq_len}");
        let mut out = vec![0.0; r * c];
        let zd = self.value(z).data();
        let ad = self.value(decay).data();
        for s in 0..r / seq_len {
            let span = s * seq_len * c..(s + 1) * seq_len * c;
            scan::linear_recurrence(&zd[span.clone()], ad, &mut out[span], seq_len, c);
        }
        let ng = self.ng(z) || self.ng(decay);
        self.push(mat(r, c, out), Op::Recurrence { z, decay, seq_len }, ng)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(r * c, rows * cols, "reshape size mismatch");
        let data = self.value(x).data().to_vec();
        let ng = self.ng(x);
        self.push(mat(rows, cols, data), Op::Reshape(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn accum_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let (r, c) = self.shape(v);
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(&[r, c]));
        f(slot.data_mut());
    }

    fn backprop(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accum_with(grads, *a, |ga| {
                    let mut bt = vec![0.0; n * k];
                    for kk in 0..k {
                        for j in 0..n {
                            bt[j * k + kk] = bv[kk * n + j];
                        }
                    }
                    matmul_into(go, &bt, ga, m, n, k);
                });
                self.accum_with(grads, *b, |gb| {
                    for i in 0..m {
                        let grow = &go[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let a_ik = av[i * k + kk];
                            let gbrow = &mut gb[kk * n..(kk + 1) * n];
                            for (g, x) in gbrow.iter_mut().zip(grow) {
                                *g += a_ik * x;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, gout.clone());
                self.accum(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, gout.clone());
                self.accum(grads, *b, gout.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accum_with(grads, *a, |ga| {
                    for ((g, x), y) in ga.iter_mut().zip(go).zip(bv) {
                        *g += x * y;
                    }
                });
                self.accum_with(grads, *b, |gb| {
                    for ((g, x), y) in gb.iter_mut().zip(go).zip(av) {
                        *g += x * y;
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.accum(grads, *a, gout.clone());
                let c = self.shape(*row).1;
                self.accum_with(grads, *row, |gr| {
                    for chunk in go.chunks(c) {
                        for (g, x) in gr.iter_mut().zip(chunk) {
                            *g += x;
                        }
                    }
                });
            }
            Op::MulRow(a, row) => {
                let c = self.shape(*row).1;
                let rv = self.value(*row).data();
                let av = self.value(*a).data();
                self.accum_with(grads, *a, |ga| {
                    for (gchunk, ochunk) in ga.chunks_mut(c).zip(go.chunks(c)) {
                        for ((g, x), s) in gchunk.iter_mut().zip(ochunk).zip(rv) {
                            *g += x * s;
                        }
                    }
                });
                self.accum_with(grads, *row, |gr| {
                    for (ochunk, achunk) in go.chunks(c).zip(av.chunks(c)) {
                        for ((g, x), y) in gr.iter_mut().zip(ochunk).zip(achunk) {
                            *g += x * y;
                        }
                    }
                });
            }
            Op::MulCol(a, col) => {
                let c = self.shape(*a).1;
                let cv = self.value(*col).data();
                let av = self.value(*a).data();
                self.accum_with(grads, *a, |ga| {
                    for ((gchunk, ochunk), &s) in ga.chunks_mut(c).zip(go.chunks(c)).zip(cv) {
                        for (g, x) in gchunk.iter_mut().zip(ochunk) {
                            *g += x * s;
                        }
                    }
                });
                self.accum_with(grads, *col, |gc| {
                    for ((g, ochunk), achunk) in gc.iter_mut().zip(go.chunks(c)).zip(av.chunks(c)) {
                        *g += ochunk.iter().zip(achunk).map(|(x, y)| x * y).sum::<f64>();
                    }
                });
            }
            Op::Affine(a, s) => {
                let s = *s;
                self.accum(grads, *a, gout.map(|x| x * s));
            }
            Op::ScaleBy(a, s) => {
                let sv = self.scalar(*s);
                self.accum(grads, *a, gout.map(|x| x * sv));
                let av = self.value(*a).data();
                let dot: f64 = go.iter().zip(av).map(|(x, y)| x * y).sum();
                self.accum_with(grads, *s, |gs| gs[0] += dot);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.accum_with(grads, *a, |ga| {
                    for ((g, x), yv) in ga.iter_mut().zip(go).zip(y) {
                        *g += x * (1.0 - yv * yv);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accum_with(grads, *a, |ga| {
                    for ((g, x), yv) in ga.iter_mut().zip(go).zip(y) {
                        *g += x * yv * (1.0 - yv);
                    }
                });
            }
            Op::Silu(a) => {
                let xv = self.value(*a).data();
                self.accum_with(grads, *a, |ga| {
                    for ((g, x), &inp) in ga.iter_mut().zip(go).zip(xv) {
                        let s = math::sigmoid(inp);
                        *g += x * (s + inp * s * (1.0 - s));
                    }
                });
            }
            Op::Abs(a) => {
                let xv = self.value(*a).data();
                self.accum_with(grads, *a, |ga| {
                    for ((g, x), &inp) in ga.iter_mut().zip(go).zip(xv) {
                        let sgn = if inp > 0.0 {
                            1.0
                        } else if inp < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *g += x * sgn;
                    }
                });
            }
            Op::LayerNorm { x, rstd } => {
                let (r, c) = self.shape(*x);
                let xhat = node.value.data();
                self.accum_with(grads, *x, |gx| {
                    for i in 0..r {
                        let gr = &go[i * c..(i + 1) * c];
                        let xr = &xhat[i * c..(i + 1) * c];
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[i * c + j] += rstd[i] * (gr[j] - mg - xr[j] * mgx);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(*q, *k, *v, spec, probs, go, grads);
            }
            Op::Gather { x, idx } => {
                let c = self.shape(*x).1;
                self.accum_with(grads, *x, |gx| {
                    for (o, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += go[o * c + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = self.shape(*x).1;
                let start = *start;
                self.accum_with(grads, *x, |gx| {
                    for (g, v) in gx[start * c..start * c + go.len()].iter_mut().zip(go) {
                        *g += v;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accum_with(grads, p, |gp| {
                        for (g, v) in gp.iter_mut().zip(&go[off..off + n]) {
                            *g += v;
                        }
                    });
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, c) = dims(&node.value);
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    self.accum_with(grads, p, |gp| {
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += go[i * c + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::GroupMean { x, group } => {
                let (r, c) = self.shape(*x);
                let inv = 1.0 / *group as f64;
                self.accum_with(grads, *x, |gx| {
                    for i in 0..r {
                        let gi = i / group;
                        for j in 0..c {
                            gx[i * c + j] += go[gi * c + j] * inv;
                        }
                    }
                });
            }
            Op::Recurrence { z, decay, seq_len } => {
                let (r, c) = self.shape(*z);
                let ad = self.value(*decay).data();
                let states = node.value.data();
                let mut gz = vec![0.0; r * c];
                let mut ga = vec![0.0; c];
                for s in 0..r / seq_len {
                    let base = s * seq_len;
                    let mut carry = vec![0.0; c];
                    for t in (0..*seq_len).rev() {
                        let row = (base + t) * c;
                        for j in 0..c {
                            let gs = go[row + j] + carry[j];
                            gz[row + j] = gs;
                            if t > 0 {
                                ga[j] += gs * states[row - c + j];
                            }
                            carry[j] = ad[j] * gs;
                        }
                    }
                }
                self.accum(grads, *z, mat(r, c, gz));
                self.accum(grads, *decay, mat(1, c, ga));
            }
            Op::Reshape(x) => {
                let (r, c) = self.shape(*x);
                self.accum(grads, *x, mat(r, c, go.to_vec()));
            }
            Op::SumAll(x) => {
                let g = go[0];
                self.accum_with(grads, *x, |gx| {
                    for v in gx.iter_mut() {
                        *v += g;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[f64],
        go: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (qr, d) = self.shape(q);
        let kr = self.shape(k).0;
        let dh = d / spec.heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; qr * d];
        let mut gk = vec![0.0; kr * d];
        let mut gv = vec![0.0; kr * d];
        let mut dp = vec![0.0; spec.kv_len];
        for g in 0..spec.groups {
            let kg = if spec.shared_kv { 0 } else { g };
            for h in 0..spec.heads {
                let co = h * dh;
                for i in 0..spec.q_len {
                    let qi = (g * spec.q_len + i) * d + co;
                    let limit = if spec.causal { i + 1 } else { spec.kv_len };
                    let pbase = ((g * spec.heads + h) * spec.q_len + i) * spec.kv_len;
                    let grow = &go[qi..qi + dh];
                    let mut dot_pdp = 0.0;
                    for j in 0..limit {
                        let vj = (kg * spec.kv_len + j) * d + co;
                        let p = probs[pbase + j];
                        let mut acc = 0.0;
                        for t in 0..dh {
                            acc += grow[t] * vd[vj + t];
                            gv[vj + t] += p * grow[t];
                        }
                        dp[j] = acc;
                        dot_pdp += p * acc;
                    }
                    for j in 0..limit {
                        let ds = probs[pbase + j] * (dp[j] - dot_pdp) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = (kg * spec.kv_len + j) * d + co;
                        for t in 0..dh {
                            gq[qi + t] += ds * kd[kj + t];
                            gk[kj + t] += ds * qd[qi + t];
                        }
                    }
                }
            }
        }
        self.accum(grads, q, mat(qr, d, gq));
        self.accum(grads, k, mat(kr, d, gk));
        self.accum(grads, v, mat(kr, d, gv));
    }
}
