use super::kernels::{gemm, Stride};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const RMS_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    Detach,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Sum(Var),
    Silu(Var),
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    MeanPool {
        h: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Cosine {
        a: Var,
        b: Var,
        norm_a: f64,
        norm_b: f64,
        dot: f64,
    },
    Attention {
        qkv: Var,
        segments: Vec<(usize, usize)>,
        n_heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape. Nodes are appended in creation order, which is
/// a topological order; backward walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never accumulates gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn check_finite(&self, v: Var) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("node {}", v.0)))
        }
    }

    // ---- ops ----

    /// Stop-gradient: same values, no gradient path back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            ta.data(),
            Stride::row_major(k),
            tb.data(),
            Stride::row_major(n),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(shape_err("transpose", t, t));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect());
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// `x + bias` where `bias` matches the trailing axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = *tx.shape().last().unwrap();
        if tb.shape() != [n] {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            add_into(row, tb.data());
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// `x * sigmoid(x)`, elementwise.
    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * sigmoid(x)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(value, Op::Silu(a), rg)
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                bound: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let idx = |k: usize| base + k * inner;
                let max = (0..axis_len)
                    .map(|k| src[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..axis_len {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..axis_len {
                    out[idx(k)] /= z;
                }
            }
        }
        let value = Tensor::from_parts(shape.to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            },
            rg,
        ))
    }

    /// Root-mean-square normalization over the trailing axis with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let n = *tx.shape().last().unwrap();
        if tg.shape() != [n] {
            return Err(shape_err("rms_norm", tx, tg));
        }
        let mut out = vec![0.0; tx.len()];
        let mut inv_rms = Vec::with_capacity(tx.len() / n);
        for (row, dst) in tx.data().chunks(n).zip(out.chunks_mut(n)) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            for ((d, v), g) in dst.iter_mut().zip(row).zip(tg.data()) {
                *d = v * inv * g;
            }
            inv_rms.push(inv);
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Row lookup into a `rows × width` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(shape_err("embedding", t, t));
        }
        let (v, w) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding id",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        if ids.is_empty() {
            return Err(Error::Empty("embedding"));
        }
        let value = Tensor::from_parts(vec![ids.len(), w], out);
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Selects rows of the leading axis, in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if rows.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        let mut out = Vec::with_capacity(rows.len() * t.row_len());
        for &r in rows {
            if r >= t.rows() {
                return Err(Error::Index {
                    what: "row",
                    index: r,
                    bound: t.rows(),
                });
            }
            out.extend_from_slice(t.row(r));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::from_parts(shape, out);
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &rows)
    }

    /// Concatenates along the leading axis; trailing axes must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let trailing = self.value(first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != trailing[..] {
                return Err(shape_err("concat_rows", self.value(first), t));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
            rg |= self.rg(p);
        }
        let mut shape = vec![rows];
        shape.extend(trailing);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Mean of the rows of `h` where `mask` is true; returns a 1-D tensor.
    pub fn mean_pool(&mut self, h: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(h);
        if t.shape().len() != 2 || mask.len() != t.rows() {
            return Err(Error::Shape {
                op: "mean_pool",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let rows: Vec<usize> = (0..mask.len()).filter(|&r| mask[r]).collect();
        if rows.is_empty() {
            return Err(Error::Empty("mean_pool"));
        }
        let w = t.row_len();
        let mut out = vec![0.0; w];
        for &r in &rows {
            add_into(&mut out, t.row(r));
        }
        let k = rows.len() as f64;
        out.iter_mut().for_each(|v| *v /= k);
        let rg = self.rg(h);
        Ok(self.push(Tensor::from_parts(vec![w], out), Op::MeanPool { h, rows }, rg))
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 || targets.len() != t.rows() || mask.len() != t.rows() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let v = t.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::Index {
                what: "target id",
                index: bad,
                bound: v,
            });
        }
        let rows: Vec<usize> = (0..mask.len()).filter(|&r| mask[r]).collect();
        if rows.is_empty() {
            return Err(Error::EmptySupervision("cross_entropy"));
        }
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut nll = 0.0;
        let mut sel_targets = Vec::with_capacity(rows.len());
        for &r in &rows {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = z.ln() + max;
            nll += log_z - row[targets[r]];
            probs.extend(row.iter().map(|x| (x - log_z).exp()));
            sel_targets.push(targets[r]);
        }
        let loss = nll / rows.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                rows,
                targets: sel_targets,
                probs,
            },
            rg,
        ))
    }

    /// `1 - cos(a, b)`.
    pub fn cosine_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("cosine_loss", ta, tb));
        }
        let sq = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
        let (sq_a, sq_b) = (sq(ta), sq(tb));
        if sq_a == 0.0 || sq_b == 0.0 {
            return Err(Error::DegenerateVector("cosine_loss"));
        }
        let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        // sqrt of the product keeps cos(a, a) exactly 1
        let loss = 1.0 - dot / (sq_a * sq_b).sqrt();
        let (norm_a, norm_b) = (sq_a.sqrt(), sq_b.sqrt());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
                dot,
            },
            rg,
        ))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `qkv` is `rows × 3d` holding queries, keys and values side by side.
    /// Each `(start, len)` segment attends only within itself, and row `t`
    /// attends only to rows `<= t`.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        segments: &[(usize, usize)],
        n_heads: usize,
    ) -> Result<Var> {
        let t = self.value(qkv);
        if t.shape().len() != 2 || !t.shape()[1].is_multiple_of(3 * n_heads) {
            return Err(shape_err("causal_attention", t, t));
        }
        let rows = t.rows();
        let d = t.shape()[1] / 3;
        let dh = d / n_heads;
        let covered: usize = segments.iter().map(|s| s.1).sum();
        if covered != rows || segments.iter().any(|&(s, l)| l == 0 || s + l > rows) {
            return Err(Error::Shape {
                op: "causal_attention",
                lhs: t.shape().to_vec(),
                rhs: vec![covered],
            });
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let src = t.data();
        let w = 3 * d;
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for &(start, len) in segments {
            for h in 0..n_heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for i in 0..len {
                    let qi = &src[(start + i) * w + qo..][..dh];
                    scores.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &src[(start + j) * w + ko..][..dh];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        max = max.max(s);
                        scores.push(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let dst = &mut out[(start + i) * d + h * dh..][..dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s /= z;
                        let vj = &src[(start + j) * w + vo..][..dh];
                        for (o, v) in dst.iter_mut().zip(vj) {
                            *o += *s * v;
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let rg = self.rg(qkv);
        Ok(self.push(
            Tensor::from_parts(vec![rows, d], out),
            Op::Attention {
                qkv,
                segments: segments.to_vec(),
                n_heads,
                probs,
            },
            rg,
        ))
    }

    // ---- backward ----

    /// Accumulates d(root)/d(node) into the gradient slot of every
    /// `requires_grad` node reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        if !self.rg(root) {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        local[root.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        for idx in (0..=root.0).rev() {
            let Some(g) = local[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            propagate(nodes, node, &g, &mut local);
            match &mut self.grads[idx] {
                Some(existing) => add_into(existing.data_mut(), &g),
                slot @ None => *slot = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
            }
        }
        Ok(())
    }
}

/// Returns the accumulation buffer for `v`, or `None` when `v` is frozen.
fn slot<'a>(
    nodes: &[Node],
    local: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(local[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], local: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf | Op::Detach => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if let Some(ga) = slot(nodes, local, *a) {
                // dA += dC · Bᵀ
                gemm(m, n, k, g, Stride::row_major(n), tb.data(), Stride::col_major(n), ga);
            }
            if let Some(gb) = slot(nodes, local, *b) {
                // dB += Aᵀ · dC
                gemm(k, m, n, ta.data(), Stride::col_major(k), g, Stride::row_major(n), gb);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
            if let Some(ga) = slot(nodes, local, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, local, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = slot(nodes, local, *b) {
                add_into(gb, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, local, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = slot(nodes, local, *b) {
                gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, local, *a) {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(val(*b).data()) {
                    *d += s * y;
                }
            }
            if let Some(gb) = slot(nodes, local, *b) {
                for ((d, s), x) in gb.iter_mut().zip(g).zip(val(*a).data()) {
                    *d += s * x;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(nodes, local, *a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s * c);
            }
        }
        Op::AddBias(x, bias) => {
            if let Some(gx) = slot(nodes, local, *x) {
                add_into(gx, g);
            }
            if let Some(gb) = slot(nodes, local, *bias) {
                let n = gb.len();
                for row in g.chunks(n) {
                    add_into(gb, row);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(nodes, local, *a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Silu(a) => {
            if let Some(ga) = slot(nodes, local, *a) {
                for ((d, s), &x) in ga.iter_mut().zip(g).zip(val(*a).data()) {
                    let sg = sigmoid(x);
                    *d += s * sg * (1.0 + x * (1.0 - sg));
                }
            }
        }
        Op::Softmax {
            x,
            outer,
            axis_len,
            inner,
        } => {
            let y = node.value.data();
            if let Some(gx) = slot(nodes, local, *x) {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * axis_len * inner + i;
                        let dot: f64 = (0..*axis_len)
                            .map(|k| y[base + k * inner] * g[base + k * inner])
                            .sum();
                        for k in 0..*axis_len {
                            let p = base + k * inner;
                            gx[p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let (tx, tg) = (val(*x), val(*gain));
            let n = tg.len();
            if let Some(gg) = slot(nodes, local, *gain) {
                for ((row, gr), inv) in tx.data().chunks(n).zip(g.chunks(n)).zip(inv_rms) {
                    for ((d, xv), gv) in gg.iter_mut().zip(row).zip(gr) {
                        *d += gv * xv * inv;
                    }
                }
            }
            if let Some(gx) = slot(nodes, local, *x) {
                for (((row, gr), inv), dst) in tx
                    .data()
                    .chunks(n)
                    .zip(g.chunks(n))
                    .zip(inv_rms)
                    .zip(gx.chunks_mut(n))
                {
                    let mut proj = 0.0;
                    for ((xv, gv), w) in row.iter().zip(gr).zip(tg.data()) {
                        proj += gv * w * xv * inv;
                    }
                    proj /= n as f64;
                    for (((d, xv), gv), w) in dst.iter_mut().zip(row).zip(gr).zip(tg.data()) {
                        *d += inv * (gv * w - xv * inv * proj);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(gt) = slot(nodes, local, *table) {
                let w = val(*table).shape()[1];
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * w..(id + 1) * w], &g[r * w..(r + 1) * w]);
                }
            }
        }
        Op::GatherRows { x, rows } => {
            if let Some(gx) = slot(nodes, local, *x) {
                let w = val(*x).row_len();
                for (r, &src) in rows.iter().enumerate() {
                    add_into(&mut gx[src * w..(src + 1) * w], &g[r * w..(r + 1) * w]);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let n = val(*p).len();
                if let Some(gp) = slot(nodes, local, *p) {
                    add_into(gp, &g[off..off + n]);
                }
                off += n;
            }
        }
        Op::MeanPool { h, rows } => {
            if let Some(gh) = slot(nodes, local, *h) {
                let w = g.len();
                let k = rows.len() as f64;
                for &r in rows {
                    for (d, s) in gh[r * w..(r + 1) * w].iter_mut().zip(g) {
                        *d += s / k;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            rows,
            targets,
            probs,
        } => {
            if let Some(gl) = slot(nodes, local, *logits) {
                let v = val(*logits).shape()[1];
                let c = g[0] / rows.len() as f64;
                for (i, (&r, &tgt)) in rows.iter().zip(targets).enumerate() {
                    let dst = &mut gl[r * v..(r + 1) * v];
                    for (d, p) in dst.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                        *d += c * p;
                    }
                    dst[tgt] -= c;
                }
            }
        }
        Op::Cosine {
            a,
            b,
            norm_a,
            norm_b,
            dot,
        } => {
            let (ta, tb) = (val(*a), val(*b));
            let denom = norm_a * norm_b;
            let cos = dot / denom;
            // d(1 - cos)/da = -(b / (|a||b|) - cos * a / |a|²)
            if let Some(ga) = slot(nodes, local, *a) {
                for ((d, x), y) in ga.iter_mut().zip(ta.data()).zip(tb.data()) {
                    *d -= g[0] * (y / denom - cos * x / (norm_a * norm_a));
                }
            }
            if let Some(gb) = slot(nodes, local, *b) {
                for ((d, x), y) in gb.iter_mut().zip(ta.data()).zip(tb.data()) {
                    *d -= g[0] * (x / denom - cos * y / (norm_b * norm_b));
                }
            }
        }
        Op::Attention {
            qkv,
            segments,
            n_heads,
            probs,
        } => {
            let Some(gq) = slot(nodes, local, *qkv) else { return };
            let src = val(*qkv).data();
            let d = node.value.shape()[1];
            let dh = d / n_heads;
            let w = 3 * d;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut off = 0;
            let mut dp = Vec::new();
            for &(start, len) in segments {
                for h in 0..*n_heads {
                    let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                    for i in 0..len {
                        let p = &probs[off..off + i + 1];
                        off += i + 1;
                        let go = &g[(start + i) * d + h * dh..][..dh];
                        dp.clear();
                        for j in 0..=i {
                            let vj = &src[(start + j) * w + vo..][..dh];
                            dp.push(go.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                        }
                        let mix: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        for j in 0..=i {
                            // value gradient
                            let dvj = &mut gq[(start + j) * w + vo..][..dh];
                            for (dv, gov) in dvj.iter_mut().zip(go) {
                                *dv += p[j] * gov;
                            }
                            let ds = p[j] * (dp[j] - mix) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..dh {
                                let kjc = src[(start + j) * w + ko + c];
                                let qic = src[(start + i) * w + qo + c];
                                gq[(start + i) * w + qo + c] += ds * kjc;
                                gq[(start + j) * w + ko + c] += ds * qic;
                            }
                        }
                    }
                }
            }
        }
    }
}
