use std::sync::Arc;

use super::attention::{self, AttnSaved, RopeTable};
use super::{gemm, shape_err, MatRef, Real, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

type Res = Result<NodeId, TensorError>;

enum Op<T> {
    Leaf,
    /// Recorded without backward information (gradient tracking disabled).
    Detached,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    AddRow {
        x: NodeId,
        bias: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    GatherRows {
        table: NodeId,
        index: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<T>,
        rstd: Vec<f64>,
    },
    Gelu {
        x: NodeId,
    },
    SwiGlu {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    LogSoftmax {
        x: NodeId,
        axis: usize,
    },
    SplitHeads {
        x: NodeId,
        tokens: usize,
        heads: usize,
    },
    MergeHeads {
        x: NodeId,
        tokens: usize,
        heads: usize,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        rope: Option<Arc<RopeTable>>,
        saved: AttnSaved<T>,
    },
    Sum {
        x: NodeId,
    },
    Mean {
        x: NodeId,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is already topologically sorted.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visits: usize,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    /// Number of nodes whose backward rule ran.
    pub fn visits(&self) -> usize {
        self.visits
    }
}

fn rows_of(shape: &[usize]) -> usize {
    shape[..shape.len() - 1].iter().product()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; nothing on it can be differentiated.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Every recorded node, oldest first.
    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> NodeId {
        let rg = self.grad_enabled;
        self.push_raw(t, Op::Leaf, rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Res {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if rg { op } else { Op::Detached };
        Ok(self.push_raw(value, op, rg))
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// `[.., k] · [k × n] -> [.., n]`; leading axes of `a` act as rows.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Res {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (rows_of(&sa), sb[0], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            &mut out,
            T::zero(),
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        self.push("matmul", t, Op::MatMul { a, b }, &[a, b])
    }

    /// Adds a `[n]` vector to every row of `[.., n]`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Res {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_exact_mut(n) {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v += *bb;
            }
        }
        self.push("add_row", t, Op::AddRow { x, bias }, &[x, bias])
    }

    /// Affine map: `x·w + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Res {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Res {
        let t = self.zip_op("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Res {
        let t = self.zip_op("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Res {
        let t = self.zip_op("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Res {
        let f = T::of(factor);
        let t = self.value(x).map(|v| v * f);
        self.push("scale", t, Op::Scale { x, factor }, &[x])
    }

    /// Selects rows of a `[rows × n]` table: output row `i` is `table[index[i]]`.
    pub fn gather_rows(&mut self, table: NodeId, index: &[usize]) -> Res {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || index.is_empty() || index.iter().any(|&i| i >= s[0]) {
            return Err(shape_err(
                "gather_rows",
                format!("table {s:?}, {} indices", index.len()),
            ));
        }
        let n = s[1];
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(vec![index.len(), n], data)?;
        self.push(
            "gather_rows",
            t,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            &[table],
        )
    }

    /// Normalizes each row of `[.., d]` to zero mean and unit variance, then
    /// applies `gain ⊙ · + bias`.
    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Res {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layernorm", "gain/bias must match channel extent"));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.rows();
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let h = (row[j].f64() - mean) * rs;
                xhat[r * d + j] = T::of(h);
                out[r * d + j] = T::of(h * g[j].f64() + b[j].f64());
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            "layernorm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: NodeId) -> Res {
        let t = self
            .value(x)
            .map(|v| T::of(0.5 * v.f64() * (1.0 + erf(v.f64() * INV_SQRT2))));
        self.push("gelu", t, Op::Gelu { x }, &[x])
    }

    /// Splits the channel axis into value and gate halves: `value ⊙ silu(gate)`.
    pub fn swiglu(&mut self, x: NodeId) -> Res {
        let xv = self.value(x);
        let c = xv.last_dim();
        if c % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "swiglu",
                detail: format!("channel extent {c} is odd"),
            });
        }
        let h = c / 2;
        let mut data = Vec::with_capacity(xv.len() / 2);
        for row in xv.data().chunks_exact(c) {
            for j in 0..h {
                let g = row[h + j].f64();
                data.push(T::of(row[j].f64() * g * sigmoid(g)));
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = h;
        let t = Tensor::new(shape, data)?;
        self.push("swiglu", t, Op::SwiGlu { x }, &[x])
    }

    fn check_axis(&self, op: &'static str, x: NodeId, axis: usize) -> Result<(), TensorError> {
        if axis >= self.shape(x).len() {
            return Err(TensorError::Invalid {
                op,
                detail: format!("axis {axis} for shape {:?}", self.shape(x)),
            });
        }
        Ok(())
    }

    fn softmax_values(x: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let src = x.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).fold(f64::NEG_INFINITY, |m, j| m.max(src[at(j)].f64()));
                let z: f64 = (0..len).map(|j| (src[at(j)].f64() - mx).exp()).sum();
                let lz = z.ln();
                for j in 0..len {
                    let s = src[at(j)].f64() - mx;
                    out[at(j)] = T::of(if log { s - lz } else { (s - lz).exp() });
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out).expect("same shape")
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Res {
        self.check_axis("softmax", x, axis)?;
        let t = Self::softmax_values(self.value(x), axis, false);
        self.push("softmax", t, Op::Softmax { x, axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Res {
        self.check_axis("log_softmax", x, axis)?;
        let t = Self::softmax_values(self.value(x), axis, true);
        self.push("log_softmax", t, Op::LogSoftmax { x, axis }, &[x])
    }

    /// `[B·tokens × heads·hd] -> [B·heads × tokens × hd]`.
    pub fn split_heads(&mut self, x: NodeId, tokens: usize, heads: usize) -> Res {
        let xv = self.value(x);
        let d = xv.last_dim();
        let rows = xv.rows();
        if heads == 0 || d % heads != 0 || tokens == 0 || rows % tokens != 0 {
            return Err(shape_err(
                "split_heads",
                format!("{:?} into {heads} heads of {tokens} tokens", xv.shape()),
            ));
        }
        let (b, hd) = (rows / tokens, d / heads);
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for n in 0..tokens {
                for h in 0..heads {
                    let s = (bi * tokens + n) * d + h * hd;
                    let o = ((bi * heads + h) * tokens + n) * hd;
                    out[o..o + hd].copy_from_slice(&src[s..s + hd]);
                }
            }
        }
        let t = Tensor::new(vec![b * heads, tokens, hd], out)?;
        self.push("split_heads", t, Op::SplitHeads { x, tokens, heads }, &[x])
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: NodeId, heads: usize) -> Res {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(shape_err("merge_heads", format!("{s:?} with {heads} heads")));
        }
        let (bh, tokens, hd) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let d = heads * hd;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for n in 0..tokens {
                for h in 0..heads {
                    let o = (bi * tokens + n) * d + h * hd;
                    let i = ((bi * heads + h) * tokens + n) * hd;
                    out[o..o + hd].copy_from_slice(&src[i..i + hd]);
                }
            }
        }
        let t = Tensor::new(vec![b * tokens, d], out)?;
        self.push("merge_heads", t, Op::MergeHeads { x, tokens, heads }, &[x])
    }

    /// Multi-head scaled dot-product attention on `[B·heads × tokens × hd]`
    /// inputs. Rotary phases (if any) rotate queries and keys, never values.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        rope: Option<Arc<RopeTable>>,
    ) -> Res {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(shape_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", s, self.shape(k), self.shape(v)),
            ));
        }
        let (bh, n, hd) = (s[0], s[1], s[2]);
        if hd % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                detail: format!("head dim {hd} is odd"),
            });
        }
        if let Some(r) = &rope {
            if r.tokens() != n || r.pairs() * 2 != hd {
                return Err(shape_err(
                    "attention",
                    format!("rope table {}x{} for {n} tokens, hd {hd}", r.tokens(), r.pairs()),
                ));
            }
        }
        let (out, saved) = attention::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            bh,
            n,
            hd,
            rope.as_deref(),
        );
        let t = Tensor::new(s, out)?;
        self.push(
            "attention",
            t,
            Op::Attention {
                q,
                k,
                v,
                rope,
                saved,
            },
            &[q, k, v],
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Res {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        self.push("sum", Tensor::scalar(T::of(s)), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Res {
        let v = self.value(x);
        let s: f64 = v.data().iter().map(|v| v.f64()).sum::<f64>() / v.len() as f64;
        self.push("mean", Tensor::scalar(T::of(s)), Op::Mean { x }, &[x])
    }

    /// Backpropagates from a single-element node. Each recorded node is
    /// visited at most once, newest first.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", "loss must have exactly one element"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut visits = 0;
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, visits });
        }
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            visits += 1;
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visits })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let like = |id: NodeId, data: Vec<T>| {
            Tensor::new(self.value(id).shape().to_vec(), data).expect("gradient shape")
        };
        match &node.op {
            Op::Leaf | Op::Detached => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (rows_of(sa), sb[0], sb[1]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        MatRef::new(g.data(), m, n),
                        MatRef::new(self.value(*b).data(), k, n).t(),
                        &mut da,
                        T::zero(),
                    );
                    self.accumulate(grads, *a, like(*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        MatRef::new(self.value(*a).data(), m, k).t(),
                        MatRef::new(g.data(), m, n),
                        &mut db,
                        T::zero(),
                    );
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::AddRow { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*bias) {
                    let n = g.last_dim();
                    let mut acc = vec![0.0f64; n];
                    for row in g.data().chunks_exact(n) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v.f64();
                        }
                    }
                    self.accumulate(grads, *bias, like(*bias, acc.into_iter().map(T::of).collect()));
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let d = g.data().iter().zip(self.value(*b).data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, like(*a, d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, like(*b, d));
                }
            }
            Op::Scale { x, factor } => {
                let f = T::of(*factor);
                self.accumulate(grads, *x, g.map(|v| v * f));
            }
            Op::GatherRows { table, index } => {
                let s = self.shape(*table);
                let n = s[1];
                let mut acc = vec![0.0f64; s[0] * n];
                for (row, &i) in g.data().chunks_exact(n).zip(index) {
                    for (a, v) in acc[i * n..(i + 1) * n].iter_mut().zip(row) {
                        *a += v.f64();
                    }
                }
                self.accumulate(grads, *table, like(*table, acc.into_iter().map(T::of).collect()));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = g.last_dim();
                let gd = g.data();
                let gain_v = self.value(*gain).data();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0.0f64; d];
                    let mut db = vec![0.0f64; d];
                    for (grow, hrow) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += grow[j].f64() * hrow[j].f64();
                            db[j] += grow[j].f64();
                        }
                    }
                    self.accumulate(grads, *gain, like(*gain, dg.into_iter().map(T::of).collect()));
                    self.accumulate(grads, *bias, like(*bias, db.into_iter().map(T::of).collect()));
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let grow = &gd[span.clone()];
                        let hrow = &xhat[span.clone()];
                        let dh: Vec<f64> = (0..d).map(|j| grow[j].f64() * gain_v[j].f64()).collect();
                        let m1 = dh.iter().sum::<f64>() / d as f64;
                        let m2 = dh.iter().zip(hrow).map(|(a, h)| a * h.f64()).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = T::of(rs * (dh[j] - m1 - hrow[j].f64() * m2));
                        }
                    }
                    self.accumulate(grads, *x, like(*x, dx));
                }
            }
            Op::Gelu { x } => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, xv)| {
                        let z = xv.f64();
                        let cdf = 0.5 * (1.0 + erf(z * INV_SQRT2));
                        let pdf = INV_SQRT_2PI * (-0.5 * z * z).exp();
                        T::of(gv.f64() * (cdf + z * pdf))
                    })
                    .collect();
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::SwiGlu { x } => {
                let xv = self.value(*x);
                let c = xv.last_dim();
                let h = c / 2;
                let mut dx = vec![T::zero(); xv.len()];
                for (r, (row, grow)) in xv.data().chunks_exact(c).zip(g.data().chunks_exact(h)).enumerate() {
                    for j in 0..h {
                        let (val, gate) = (row[j].f64(), row[h + j].f64());
                        let s = sigmoid(gate);
                        let go = grow[j].f64();
                        dx[r * c + j] = T::of(go * gate * s);
                        dx[r * c + h + j] = T::of(go * val * s * (1.0 + gate * (1.0 - s)));
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        if log {
                            let gs: f64 = (0..len).map(|j| gd[at(j)].f64()).sum();
                            for j in 0..len {
                                dx[at(j)] = T::of(gd[at(j)].f64() - yd[at(j)].f64().exp() * gs);
                            }
                        } else {
                            let inner_p: f64 = (0..len).map(|j| gd[at(j)].f64() * yd[at(j)].f64()).sum();
                            for j in 0..len {
                                dx[at(j)] = T::of(yd[at(j)].f64() * (gd[at(j)].f64() - inner_p));
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::SplitHeads { x, tokens, heads } => {
                let (tokens, heads) = (*tokens, *heads);
                let d = self.value(*x).last_dim();
                let hd = d / heads;
                let b = self.value(*x).rows() / tokens;
                let gd = g.data();
                let mut dx = vec![T::zero(); gd.len()];
                for bi in 0..b {
                    for n in 0..tokens {
                        for h in 0..heads {
                            let s = (bi * tokens + n) * d + h * hd;
                            let o = ((bi * heads + h) * tokens + n) * hd;
                            dx[s..s + hd].copy_from_slice(&gd[o..o + hd]);
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::MergeHeads { x, tokens, heads } => {
                let (tokens, heads) = (*tokens, *heads);
                let s = self.shape(*x);
                let hd = s[2];
                let b = s[0] / heads;
                let d = heads * hd;
                let gd = g.data();
                let mut dx = vec![T::zero(); gd.len()];
                for bi in 0..b {
                    for n in 0..tokens {
                        for h in 0..heads {
                            let o = (bi * tokens + n) * d + h * hd;
                            let i = ((bi * heads + h) * tokens + n) * hd;
                            dx[i..i + hd].copy_from_slice(&gd[o..o + hd]);
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Attention {
                q,
                k,
                v,
                rope,
                saved,
            } => {
                let s = self.shape(*q);
                let (bh, n, hd) = (s[0], s[1], s[2]);
                let (dq, dk, dv) = attention::backward(
                    saved,
                    self.value(*v).data(),
                    g.data(),
                    bh,
                    n,
                    hd,
                    rope.as_deref(),
                );
                self.accumulate(grads, *q, like(*q, dq));
                self.accumulate(grads, *k, like(*k, dk));
                self.accumulate(grads, *v, like(*v, dv));
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                let t = Tensor::full(self.shape(*x), gv);
                self.accumulate(grads, *x, t);
            }
            Op::Mean { x } => {
                let len = self.value(*x).len();
                let gv = T::of(g.data()[0].f64() / len as f64);
                let t = Tensor::full(self.shape(*x), gv);
                self.accumulate(grads, *x, t);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4], &[2.0; 4]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let x = g.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[0.0; 4]));
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn layernorm_closed_forms() {
        let mut g = Graph::<f64>::new();
        let gain = g.constant(t(&[2], &[1.0, 1.0]));
        let bias = g.constant(t(&[2], &[0.5, -0.5]));
        let x = g.constant(t(&[1, 2], &[7.0, 7.0]));
        let y = g.layernorm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -0.5]);

        let zero = g.constant(t(&[2], &[0.0, 0.0]));
        let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = g.layernorm(x, gain, zero, 1e-5).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-3 && (d[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn activations_closed_forms() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[0.0]));
        let y = g.gelu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
        let x = g.constant(t(&[1, 2], &[2.0, 0.0]));
        let y = g.swiglu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
        let x = g.constant(t(&[1, 3], &[2.0, 0.0, 1.0]));
        assert!(matches!(g.swiglu(x), Err(TensorError::Invalid { .. })));
    }

    #[test]
    fn single_token_attention_returns_values() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[1, 1, 2], &[0.3, -1.0]));
        let k = g.constant(t(&[1, 1, 2], &[2.0, 0.1]));
        let v = g.constant(t(&[1, 1, 2], &[5.0, -4.0]));
        let o = g.attention(q, k, v, None).unwrap();
        assert_eq!(g.value(o).data(), &[5.0, -4.0]);
        let odd = g.constant(t(&[1, 1, 3], &[0.0; 3]));
        assert!(g.attention(odd, odd, odd, None).is_err());
    }

    #[test]
    fn zero_rope_equals_plain_attention() {
        let vals: Vec<f64> = (0..2 * 3 * 4).map(|i| ((i * 37 % 11) as f64 - 5.0) / 4.0).collect();
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[2, 3, 4], &vals));
        let k = g.constant(t(&[2, 3, 4], &vals.iter().rev().copied().collect::<Vec<_>>()));
        let v = g.constant(t(&[2, 3, 4], &vals.iter().map(|x| x * 0.5).collect::<Vec<_>>()));
        let a = g.attention(q, k, v, None).unwrap();
        let b = g
            .attention(q, k, v, Some(Arc::new(RopeTable::zeros(3, 2))))
            .unwrap();
        for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(g.scale(x, 10.0), Err(TensorError::NonFinite { op: "scale" })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let p = g.mul(w, c).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
        assert!(!g.requires_grad(c));
    }

    #[test]
    fn no_grad_graph_records_nothing_differentiable() {
        let mut g = Graph::<f64>::no_grad();
        let w = g.param(t(&[2], &[1.0, 2.0]));
        let s = g.sum(w).unwrap();
        assert!(!g.requires_grad(s));
        assert_eq!(g.backward(s).unwrap().visits(), 0);
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 1..24), axis_last: bool) {
            let n = vals.len();
            let shape = if axis_last { vec![1, n] } else { vec![n, 1] };
            let axis = if axis_last { 1 } else { 0 };
            let mut g = Graph::<f64>::new();
            let x = g.constant(t(&shape, &vals));
            let y = g.softmax(x, axis).unwrap();
            let s: f64 = g.value(y).data().iter().sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-12);
            let ly = g.log_softmax(x, axis).unwrap();
            let s: f64 = g.value(ly).data().iter().map(|v| v.exp()).sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-12);
            proptest::prop_assert!(g.value(ly).data().iter().all(|v| *v <= 1e-15));
        }
    }
}
