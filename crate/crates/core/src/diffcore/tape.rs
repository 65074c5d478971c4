use std::collections::HashMap;
use std::sync::Arc;

use super::attention::{self, AttentionLayout};
use super::{gemm_into, Array, DiffError, Layout, ParamId, ParamStore, Real, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const L2_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op<T> {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Log(Var),
    Mean(Var),
    Sum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttentionLayout>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Array<T>,
    op: Op<T>,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order of the
/// graph; [`Tape::backward`] walks it in reverse.
#[derive(Debug)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_inner<T: Real>(x: T) -> (T, T) {
    // tanh approximation: returns (gelu(x), d gelu / dx)
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (y, dy)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a data array. Its gradient is available via [`Gradients::wrt`].
    pub fn input(&mut self, value: Array<T>) -> Result<Var> {
        self.push(value, Op::Input, "input")
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.value(id).clone(), Op::Param, "param")?;
        self.bound.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_into(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Plain,
            self.value(b).data(),
            Layout::Plain,
            &mut out,
            false,
        );
        self.push(Array::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("add", a, b));
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return Err(self.shape_err("add_row", x, bias));
        }
        let b = self.value(bias).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&u, &w)| u + w))
            .collect();
        let out = Array::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::AddRow(x, bias), "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = map(self.value(x), |v| v * s);
        self.push(out, Op::Scale(x, s), "scale")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = map(self.value(x), |v| gelu_inner(v).0);
        self.push(out, Op::Gelu(x), "gelu")
    }

    /// Row-wise softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if c == 0 {
            return Err(DiffError::Invalid {
                op: "softmax",
                detail: "last extent must be at least 1".into(),
            });
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_row(row);
        }
        let out = Array::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::Softmax(x), "softmax")
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if self.value(gain).len() != c {
            return Err(self.shape_err("layernorm", x, gain));
        }
        if self.value(bias).len() != c {
            return Err(self.shape_err("layernorm", x, bias));
        }
        let eps = T::lit(eps);
        let n = T::lit(c as f64);
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let out = Array::new(self.value(x).shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layernorm",
        )
    }

    /// Stacks matrices with equal width along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(DiffError::Invalid {
                op: "concat_rows",
                detail: "no inputs".into(),
            });
        };
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.value(p).dims2();
            if pc != c {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            Array::new(vec![rows, c], data)?,
            Op::ConcatRows(parts.to_vec()),
            "concat_rows",
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if start + len > r {
            return Err(DiffError::Invalid {
                op: "slice_rows",
                detail: format!("rows {start}..{} out of {r}", start + len),
            });
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        self.push(
            Array::new(vec![len, c], data)?,
            Op::SliceRows { x, start },
            "slice_rows",
        )
    }

    /// Embedding lookup: picks rows of `table` by index.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.value(table).dims2();
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(DiffError::Invalid {
                op: "gather_rows",
                detail: format!("row {bad} out of table with {r} rows"),
            });
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        self.push(
            Array::new(vec![index.len(), c], data)?,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Divides each row by `max(‖row‖, 1e-12)`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols().max(1);
        let floor = T::lit(L2_FLOOR);
        let mut data = xv.data().to_vec();
        let mut norms = Vec::with_capacity(xv.rows());
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            norms.push(n);
            for v in row {
                *v = *v / n;
            }
        }
        let out = Array::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::L2Normalize { x, norms }, "l2_normalize")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = map(self.value(x), |v| v.ln());
        self.push(out, Op::Log(x), "log")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(DiffError::Invalid {
                op: "mean",
                detail: "empty input".into(),
            });
        }
        let m = xv.sum() / T::lit(xv.len() as f64);
        self.push(Array::scalar(m), Op::Mean(x), "mean")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Array::scalar(s), Op::Sum(x), "sum")
    }

    /// Multi-head grouped attention over `q`, `k`, `v` (all `rows × width`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: Arc<AttentionLayout>) -> Result<Var> {
        let shape = self.value(q).shape().to_vec();
        for other in [k, v] {
            if self.value(other).shape() != shape.as_slice() {
                return Err(self.shape_err("attention", q, other));
            }
        }
        let (rows, width) = self.value(q).dims2();
        if heads == 0 || width % heads != 0 {
            return Err(DiffError::Invalid {
                op: "attention",
                detail: format!("width {width} not divisible by {heads} heads"),
            });
        }
        if rows != layout.rows() {
            return Err(DiffError::Invalid {
                op: "attention",
                detail: format!("layout covers {} rows, input has {rows}", layout.rows()),
            });
        }
        let (out, probs) = attention::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            width,
            heads,
            &layout,
        );
        self.push(
            Array::new(vec![rows, width], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            "attention",
        )
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> DiffError {
        DiffError::Shape {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(DiffError::NotScalar(lv.shape().to_vec()));
        }
        self.backward_seeded(&[(loss, Array::scalar(T::one()))])
    }

    /// Reverse pass with explicit upstream gradients for one or more nodes;
    /// equivalent to `backward` on `sum_i <node_i, seed_i>`.
    pub fn backward_seeded(&self, seeds: &[(Var, Array<T>)]) -> Result<Gradients<T>> {
        let last = seeds.iter().map(|(v, _)| v.0).max().ok_or_else(|| DiffError::Invalid {
            op: "backward",
            detail: "no seed".into(),
        })?;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; last + 1];
        for (v, seed) in seeds {
            if seed.len() != self.value(*v).len() {
                return Err(DiffError::Shape {
                    op: "backward",
                    left: self.value(*v).shape().to_vec(),
                    right: seed.shape().to_vec(),
                });
            }
            add_into(self.acc(&mut grads, *v), seed.data());
        }
        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(DiffError::NonFinite { op: "backward" });
            }
        }
        let params = self.bound.iter().map(|(&p, &v)| (p, v.0)).collect();
        Ok(Gradients {
            shapes: self.nodes[..=last].iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
            params,
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut [T] {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).cols();
                let bv = self.value(*b).data();
                gemm_into(
                    m,
                    n,
                    k,
                    g,
                    Layout::Plain,
                    bv,
                    Layout::Transposed,
                    self.acc(grads, *a),
                    true,
                );
                let av = self.value(*a).data();
                gemm_into(
                    k,
                    m,
                    n,
                    av,
                    Layout::Transposed,
                    g,
                    Layout::Plain,
                    self.acc(grads, *b),
                    true,
                );
            }
            Op::Add(a, b) => {
                add_into(self.acc(grads, *a), g);
                add_into(self.acc(grads, *b), g);
            }
            Op::AddRow(x, b) => {
                add_into(self.acc(grads, *x), g);
                let c = self.value(*b).len();
                let db = self.acc(grads, *b);
                for row in g.chunks(c.max(1)) {
                    add_into(db, row);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                for ((d, &gi), &bi) in self.acc(grads, *a).iter_mut().zip(g).zip(bv) {
                    *d += gi * bi;
                }
                for ((d, &gi), &ai) in self.acc(grads, *b).iter_mut().zip(g).zip(av) {
                    *d += gi * ai;
                }
            }
            Op::Scale(x, s) => {
                for (d, &gi) in self.acc(grads, *x).iter_mut().zip(g) {
                    *d += gi * *s;
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                for ((d, &gi), &xi) in self.acc(grads, *x).iter_mut().zip(g).zip(xv) {
                    *d += gi * gelu_inner(xi).1;
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let dx = self.acc(grads, *x);
                for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&u, &w)| a + u * w);
                    for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += yi * (gi - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let gv = self.value(*gain).data().to_vec();
                {
                    let dg = self.acc(grads, *gain);
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, &gi), &hi) in dg.iter_mut().zip(gr).zip(hr) {
                            *d += gi * hi;
                        }
                    }
                }
                {
                    let db = self.acc(grads, *bias);
                    for gr in g.chunks(c) {
                        add_into(db, gr);
                    }
                }
                let n = T::lit(c as f64);
                let dx = self.acc(grads, *x);
                for (r, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        let dh = gr[j] * gv[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                    }
                    m1 = m1 / n;
                    m2 = m2 / n;
                    for j in 0..c {
                        let dh = gr[j] * gv[j];
                        dx[r * c + j] += rstd[r] * (dh - m1 - hr[j] * m2);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    add_into(self.acc(grads, p), &g[off..off + len]);
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                let dx = self.acc(grads, *x);
                add_into(&mut dx[start * c..start * c + g.len()], g);
            }
            Op::GatherRows { table, index } => {
                let c = node.value.cols();
                let dt = self.acc(grads, *table);
                for (gr, &r) in g.chunks(c.max(1)).zip(index) {
                    add_into(&mut dt[r * c..(r + 1) * c], gr);
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let c = node.value.cols().max(1);
                let floor = T::lit(L2_FLOOR);
                let dx = self.acc(grads, *x);
                for (r, ((dr, gr), yr)) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).enumerate() {
                    let n = norms[r];
                    if n > floor {
                        let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&u, &w)| a + u * w);
                        for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += (gi - yi * dot) / n;
                        }
                    } else {
                        for (d, &gi) in dr.iter_mut().zip(gr) {
                            *d += gi / n;
                        }
                    }
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                for ((d, &gi), &xi) in self.acc(grads, *x).iter_mut().zip(g).zip(xv) {
                    *d += gi / xi;
                }
            }
            Op::Mean(x) => {
                let dx = self.acc(grads, *x);
                let share = g[0] / T::lit(dx.len() as f64);
                for d in dx {
                    *d += share;
                }
            }
            Op::Sum(x) => {
                for d in self.acc(grads, *x) {
                    *d += g[0];
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => {
                let width = node.value.cols();
                let (dq, dk, dv) = attention::backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    width,
                    *heads,
                    layout,
                );
                add_into(self.acc(grads, *q), &dq);
                add_into(self.acc(grads, *k), &dk);
                add_into(self.acc(grads, *v), &dv);
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn map<T: Real>(a: &Array<T>, f: impl Fn(T) -> T) -> Array<T> {
    Array::new(a.shape().to_vec(), a.data().iter().map(|&v| f(v)).collect()).expect("same length")
}

fn zip_map<T: Real>(a: &Array<T>, b: &Array<T>, f: impl Fn(T, T) -> T) -> Array<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(a.shape().to_vec(), data).expect("same length")
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v` (zeros if it does not
    /// influence the loss).
    pub fn wrt(&self, v: Var) -> Array<T> {
        let shape = self.shapes.get(v.0).cloned().unwrap_or_else(|| vec![0]);
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Array::new(shape, g.clone()).expect("gradient matches node shape"),
            None => Array::zeros(shape),
        }
    }

    /// Gradients of bound parameters, ordered by parameter id.
    pub fn param_grads(&self) -> Vec<(ParamId, &[T])> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|&(p, node)| self.grads.get(node).and_then(Option::as_deref).map(|g| (p, g)))
            .collect();
        out.sort_by_key(|&(p, _)| p);
        out
    }

    /// Adds every bound parameter's gradient into the store's buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in self.param_grads() {
            add_into(store.get_mut(id).grad.data_mut(), g);
        }
    }
}
