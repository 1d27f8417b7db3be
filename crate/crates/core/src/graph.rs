//! Operation tape with reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value and whatever it
//! needs for the backward pass. Node order is a valid topological order, so
//! backward is a single reverse sweep. Graphs are single-threaded; independent
//! graphs (one per sample) can be evaluated in parallel.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::tensor::{matmul_raw, Float, Tensor};

/// Epsilon inside the layer-norm square root. A constant slice normalizes to 0.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Act(Var, Activation),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    Maximum(Var, Var),
    Reshape(Var),
    Sum(Var),
    WeightedSum(Vec<(Var, T)>),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_leaves: HashMap<ParamId, Var>,
    n_params: usize,
}

/// Adjoints of every node with respect to one scalar output.
#[derive(Debug, Clone)]
pub struct Adjoints<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
    n_params: usize,
}

impl<T: Float> Adjoints<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn into_param_grads(mut self) -> Gradients<T> {
        let mut out = Gradients::empty(self.n_params);
        for (pid, var) in &self.params {
            out.per_param[pid.index()] = self.grads[var.0].take();
        }
        out
    }
}

/// Treats rank-1 tensors as a single row.
fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n] => Some((1, *n)),
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
            n_params: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant leaf; receives an adjoint but no parameter gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        self.n_params = self.n_params.max(store.len());
        let v = self.push(store.value(id).clone(), Op::Param);
        self.param_leaves.insert(id, v);
        v
    }

    /// `a[m×p] · b[p×n]`; a rank-1 `a` is a single row and yields a rank-1 result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, p) = as_matrix(sa).ok_or_else(|| Error::shape("matmul", sa, sb))?;
        let (p2, n) = match sb {
            [p2, n] => (*p2, *n),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        if p != p2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let out_shape = if sa.len() == 1 { vec![n] } else { vec![m, n] };
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, p, n);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::MatMul(a, b)))
    }

    /// `a[m×p] · b[n×p]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, p, n) = match (sa, sb) {
            ([m, p], [n, p2]) if p == p2 => (*m, *p, *n),
            _ => return Err(Error::shape("matmul_bt", sa, sb)),
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            let ar = &av[i * p..(i + 1) * p];
            for j in 0..n {
                let br = &bv[j * p..(j + 1) * p];
                data[i * n + j] = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMulBt(a, b)))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("maximum", a, b, |x, y| if y > x { y } else { x })?;
        Ok(self.push(t, Op::Maximum(a, b)))
    }

    /// Adds a bias vector `b[n]` to every last-axis slice of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || sx.last() != sb.first() {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let n = sb[0];
        let bv = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = *v + bv[i % n];
        }
        Ok(self.push(t, Op::AddBias(x, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale(x, s))
    }

    /// Softmax over the last axis, stabilized by subtracting each slice's max.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        xv.check_finite("softmax input")?;
        let c = xv.last_dim();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx
            .last()
            .ok_or_else(|| Error::shape("layer_norm", &sx, &[]))?;
        for g in [gamma, beta] {
            if self.shape(g) != [c] {
                return Err(Error::shape("layer_norm", &sx, self.shape(g)));
            }
        }
        let eps = T::of(LAYER_NORM_EPS);
        let n = T::of(c as f64);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let xv = self.value(x).data();
        let rows = xv.len() / c;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let t = Tensor::new(sx, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = match kind {
            Activation::Relu => self.value(x).map(relu),
            Activation::Gelu => self.value(x).map(gelu),
        };
        self.push(t, Op::Act(x, kind))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    /// Stacks rows. Rank-1 parts count as single rows; the result is rank 2.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let (_, c) = as_matrix(self.shape(first))
            .ok_or_else(|| Error::shape("concat_rows", self.shape(first), &[]))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            match as_matrix(self.shape(p)) {
                Some((m, n)) if n == c => {
                    rows += m;
                    data.extend_from_slice(self.value(p).data());
                }
                _ => {
                    return Err(Error::shape(
                        "concat_rows",
                        self.shape(first),
                        self.shape(p),
                    ))
                }
            }
        }
        let t = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    /// Joins along the last axis. All rank-1 inputs yield a rank-1 output.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let rank1 = self.shape(first).len() == 1;
        let (m, _) = as_matrix(self.shape(first))
            .ok_or_else(|| Error::shape("concat_cols", self.shape(first), &[]))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            match as_matrix(s) {
                Some((mm, n)) if mm == m && (s.len() == 1) == rank1 => widths.push(n),
                _ => return Err(Error::shape("concat_cols", self.shape(first), s)),
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let shape = if rank1 { vec![total] } else { vec![m, total] };
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `start..start + len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        let (m, c) = match s {
            [m, c] if start + len <= *m && len > 0 => (*m, *c),
            _ => return Err(Error::shape("slice_rows", s, &[start, len])),
        };
        debug_assert!(m >= start + len);
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], data)?;
        Ok(self.push(t, Op::SliceRows { x, start }))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        let (m, c) = match s {
            [m, c] if start + len <= *c && len > 0 => (*m, *c),
            _ => return Err(Error::shape("slice_cols", s, &[start, len])),
        };
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new(vec![m, len], data)?;
        Ok(self.push(t, Op::SliceCols { x, start }))
    }

    /// Mean over the leading (token) axis: `[m×n] -> [n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let (m, n) = match s {
            [m, n] if *m > 0 => (*m, *n),
            _ => return Err(Error::Empty("mean_rows")),
        };
        let xv = self.value(x).data();
        let inv = T::one() / T::of(m as f64);
        let data = (0..n)
            .map(|j| (0..m).map(|i| xv[i * n + j]).sum::<T>() * inv)
            .collect();
        Ok(self.push(Tensor::vector(data), Op::MeanRows(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ wᵢ·xᵢ` over same-shaped terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let (first, _) = *terms.first().ok_or(Error::Empty("weighted_sum"))?;
        let shape = self.shape(first).to_vec();
        let mut acc = Tensor::zeros(shape.clone());
        for &(v, w) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::shape("weighted_sum", &shape, self.shape(v)));
            }
            for (a, &b) in acc.data_mut().iter_mut().zip(self.value(v).data()) {
                *a = *a + w * b;
            }
        }
        Ok(self.push(acc, Op::WeightedSum(terms.to_vec())))
    }

    /// `-log softmax(logits)[label]` via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 1 {
            return Err(Error::shape("cross_entropy", lv.shape(), &[]));
        }
        let k = lv.len();
        if label >= k {
            return Err(Error::ClassOutOfRange { class: label, k });
        }
        lv.check_finite("cross_entropy logits")?;
        let x = lv.data();
        let max = x.iter().copied().fold(T::neg_infinity(), T::max);
        let sum_exp: T = x.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        let loss = lse - x[label];
        let probs = x.iter().map(|&v| (v - lse).exp()).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    fn check_loss(&self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::NotOnTape {
                index: loss.0,
                len: self.nodes.len(),
            });
        }
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar {
                shape: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`, returning the adjoint of every node.
    pub fn backward_full(&self, loss: Var) -> Result<Adjoints<T>> {
        self.check_loss(loss)?;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(go) = grads[i].take() else { continue };
            self.propagate(i, &go, &mut grads);
            grads[i] = Some(go);
        }
        let mut params: Vec<(ParamId, Var)> =
            self.param_leaves.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort_by_key(|(p, _)| p.0);
        Ok(Adjoints {
            grads,
            params,
            n_params: self.n_params,
        })
    }

    /// Gradients of `loss` with respect to every parameter used on this graph.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        Ok(self.backward_full(loss)?.into_param_grads())
    }

    /// Accumulates gradients of `loss` into `store`. Call `zero_grads` between steps.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let g = self.gradients(loss)?;
        store.accumulate(&g);
        Ok(())
    }

    fn propagate(&self, i: usize, go: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let g = go.data();
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, p) = as_matrix(self.shape(*a)).expect("checked in forward");
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // ga = g · bᵀ
                let mut ga = vec![T::zero(); m * p];
                for r in 0..m {
                    for k in 0..p {
                        let brow = &bv[k * n..(k + 1) * n];
                        ga[r * p + k] = g[r * n..(r + 1) * n]
                            .iter()
                            .zip(brow)
                            .map(|(&x, &y)| x * y)
                            .sum();
                    }
                }
                // gb = aᵀ · g
                let mut gb = vec![T::zero(); p * n];
                for r in 0..m {
                    for k in 0..p {
                        let ark = av[r * p + k];
                        let dst = &mut gb[k * n..(k + 1) * n];
                        for (d, &x) in dst.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *d = *d + ark * x;
                        }
                    }
                }
                accumulate(grads, *a, self.shape(*a), ga);
                accumulate(grads, *b, self.shape(*b), gb);
            }
            Op::MatMulBt(a, b) => {
                let (m, p) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // ga = g · b ; gb = gᵀ · a
                let ga = matmul_raw(g, bv, m, n, p);
                let mut gb = vec![T::zero(); n * p];
                for r in 0..m {
                    for j in 0..n {
                        let grj = g[r * n + j];
                        let dst = &mut gb[j * p..(j + 1) * p];
                        for (d, &x) in dst.iter_mut().zip(&av[r * p..(r + 1) * p]) {
                            *d = *d + grj * x;
                        }
                    }
                }
                accumulate(grads, *a, self.shape(*a), ga);
                accumulate(grads, *b, self.shape(*b), gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, go.shape(), g.to_vec());
                accumulate(grads, *b, go.shape(), g.to_vec());
            }
            Op::AddBias(x, b) => {
                let n = self.shape(*b)[0];
                let mut gb = vec![T::zero(); n];
                for (j, &v) in g.iter().enumerate() {
                    gb[j % n] = gb[j % n] + v;
                }
                accumulate(grads, *x, go.shape(), g.to_vec());
                accumulate(grads, *b, self.shape(*b), gb);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = g.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                let gb = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                accumulate(grads, *a, go.shape(), ga);
                accumulate(grads, *b, go.shape(), gb);
            }
            Op::Scale(x, s) => {
                accumulate(grads, *x, go.shape(), g.iter().map(|&v| v * *s).collect());
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                let mut gx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(c).zip(g.chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(&yy, &gg)| yy * (gg - dot)));
                }
                accumulate(grads, *x, go.shape(), gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = self.shape(*gamma)[0];
                let n = T::of(c as f64);
                let gv = self.value(*gamma).data();
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, hr), &is) in g.chunks(c).zip(xhat.chunks(c)).zip(inv_std) {
                    let mut sum_gh = T::zero();
                    let mut sum_ghh = T::zero();
                    for j in 0..c {
                        ggamma[j] = ggamma[j] + gr[j] * hr[j];
                        gbeta[j] = gbeta[j] + gr[j];
                        let gh = gr[j] * gv[j];
                        sum_gh = sum_gh + gh;
                        sum_ghh = sum_ghh + gh * hr[j];
                    }
                    for j in 0..c {
                        let gh = gr[j] * gv[j];
                        gx.push(is / n * (n * gh - sum_gh - hr[j] * sum_ghh));
                    }
                }
                accumulate(grads, *x, go.shape(), gx);
                accumulate(grads, *gamma, &[c], ggamma);
                accumulate(grads, *beta, &[c], gbeta);
            }
            Op::Act(x, kind) => {
                let xv = self.value(*x).data();
                let d: Vec<T> = match kind {
                    Activation::Relu => xv
                        .iter()
                        .zip(g)
                        .map(|(&v, &gg)| if v > T::zero() { gg } else { T::zero() })
                        .collect(),
                    Activation::Gelu => xv
                        .iter()
                        .zip(g)
                        .map(|(&v, &gg)| gg * gelu_grad(v))
                        .collect(),
                };
                accumulate(grads, *x, go.shape(), d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    accumulate(grads, p, self.shape(p), g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let m = node.value.len() / total;
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    let mut gp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        gp.extend_from_slice(&g[r * total + col..r * total + col + w]);
                    }
                    accumulate(grads, p, self.shape(p), gp);
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let xs = self.shape(*x);
                let c = xs[1];
                let mut gx = vec![T::zero(); self.value(*x).len()];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                accumulate(grads, *x, xs, gx);
            }
            Op::SliceCols { x, start } => {
                let xs = self.shape(*x);
                let (m, c) = (xs[0], xs[1]);
                let w = node.value.last_dim();
                let mut gx = vec![T::zero(); m * c];
                for r in 0..m {
                    gx[r * c + start..r * c + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                accumulate(grads, *x, xs, gx);
            }
            Op::MeanRows(x) => {
                let xs = self.shape(*x);
                let (m, n) = (xs[0], xs[1]);
                let inv = T::one() / T::of(m as f64);
                let gx = (0..m * n).map(|i| g[i % n] * inv).collect();
                accumulate(grads, *x, xs, gx);
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![T::zero(); g.len()];
                let mut gb = vec![T::zero(); g.len()];
                for i in 0..g.len() {
                    if bv[i] > av[i] {
                        gb[i] = g[i];
                    } else {
                        ga[i] = g[i];
                    }
                }
                accumulate(grads, *a, go.shape(), ga);
                accumulate(grads, *b, go.shape(), gb);
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, self.shape(*x), g.to_vec());
            }
            Op::Sum(x) => {
                let xs = self.shape(*x);
                let n = self.value(*x).len();
                accumulate(grads, *x, xs, vec![g[0]; n]);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    accumulate(grads, v, go.shape(), g.iter().map(|&x| x * w).collect());
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let mut gl: Vec<T> = probs.iter().map(|&p| p * g[0]).collect();
                gl[*label] = gl[*label] - g[0];
                accumulate(grads, *logits, self.shape(*logits), gl);
            }
        }
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], data: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(data) {
                *a = *a + b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), data).expect("adjoint shape matches value"));
        }
    }
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn relu<T: Float>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// `x·Φ(x)` with the exact Gaussian CDF.
pub fn gelu<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}
