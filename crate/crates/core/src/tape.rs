//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward pass records its intermediate tensors on a [`Tape`]. Calling
//! [`Tape::backward`] with seed gradients for one or more outputs walks the
//! tape in reverse and returns gradients for every node, from which parameter
//! gradients are collected.

use std::sync::Arc;

use crate::scalar::{sigmoid, Scalar};
use crate::tensor::{gemm, MatMut, MatRef, Tensor};

pub type ParamId = usize;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Marks a zero-filled slot in a [`Tape::gather`] index.
pub const GATHER_NONE: u32 = u32::MAX;

/// Sparse linear map mixing rows: `out[o, :] = Σ w · x[src, :]`.
///
/// Bilinear resampling, padding and shifts on `[pixels, channels]` feature
/// maps are all expressed this way.
#[derive(Debug, Clone)]
pub struct RowMix<T> {
    pub rows_in: usize,
    offsets: Vec<usize>,
    entries: Vec<(u32, T)>,
}

impl<T: Scalar> RowMix<T> {
    pub fn builder(rows_in: usize) -> RowMixBuilder<T> {
        RowMixBuilder {
            rows_in,
            offsets: vec![0],
            entries: Vec::new(),
        }
    }

    pub fn rows_out(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, o: usize) -> &[(u32, T)] {
        &self.entries[self.offsets[o]..self.offsets[o + 1]]
    }

    /// Applies the map to a plain `[rows_in, cols]` slice.
    pub fn apply(&self, x: &[T], cols: usize) -> Vec<T> {
        assert_eq!(x.len(), self.rows_in * cols);
        let mut out = vec![T::zero(); self.rows_out() * cols];
        for o in 0..self.rows_out() {
            let dst = &mut out[o * cols..(o + 1) * cols];
            for &(src, w) in self.row(o) {
                let s = &x[src as usize * cols..(src as usize + 1) * cols];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += w * *v;
                }
            }
        }
        out
    }
}

pub struct RowMixBuilder<T> {
    rows_in: usize,
    offsets: Vec<usize>,
    entries: Vec<(u32, T)>,
}

impl<T: Scalar> RowMixBuilder<T> {
    pub fn push(&mut self, src: usize, weight: T) {
        assert!(src < self.rows_in);
        self.entries.push((src as u32, weight));
    }

    pub fn end_row(&mut self) {
        self.offsets.push(self.entries.len());
    }

    pub fn build(self) -> RowMix<T> {
        RowMix {
            rows_in: self.rows_in,
            offsets: self.offsets,
            entries: self.entries,
        }
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Add(usize, usize),
    Mul(usize, usize),
    AddRow {
        x: usize,
        row: usize,
    },
    Scale(usize, T),
    Gelu(usize),
    Sigmoid(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Gather {
        x: usize,
        index: Arc<[u32]>,
    },
    RowMix {
        x: usize,
        mix: Arc<RowMix<T>>,
    },
    ConcatRows(Vec<usize>),
    Reshape(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, ParamId)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients, summed over every use of the parameter.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(node, id)| self.grads[node].as_ref().map(|g| (id, g)))
            .collect()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

fn gelu<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let th = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * du
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        self.push(value.clone(), Op::Param(id))
    }

    /// Matrix product of the operands viewed as `[rows, cols]`, each optionally transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ar, ac) = self.value(a).dims2();
        let (br, bc) = self.value(b).dims2();
        let av = MatRef::dense(self.value(a).data(), ar, ac);
        let bv = MatRef::dense(self.value(b).data(), br, bc);
        let av = if ta { av.t() } else { av };
        let bv = if tb { bv.t() } else { bv };
        let (m, n) = (av.rows, bv.cols);
        let mut out = vec![T::zero(); m * n];
        gemm(av, bv, T::zero(), MatMut::dense(&mut out, m, n));
        self.push(
            Tensor::new(vec![m, n], out),
            Op::MatMul {
                a: a.0,
                b: b.0,
                ta,
                tb,
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.len(), vb.len(), "add: {:?} vs {:?}", va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Add(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.len(), vb.len());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Mul(a.0, b.0))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (r, c) = self.value(x).dims2();
        assert_eq!(self.value(row).len(), c, "add_row width");
        let rv = self.value(row).data().to_vec();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for i in 0..r {
            for (d, b) in data[i * c..(i + 1) * c].iter_mut().zip(&rv) {
                *d += *b;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::AddRow { x: x.0, row: row.0 })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| *v * c).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Scale(x.0, c))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| gelu(*v)).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Gelu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| sigmoid(*v)).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Sigmoid(x.0))
    }

    /// Normalizes each row over its last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = self.value(x).dims2();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        assert_eq!((g.len(), b.len()), (c, c));
        let xv = self.value(x);
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        let n = T::from_usize(c).unwrap();
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::new(shape, out),
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[nq, d]`, `k`/`v` are `[nk, d]`; heads split the channel
    /// dimension. `allowed`, when given, is a row-major `[nq, nk]` table:
    /// `false` entries get a logit of −∞ (probability exactly zero). A row with
    /// no allowed entry produces a zero output row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        allowed: Option<&[bool]>,
    ) -> Var {
        let (nq, d) = self.value(q).dims2();
        let (nk, dk) = self.value(k).dims2();
        let (nv, dv) = self.value(v).dims2();
        assert_eq!((dk, nv, dv), (d, nk, d), "attention operand shapes");
        assert!(heads >= 1 && d % heads == 0, "heads must divide width");
        if let Some(m) = allowed {
            assert_eq!(m.len(), nq * nk, "attention mask shape");
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let qv = MatRef::dense(self.value(q).data(), nq, d);
        let kv = MatRef::dense(self.value(k).data(), nk, d);
        let vv = MatRef::dense(self.value(v).data(), nk, d);
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = vec![T::zero(); nq * d];
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            gemm(
                qv.cols_range(h * dh, dh),
                kv.cols_range(h * dh, dh).t(),
                T::zero(),
                MatMut::dense(p, nq, nk),
            );
            for i in 0..nq {
                let row = &mut p[i * nk..(i + 1) * nk];
                let ok = |j: usize| allowed.map_or(true, |m| m[i * nk + j]);
                let mut mx = T::neg_infinity();
                for (j, s) in row.iter_mut().enumerate() {
                    *s *= scale;
                    if ok(j) && *s > mx {
                        mx = *s;
                    }
                }
                if mx == T::neg_infinity() {
                    row.iter_mut().for_each(|s| *s = T::zero());
                    continue;
                }
                let mut total = T::zero();
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if ok(j) { (*s - mx).exp() } else { T::zero() };
                    total += *s;
                }
                row.iter_mut().for_each(|s| *s /= total);
            }
            gemm(
                MatRef::dense(p, nq, nk),
                vv.cols_range(h * dh, dh),
                T::zero(),
                MatMut::dense(&mut out, nq, d).cols_range(h * dh, dh),
            );
        }
        self.push(
            Tensor::new(vec![nq, d], out),
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                probs,
            },
        )
    }

    /// Attention probabilities `[heads, nq, nk]` saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `out.flat[i] = x.flat[index[i]]`, or zero where `index[i] == GATHER_NONE`.
    pub fn gather(&mut self, x: Var, index: Arc<[u32]>, shape: Vec<usize>) -> Var {
        let xv = self.value(x).data();
        let data = index
            .iter()
            .map(|&i| {
                if i == GATHER_NONE {
                    T::zero()
                } else {
                    xv[i as usize]
                }
            })
            .collect();
        self.push(Tensor::new(shape, data), Op::Gather { x: x.0, index })
    }

    pub fn row_mix(&mut self, x: Var, mix: Arc<RowMix<T>>) -> Var {
        let (r, c) = self.value(x).dims2();
        assert_eq!(r, mix.rows_in, "row_mix input rows");
        let out = mix.apply(self.value(x).data(), c);
        self.push(
            Tensor::new(vec![mix.rows_out(), c], out),
            Op::RowMix { x: x.0, mix },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, pc) = self.value(*p).dims2();
            assert_eq!(pc, c, "concat_rows width");
            rows += r;
            data.extend_from_slice(self.value(*p).data());
        }
        self.push(
            Tensor::new(vec![rows, c], data),
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = self.value(x).clone().reshaped(shape);
        self.push(t, Op::Reshape(x.0))
    }

    /// Back-propagates the given output gradients through the whole tape.
    pub fn backward(&self, seeds: &[(Var, Tensor<T>)]) -> Gradients<T> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(g.len(), self.nodes[v.0].value.len(), "seed shape");
            acc(&mut grads, &self.nodes, v.0).add_assign(g);
            last = last.max(v.0);
        }
        let mut params = Vec::new();
        for i in (0..=last.min(n.saturating_sub(1))).rev() {
            if let Op::Param(id) = self.nodes[i].op {
                params.push((i, id));
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        params.reverse();
        Gradients { grads, params }
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let gd = g.data();
        match &nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = nodes[*a].value.dims2();
                let (br, bc) = nodes[*b].value.dims2();
                let av = MatRef::dense(nodes[*a].value.data(), ar, ac);
                let bv = MatRef::dense(nodes[*b].value.data(), br, bc);
                let aop = if *ta { av.t() } else { av };
                let bop = if *tb { bv.t() } else { bv };
                let gv = MatRef::dense(gd, aop.rows, bop.cols);
                {
                    let ga = acc(grads, nodes, *a);
                    let dst = MatMut::dense(ga.data_mut(), ar, ac);
                    let dst = if *ta { dst.t() } else { dst };
                    gemm(gv, bop.t(), T::one(), dst);
                }
                {
                    let gb = acc(grads, nodes, *b);
                    let dst = MatMut::dense(gb.data_mut(), br, bc);
                    let dst = if *tb { dst.t() } else { dst };
                    gemm(aop.t(), gv, T::one(), dst);
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    let ga = acc(grads, nodes, p);
                    for (d, s) in ga.data_mut().iter_mut().zip(gd) {
                        *d += *s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                {
                    let ga = acc(grads, nodes, *a);
                    for ((d, s), o) in ga.data_mut().iter_mut().zip(gd).zip(vb) {
                        *d += *s * *o;
                    }
                }
                let gb = acc(grads, nodes, *b);
                for ((d, s), o) in gb.data_mut().iter_mut().zip(gd).zip(va) {
                    *d += *s * *o;
                }
            }
            Op::AddRow { x, row } => {
                let (r, c) = nodes[*x].value.dims2();
                {
                    let gx = acc(grads, nodes, *x);
                    for (d, s) in gx.data_mut().iter_mut().zip(gd) {
                        *d += *s;
                    }
                }
                let gr = acc(grads, nodes, *row);
                let gr = gr.data_mut();
                for k in 0..r {
                    for j in 0..c {
                        gr[j] += gd[k * c + j];
                    }
                }
            }
            Op::Scale(x, c) => {
                let gx = acc(grads, nodes, *x);
                for (d, s) in gx.data_mut().iter_mut().zip(gd) {
                    *d += *s * *c;
                }
            }
            Op::Gelu(x) => {
                let xv = nodes[*x].value.data();
                let gx = acc(grads, nodes, *x);
                for ((d, s), v) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                    *d += *s * gelu_grad(*v);
                }
            }
            Op::Sigmoid(x) => {
                let yv = nodes[i].value.data();
                let gx = acc(grads, nodes, *x);
                for ((d, s), y) in gx.data_mut().iter_mut().zip(gd).zip(yv) {
                    *d += *s * *y * (T::one() - *y);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = nodes[*x].value.dims2();
                let gv = nodes[*gamma].value.data().to_vec();
                {
                    let gg = acc(grads, nodes, *gamma);
                    let gg = gg.data_mut();
                    for k in 0..r {
                        for j in 0..c {
                            gg[j] += gd[k * c + j] * xhat[k * c + j];
                        }
                    }
                }
                {
                    let gb = acc(grads, nodes, *beta);
                    let gb = gb.data_mut();
                    for k in 0..r {
                        for j in 0..c {
                            gb[j] += gd[k * c + j];
                        }
                    }
                }
                let n = T::from_usize(c).unwrap();
                let gx = acc(grads, nodes, *x);
                let gx = gx.data_mut();
                let mut dxhat = vec![T::zero(); c];
                for k in 0..r {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..c {
                        dxhat[j] = gd[k * c + j] * gv[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[k * c + j];
                    }
                    let f = rstd[k] / n;
                    for j in 0..c {
                        gx[k * c + j] += f * (n * dxhat[j] - s1 - xhat[k * c + j] * s2);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, gd, grads),
            Op::Gather { x, index } => {
                let gx = acc(grads, nodes, *x);
                let gx = gx.data_mut();
                for (s, &src) in gd.iter().zip(index.iter()) {
                    if src != GATHER_NONE {
                        gx[src as usize] += *s;
                    }
                }
            }
            Op::RowMix { x, mix } => {
                let c = nodes[*x].value.dims2().1;
                let gx = acc(grads, nodes, *x);
                let gx = gx.data_mut();
                for o in 0..mix.rows_out() {
                    let src_g = &gd[o * c..(o + 1) * c];
                    for &(src, w) in mix.row(o) {
                        let dst = &mut gx[src as usize * c..(src as usize + 1) * c];
                        for (d, s) in dst.iter_mut().zip(src_g) {
                            *d += w * *s;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[*p].value.len();
                    let gp = acc(grads, nodes, *p);
                    for (d, s) in gp.data_mut().iter_mut().zip(&gd[off..off + len]) {
                        *d += *s;
                    }
                    off += len;
                }
            }
            Op::Reshape(x) => {
                let gx = acc(grads, nodes, *x);
                for (d, s) in gx.data_mut().iter_mut().zip(gd) {
                    *d += *s;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: &[T],
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let nodes = &self.nodes;
        let (nq, d) = nodes[q].value.dims2();
        let nk = nodes[k].value.dims2().0;
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let qv = MatRef::dense(nodes[q].value.data(), nq, d);
        let kv = MatRef::dense(nodes[k].value.data(), nk, d);
        let vv = MatRef::dense(nodes[v].value.data(), nk, d);
        let gout = MatRef::dense(gd, nq, d);
        let mut dq = vec![T::zero(); nq * d];
        let mut dk = vec![T::zero(); nk * d];
        let mut dv = vec![T::zero(); nk * d];
        let mut ds = vec![T::zero(); nq * nk];
        for h in 0..heads {
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];
            let go = gout.cols_range(h * dh, dh);
            // dP = dO · Vᵀ
            gemm(
                go,
                vv.cols_range(h * dh, dh).t(),
                T::zero(),
                MatMut::dense(&mut ds, nq, nk),
            );
            // dV += Pᵀ · dO
            gemm(
                MatRef::dense(p, nq, nk).t(),
                go,
                T::one(),
                MatMut::dense(&mut dv, nk, d).cols_range(h * dh, dh),
            );
            for i in 0..nq {
                let pr = &p[i * nk..(i + 1) * nk];
                let dr = &mut ds[i * nk..(i + 1) * nk];
                let dot: T = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
                for (g, pp) in dr.iter_mut().zip(pr) {
                    *g = *pp * (*g - dot) * scale;
                }
            }
            gemm(
                MatRef::dense(&ds, nq, nk),
                kv.cols_range(h * dh, dh),
                T::one(),
                MatMut::dense(&mut dq, nq, d).cols_range(h * dh, dh),
            );
            gemm(
                MatRef::dense(&ds, nq, nk).t(),
                qv.cols_range(h * dh, dh),
                T::one(),
                MatMut::dense(&mut dk, nk, d).cols_range(h * dh, dh),
            );
        }
        for (node, g) in [(q, dq), (k, dk), (v, dv)] {
            let dst = acc(grads, nodes, node);
            for (a, b) in dst.data_mut().iter_mut().zip(&g) {
                *a += *b;
            }
        }
    }
}

fn acc<'g, T: Scalar>(
    grads: &'g mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    i: usize,
) -> &'g mut Tensor<T> {
    grads[i].get_or_insert_with(|| Tensor::zeros(nodes[i].value.shape().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(Σ w ⊙ f(inputs))/d inputs.
    fn check_grad(
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let build = |inputs: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = f(&mut tape, &vars);
            (tape, vars, out)
        };
        let (tape, vars, out) = build(&inputs);
        let w = rand_tensor(&mut rng, tape.shape(out).to_vec());
        let grads = tape.backward(&[(out, w.clone())]);
        let objective = |inputs: &[Tensor<f64>]| {
            let (tape, _, out) = build(inputs);
            tape.value(out)
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let h = 1e-6;
        for (slot, var) in vars.iter().enumerate() {
            let analytic = grads.of(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[slot].shape().to_vec()));
            for e in 0..inputs[slot].len() {
                let mut plus = inputs.clone();
                plus[slot].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[slot].data_mut()[e] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = analytic.data()[e];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {slot} elem {e}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn matmul_variants_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = rand_tensor(&mut rng, if ta { vec![4, 3] } else { vec![3, 4] });
            let b = rand_tensor(&mut rng, if tb { vec![5, 4] } else { vec![4, 5] });
            check_grad(vec![a, b], |t, v| t.matmul_t(v[0], v[1], ta, tb));
        }
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![3, 4]);
        let r = rand_tensor(&mut rng, vec![4]);
        check_grad(vec![a.clone(), b.clone()], |t, v| {
            let m = t.mul(v[0], v[1]);
            let s = t.add(m, v[0]);
            let g = t.gelu(s);
            let sg = t.sigmoid(g);
            t.scale(sg, 1.7)
        });
        check_grad(vec![a, r], |t, v| t.add_row(v[0], v[1]));
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, vec![5, 6]);
        let g = rand_tensor(&mut rng, vec![6]);
        let b = rand_tensor(&mut rng, vec![6]);
        check_grad(vec![x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2]));
    }

    #[test]
    fn attention_gradient_with_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_tensor(&mut rng, vec![3, 8]);
        let k = rand_tensor(&mut rng, vec![5, 8]);
        let v = rand_tensor(&mut rng, vec![5, 8]);
        let mask: Vec<bool> = (0..15).map(|i| i % 4 != 1).collect();
        check_grad(vec![q.clone(), k.clone(), v.clone()], |t, vs| {
            t.attention(vs[0], vs[1], vs[2], 2, Some(&mask))
        });
        check_grad(vec![q, k, v], |t, vs| t.attention(vs[0], vs[1], vs[2], 4, None));
    }

    #[test]
    fn masked_columns_get_exactly_zero_probability() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::new(vec![1, 2], vec![1.0, -2.0]));
        let k = tape.constant(Tensor::new(vec![3, 2], vec![0.3, 0.1, 5.0, 5.0, -1.0, 2.0]));
        let v = tape.constant(Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0]));
        let out = tape.attention(q, k, v, 1, Some(&[true, false, true]));
        let p = tape.attention_probs(out).unwrap();
        assert_eq!(p[1], 0.0);
        // two-column softmax by hand
        let s0 = (0.3 - 0.2) / 2f64.sqrt();
        let s2 = (-1.0 - 4.0) / 2f64.sqrt();
        let p0 = s0.exp() / (s0.exp() + s2.exp());
        assert!((p[0] - p0).abs() < 1e-15);
        let o = tape.value(out).data();
        assert!((o[0] - (p0 + 2.0 * (1.0 - p0))).abs() < 1e-14);
    }

    #[test]
    fn gather_rowmix_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, vec![4, 3]);
        let y = rand_tensor(&mut rng, vec![2, 3]);
        let index: Arc<[u32]> = vec![0, 5, GATHER_NONE, 11, 5, 2, 17, GATHER_NONE, 8].into();
        let mut b = RowMix::builder(4);
        b.push(0, 0.25);
        b.push(3, 0.75);
        b.end_row();
        b.end_row();
        b.push(2, -1.5);
        b.end_row();
        let mix = Arc::new(b.build());
        check_grad(vec![x, y], move |t, v| {
            let c = t.concat_rows(&[v[0], v[1]]);
            let g = t.gather(c, index.clone(), vec![3, 3]);
            let m = t.row_mix(v[0], mix.clone());
            let s = t.add(g, m);
            t.reshape(s, vec![9])
        });
    }
}
