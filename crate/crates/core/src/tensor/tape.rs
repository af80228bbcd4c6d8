//! Wengert-style tape: every op appends a node holding its value and the
//! information its backward rule needs. Nodes are appended in evaluation
//! order, so a reverse sweep visits each node after all of its consumers.

use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Attend { p: usize, v: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddRowBias { x: usize, bias: usize },
    Gelu(usize),
    Map { x: usize, df: fn(T) -> T },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(usize),
    Conv {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    Reshape(usize),
    Transpose(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    Upsample2x(usize),
    Sum(usize),
    Mean(usize),
    L1 { a: usize, b: usize },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    /// Accumulated gradient of a `requires_grad` leaf.
    grad: Option<Vec<T>>,
}

/// Records operations for one forward pass and replays them backwards.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn slot<'a, T: Scalar>(adj: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], j: usize) -> &'a mut Vec<T> {
    adj[j].get_or_insert_with(|| vec![T::zero(); nodes[j].value.numel()])
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input; it receives gradients iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad;
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(false, false, m, n, k, self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0, trans_b: false }, &[a.0, b.0]))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(false, true, m, n, k, self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0, trans_b: true }, &[a.0, b.0]))
    }

    /// Attention read-out `p[tq×tk] · v[tk×d]` where every output element
    /// sums its `tk` terms in canonical order, making the result invariant
    /// to a joint permutation of the key axis.
    pub fn attend(&mut self, p: Var, v: Var) -> Result<Var> {
        let (tq, tk) = self.dims2(p, "attend")?;
        let (tk2, d) = self.dims2(v, "attend")?;
        if tk != tk2 {
            return Err(Error::shape("attend", self.shape(p), self.shape(v)));
        }
        let pd = self.value(p).data();
        let vd = self.value(v).data();
        let mut out = vec![T::zero(); tq * d];
        let mut terms = vec![T::zero(); tk];
        for i in 0..tq {
            let prow = &pd[i * tk..(i + 1) * tk];
            for c in 0..d {
                for (j, t) in terms.iter_mut().enumerate() {
                    *t = prow[j] * vd[j * d + c];
                }
                out[i * d + c] = kernels::canonical_sum(&mut terms);
            }
        }
        Ok(self.push(vec![tq, d], out, Op::Attend { p: p.0, v: v.0 }, &[p.0, v.0]))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).data().iter().map(|&x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a.0, c), &[a.0])
    }

    /// `x[t×c] + bias[c]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (t, c) = self.dims2(x, "add_row_bias")?;
        if self.value(bias).numel() != c {
            return Err(Error::shape("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..t {
            for (o, &bv) in out[r * c..(r + 1) * c].iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        Ok(self.push(vec![t, c], out, Op::AddRowBias { x: x.0, bias: bias.0 }, &[x.0, bias.0]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).data().iter().map(|&v| kernels::gelu_scalar(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x.0), &[x.0])
    }

    /// Elementwise `f` with a caller-supplied derivative `df`.
    pub fn map(&mut self, x: Var, f: fn(T) -> T, df: fn(T) -> T) -> Var {
        let out = self.value(x).data().iter().map(|&v| f(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Map { x: x.0, df }, &[x.0])
    }

    // ---- normalization --------------------------------------------------

    /// Row-wise layer norm over the last axis of `x[t×c]` (population variance).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Param(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (t, c) = self.dims2(x, "layer_norm")?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (y, xhat, rstd) = kernels::layer_norm_rows(
            self.value(x).data(),
            t,
            c,
            self.value(gamma).data(),
            self.value(beta).data(),
            T::lit(eps),
        );
        let op = Op::LayerNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            xhat,
            rstd,
        };
        Ok(self.push(vec![t, c], y, op, &[x.0, gamma.0, beta.0]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "softmax_rows")?;
        let out = kernels::softmax_rows(self.value(x).data(), r, c);
        Ok(self.push(vec![r, c], out, Op::Softmax(x.0), &[x.0]))
    }

    // ---- convolution ----------------------------------------------------

    /// Cross-correlation of `x[c_in×h×w]` with `kernel[c_out×c_in×k×k]`,
    /// zero padding `k/2`, stride 1 or 2.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let (c_in, h, w) = match self.shape(x) {
            &[c, h, w] => (c, h, w),
            s => return Err(Error::shape("conv2d", s, &[0, 0, 0])),
        };
        let (c_out, kc, k) = match self.shape(kernel) {
            &[o, i, k1, k2] if k1 == k2 => (o, i, k1),
            s => return Err(Error::shape("conv2d", s, &[0, c_in, 0, 0])),
        };
        if kc != c_in {
            return Err(Error::shape("conv2d", self.shape(x), self.shape(kernel)));
        }
        if !(k == 1 || k == 3) || !(stride == 1 || stride == 2) {
            return Err(Error::Param(format!(
                "conv2d supports k in {{1,3}} and stride in {{1,2}}, got k={k} stride={stride}"
            )));
        }
        if self.value(bias).numel() != c_out {
            return Err(Error::shape("conv2d", self.shape(kernel), self.shape(bias)));
        }
        let geom = ConvGeom::new(c_in, h, w, c_out, k, stride);
        let npix = geom.out_pixels();
        let cols = if geom.is_pointwise() {
            None
        } else {
            Some(kernels::im2col(self.value(x).data(), &geom))
        };
        let mut out = vec![T::zero(); c_out * npix];
        {
            let patches = cols.as_deref().unwrap_or_else(|| self.value(x).data());
            kernels::gemm(
                false,
                false,
                c_out,
                npix,
                geom.patch_len(),
                self.value(kernel).data(),
                patches,
                T::zero(),
                &mut out,
            );
        }
        for (o, &b) in out.chunks_exact_mut(npix).zip(self.value(bias).data()) {
            o.iter_mut().for_each(|v| *v = *v + b);
        }
        let keep_cols = self.nodes[kernel.0].needs_grad;
        let op = Op::Conv {
            x: x.0,
            w: kernel.0,
            b: bias.0,
            geom,
            cols: if keep_cols { cols } else { None },
        };
        Ok(self.push(vec![c_out, geom.oh, geom.ow], out, op, &[x.0, kernel.0, bias.0]))
    }

    /// Nearest-neighbour 2× upsampling of `x[c×h×w]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            &[c, h, w] => (c, h, w),
            s => return Err(Error::shape("upsample2x", s, &[0, 0, 0])),
        };
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(vec![c, oh, ow], out, Op::Upsample2x(x.0), &[x.0]))
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).data().to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x.0), &[x.0]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let mut out = vec![T::zero(); r * c];
        kernels::transpose(self.value(x).data(), r, c, &mut out);
        Ok(self.push(vec![c, r], out, Op::Transpose(x.0), &[x.0]))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let (_, mid, _) = axis_split(self.shape(p), axis);
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * mid * inner..(o + 1) * mid * inner]);
            }
        }
        let idx: Vec<usize> = parts.iter().map(|v| v.0).collect();
        Ok(self.push(shape, out, Op::Concat { inputs: idx.clone(), axis }, &idx))
    }

    /// Row-wise concatenation of token matrices (axis 0).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, 0)
    }

    /// Channel concatenation of feature maps `[c×h×w]` (axis 0).
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, 0)
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let (outer, mid, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.push(oshape, out, Op::Slice { x: x.0, axis, start }, &[x.0]))
    }

    /// Inverse of [`Tape::concat_rows`] for the given block sizes.
    pub fn split_rows(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        if sizes.iter().sum::<usize>() != self.shape(x)[0] {
            return Err(Error::shape("split_rows", self.shape(x), sizes));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, 0, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Rows of `x[n×c]` picked by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2(x, "gather_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("gather_rows", self.shape(x), &[idx.len()]));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let op = Op::GatherRows {
            x: x.0,
            idx: idx.to_vec(),
        };
        Ok(self.push(vec![idx.len(), c], out, op, &[x.0]))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).numel() as f64);
        let s = self.value(x).data().iter().copied().sum::<T>() / n;
        self.push(vec![1], vec![s], Op::Mean(x.0), &[x.0])
    }

    /// Mean absolute error; the subgradient at zero difference is 0.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "l1_loss")?;
        let n = T::lit(self.value(pred).numel() as f64);
        let s = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<T>()
            / n;
        Ok(self.push(vec![1], vec![s], Op::L1 { a: pred.0, b: target.0 }, &[pred.0, target.0]))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &d)| *a = *a + d),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut adj);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].needs_grad;
        macro_rules! acc {
            ($j:expr) => {
                slot(adj, nodes, $j)
            };
        }
        let val = |j: usize| nodes[j].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (nodes[a].value.shape(), nodes[b].value.shape());
                let (m, k) = (sa[0], sa[1]);
                let n = if trans_b { sb[0] } else { sb[1] };
                if wants(a) {
                    let da = acc!(a);
                    // da[m×k] += g[m×n] · op(b)ᵀ
                    kernels::gemm(false, !trans_b, m, k, n, g, val(b), T::one(), da);
                }
                if wants(b) {
                    let db = acc!(b);
                    if trans_b {
                        // db[n×k] += gᵀ · a
                        kernels::gemm(true, false, n, k, m, g, val(a), T::one(), db);
                    } else {
                        // db[k×n] += aᵀ · g
                        kernels::gemm(true, false, k, n, m, val(a), g, T::one(), db);
                    }
                }
            }
            &Op::Attend { p, v } => {
                let (tq, tk) = (nodes[p].value.shape()[0], nodes[p].value.shape()[1]);
                let d = nodes[v].value.shape()[1];
                if wants(p) {
                    kernels::gemm(false, true, tq, tk, d, g, val(v), T::one(), acc!(p));
                }
                if wants(v) {
                    kernels::gemm(true, false, tk, d, tq, val(p), g, T::one(), acc!(v));
                }
            }
            &Op::Add(a, b) => {
                for (j, sign) in [(a, T::one()), (b, T::one())] {
                    if wants(j) {
                        acc!(j).iter_mut().zip(g).for_each(|(x, &d)| *x = *x + sign * d);
                    }
                }
            }
            &Op::Sub(a, b) => {
                for (j, sign) in [(a, T::one()), (b, -T::one())] {
                    if wants(j) {
                        acc!(j).iter_mut().zip(g).for_each(|(x, &d)| *x = *x + sign * d);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let other = val(b);
                    acc!(a)
                        .iter_mut()
                        .zip(g.iter().zip(other))
                        .for_each(|(x, (&d, &o))| *x = *x + d * o);
                }
                if wants(b) {
                    let other = val(a);
                    acc!(b)
                        .iter_mut()
                        .zip(g.iter().zip(other))
                        .for_each(|(x, (&d, &o))| *x = *x + d * o);
                }
            }
            &Op::Scale(a, c) => {
                if wants(a) {
                    acc!(a).iter_mut().zip(g).for_each(|(x, &d)| *x = *x + d * c);
                }
            }
            &Op::AddRowBias { x, bias } => {
                if wants(x) {
                    acc!(x).iter_mut().zip(g).for_each(|(a, &d)| *a = *a + d);
                }
                if wants(bias) {
                    let db = acc!(bias);
                    let c = db.len();
                    for row in g.chunks_exact(c) {
                        db.iter_mut().zip(row).for_each(|(a, &d)| *a = *a + d);
                    }
                }
            }
            &Op::Gelu(x) => {
                if wants(x) {
                    let xs = val(x);
                    acc!(x)
                        .iter_mut()
                        .zip(g.iter().zip(xs))
                        .for_each(|(a, (&d, &v))| *a = *a + d * kernels::gelu_grad_scalar(v));
                }
            }
            &Op::Map { x, df } => {
                if wants(x) {
                    let xs = val(x);
                    acc!(x)
                        .iter_mut()
                        .zip(g.iter().zip(xs))
                        .for_each(|(a, (&d, &v))| *a = *a + d * df(v));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let c = nodes[gamma].value.numel();
                let rows = g.len() / c;
                let gm = val(gamma);
                if wants(gamma) {
                    let dg = acc!(gamma);
                    for r in 0..rows {
                        for k in 0..c {
                            dg[k] = dg[k] + g[r * c + k] * xhat[r * c + k];
                        }
                    }
                }
                if wants(beta) {
                    let db = acc!(beta);
                    for row in g.chunks_exact(c) {
                        db.iter_mut().zip(row).for_each(|(a, &d)| *a = *a + d);
                    }
                }
                if wants(x) {
                    let dx = acc!(x);
                    let n = T::lit(c as f64);
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for k in 0..c {
                            let dh = gr[k] * gm[k];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hr[k];
                        }
                        mean_dh = mean_dh / n;
                        mean_dh_h = mean_dh_h / n;
                        for k in 0..c {
                            let dh = gr[k] * gm[k];
                            dx[r * c + k] =
                                dx[r * c + k] + rstd[r] * (dh - mean_dh - hr[k] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                if wants(x) {
                    let y = nodes[i].value.data();
                    let c = nodes[i].value.shape()[1];
                    let dx = acc!(x);
                    for r in 0..y.len() / c {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for k in 0..c {
                            dx[r * c + k] = dx[r * c + k] + yr[k] * (gr[k] - dot);
                        }
                    }
                }
            }
            Op::Conv {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                let npix = geom.out_pixels();
                let plen = geom.patch_len();
                if wants(w) {
                    let patches = cols.as_deref().unwrap_or_else(|| val(x));
                    kernels::gemm(false, true, geom.c_out, plen, npix, g, patches, T::one(), acc!(w));
                }
                if wants(b) {
                    let db = acc!(b);
                    for (o, row) in g.chunks_exact(npix).enumerate() {
                        db[o] = db[o] + row.iter().copied().sum::<T>();
                    }
                }
                if wants(x) {
                    if geom.is_pointwise() {
                        kernels::gemm(true, false, plen, npix, geom.c_out, val(w), g, T::one(), acc!(x));
                    } else {
                        let mut dcol = vec![T::zero(); plen * npix];
                        kernels::gemm(true, false, plen, npix, geom.c_out, val(w), g, T::zero(), &mut dcol);
                        kernels::col2im_add(&dcol, &geom, acc!(x));
                    }
                }
            }
            &Op::Upsample2x(x) => {
                if wants(x) {
                    let s = nodes[x].value.shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (oh, ow) = (2 * h, 2 * w);
                    let dx = acc!(x);
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let t = (ch * h + y / 2) * w + xx / 2;
                                dx[t] = dx[t] + g[(ch * oh + y) * ow + xx];
                            }
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if wants(x) {
                    acc!(x).iter_mut().zip(g).for_each(|(a, &d)| *a = *a + d);
                }
            }
            &Op::Transpose(x) => {
                if wants(x) {
                    let s = nodes[x].value.shape();
                    let (r, c) = (s[0], s[1]);
                    let dx = acc!(x);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = dx[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = nodes[i].value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &p in inputs {
                    let mid = nodes[p].value.shape()[*axis];
                    if wants(p) {
                        let dp = acc!(p);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + mid) * inner];
                            let dst = &mut dp[o * mid * inner..(o + 1) * mid * inner];
                            dst.iter_mut().zip(src).for_each(|(a, &d)| *a = *a + d);
                        }
                    }
                    offset += mid;
                }
            }
            &Op::Slice { x, axis, start } => {
                if wants(x) {
                    let (outer, mid, inner) = axis_split(nodes[x].value.shape(), axis);
                    let len = nodes[i].value.shape()[axis];
                    let dx = acc!(x);
                    for o in 0..outer {
                        let base = (o * mid + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dx[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &d)| *a = *a + d);
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                if wants(x) {
                    let c = nodes[x].value.shape()[1];
                    let dx = acc!(x);
                    for (r, &src) in idx.iter().enumerate() {
                        for k in 0..c {
                            dx[src * c + k] = dx[src * c + k] + g[r * c + k];
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if wants(x) {
                    acc!(x).iter_mut().for_each(|a| *a = *a + g[0]);
                }
            }
            &Op::Mean(x) => {
                if wants(x) {
                    let n = T::lit(nodes[x].value.numel() as f64);
                    acc!(x).iter_mut().for_each(|a| *a = *a + g[0] / n);
                }
            }
            &Op::L1 { a, b } => {
                let n = T::lit(nodes[a].value.numel() as f64);
                let scale = g[0] / n;
                let sign = |d: T| {
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                };
                let (va, vb) = (val(a), val(b));
                if wants(a) {
                    acc!(a)
                        .iter_mut()
                        .zip(va.iter().zip(vb))
                        .for_each(|(x, (&p, &t))| *x = *x + sign(p - t));
                }
                if wants(b) {
                    acc!(b)
                        .iter_mut()
                        .zip(va.iter().zip(vb))
                        .for_each(|(x, (&p, &t))| *x = *x - sign(p - t));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_hand_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t64(&[2, 1], &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
        let eye = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(m).data(), tape.value(a).data());
        let err = tape.matmul(b, b).unwrap_err().to_string();
        assert!(err.contains("[2, 1]"), "{err}");
    }

    #[test]
    fn gelu_at_unit_points() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[3], &[0.0, 1.0, -1.0]));
        let y = tape.gelu(x);
        let d = tape.value(y).data();
        assert_eq!(d[0], 0.0);
        // 0.5·(1 ± erf(1/√2)) with erf(1/√2) = 0.682689492137086
        assert!((d[1] - 0.841344746068543).abs() < 1e-12);
        assert!((d[2] + 0.158655253931457).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_two_element_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[2, 2], &[1.0, 3.0, 5.0, 5.0]));
        let g = tape.constant(t64(&[2], &[1.0, 1.0]));
        let b = tape.constant(t64(&[2], &[0.0, 0.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);
        assert_eq!(&d[2..], &[0.0, 0.0]);
        assert!(tape.layer_norm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[2, 2], &[0.0, 3f64.ln(), 7.0, 7.0]));
        let y = tape.softmax_rows(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
        assert_eq!(&d[2..], &[0.5, 0.5]);
    }

    #[test]
    fn pointwise_identity_conv() {
        let mut tape = Tape::<f64>::new();
        let x: Vec<f64> = (0..18).map(|i| i as f64 * 0.1).collect();
        let xv = tape.constant(t64(&[2, 3, 3], &x));
        let k = tape.constant(t64(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.conv2d(xv, k, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &x[..]);
    }

    #[test]
    fn box_kernel_on_delta() {
        let mut tape = Tape::<f64>::new();
        let mut img = vec![0.0; 16];
        img[0] = 1.0; // corner: box clipped to 2×2
        img[2 * 4 + 2] = 1.0;
        let x = tape.constant(t64(&[1, 4, 4], &img));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, 1).unwrap();
        #[rustfmt::skip]
        let expect = [
            1.0, 1.0, 0.0, 0.0,
            1.0, 2.0, 1.0, 1.0,
            0.0, 1.0, 1.0, 1.0,
            0.0, 1.0, 1.0, 1.0,
        ];
        assert_eq!(tape.value(y).data(), &expect);
        let k2 = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(tape.conv2d(x, k2, b, 1).is_err());
    }

    #[test]
    fn sum_and_l1_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[4], &[-2.0, 0.0, 3.0, 0.5]).with_requires_grad(true));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[4], &[-2.0, 0.0, 3.0, 0.5]).with_requires_grad(true));
        let z = tape.constant(Tensor::zeros(&[4]));
        let l = tape.l1_loss(x, z).unwrap();
        assert_eq!(tape.value(l).data(), &[5.5 / 4.0]);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[-0.25, 0.0, 0.25, 0.25]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let y = tape.scale(x, 3.0);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0, 6.0]);
        tape.zero_grad();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn layout_round_trips() {
        let mut tape = Tape::<f64>::new();
        let v: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.leaf(t64(&[4, 6], &v).with_requires_grad(true));
        let r = tape.reshape(x, &[4, 2, 3]).unwrap();
        let back = tape.reshape(r, &[4, 6]).unwrap();
        let tt = tape.transpose(back).unwrap();
        let tt = tape.transpose(tt).unwrap();
        assert_eq!(tape.value(tt).data(), &v[..]);
        let parts = tape.split_rows(tt, &[1, 3]).unwrap();
        let joined = tape.concat_rows(&parts).unwrap();
        assert_eq!(tape.value(joined).data(), &v[..]);
        let w: Vec<f64> = (0..24).map(|i| i as f64 * 0.5).collect();
        let w = tape.constant(t64(&[4, 6], &w));
        let prod = tape.mul(joined, w).unwrap();
        let s = tape.sum(prod);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), tape.value(w).data());
        assert!(tape.reshape(x, &[5, 5]).is_err());
    }
}
