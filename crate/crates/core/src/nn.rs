//! Parameterized layers on top of the tape: linear projections, layer norm,
//! convolutions and multi-head self/cross attention.

use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, addressed by [`ParamId`] in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Registers a tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// `(name, id)` pairs sorted by dotted path.
    pub fn sorted_names(&self) -> Vec<(&str, ParamId)> {
        let mut v: Vec<_> = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), ParamId(i)))
            .collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Records every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }

    /// Records every parameter as a constant (inference, frozen modules).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    /// Adds the tape gradients of a bound forward pass into each tensor's
    /// `grad` buffer, scaled by `weight`.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &Bound, weight: T) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            let n = t.numel();
            let acc = t.grad.get_or_insert_with(|| vec![T::zero(); n]);
            if let Some(g) = tape.grad(v) {
                acc.iter_mut().zip(g).for_each(|(a, &d)| *a = *a + weight * d);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Replaces the value of a parameter, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = &self.tensors[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", cur.shape(), value.shape()));
        }
        self.tensors[id.0] = value.with_requires_grad(true);
        Ok(())
    }
}

/// Tape handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps handles already on a tape, one per parameter in id order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Seeded parameter initializer. Values are drawn in `f64` so stores of
/// either precision built from the same seed hold the same numbers.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(self.rng.gen_range(-bound..=bound)))
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Uniform(±1/√fan_in).
    pub fn fan_in<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.uniform(shape, (3.0 / fan_in as f64).sqrt())
    }
}

/// `y = x·Wᵀ + b` applied to every token row.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.fan_in(&[out_dim, in_dim], in_dim),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::shape("linear", shape, &[self.out_dim, self.in_dim]));
        }
        let y = tape.matmul_nt(x, p[self.weight])?;
        tape.add_row_bias(y, p[self.bias])
    }
}

/// Affine layer norm over the channel axis of a token matrix.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], LN_EPS)
    }
}

/// Square-kernel convolution with bias; `k ∈ {1, 3}`, stride 1 or 2.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.fan_in(&[c_out, c_in, k, k], c_in * k * k),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Conv2d {
            weight,
            bias,
            c_in,
            c_out,
            k,
            stride,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.weight], p[self.bias], self.stride)
    }
}

/// Multi-head scaled dot-product attention without positional encoding.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

/// Output of an attention call together with each head's weight matrix.
pub struct AttentionOutput {
    pub output: Var,
    /// One `[t_q × t_kv]` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(store, init, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(store, init, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(store, init, &format!("{name}.wv"), dim, dim),
            wo: Linear::new(store, init, &format!("{name}.wo"), dim, dim),
            heads,
            head_dim: dim / heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// MHSA: queries, keys and values all come from `x`.
    pub fn self_attend<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.attend(tape, p, x, x)?.output)
    }

    /// MHCA: queries from `query`, keys and values from `context`.
    pub fn cross_attend<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        query: Var,
        context: Var,
    ) -> Result<Var> {
        Ok(self.attend(tape, p, query, context)?.output)
    }

    pub fn attend<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        query: Var,
        context: Var,
    ) -> Result<AttentionOutput> {
        let q = self.wq.forward(tape, p, query)?;
        let k = self.wk.forward(tape, p, context)?;
        let v = self.wv.forward(tape, p, context)?;
        let scale = T::lit(1.0 / (self.head_dim as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice(q, 1, start, self.head_dim)?,
                    tape.slice(k, 1, start, self.head_dim)?,
                    tape.slice(v, 1, start, self.head_dim)?,
                )
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores)?;
            heads.push(tape.attend(attn, vh)?);
            weights.push(attn);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        };
        let output = self.wo.forward(tape, p, merged)?;
        Ok(AttentionOutput { output, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_linear(w: &[f64], b: &[f64], out_dim: usize, in_dim: usize) -> (ParamStore<f64>, Linear) {
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        let lin = Linear::new(&mut store, &mut init, "lin", in_dim, out_dim);
        store.set(lin.weight, Tensor::from_f64(&[out_dim, in_dim], w).unwrap()).unwrap();
        store.set(lin.bias, Tensor::from_f64(&[out_dim], b).unwrap()).unwrap();
        (store, lin)
    }

    #[test]
    fn linear_hand_value() {
        let (store, lin) = store_with_linear(&[1.0, 1.0], &[0.5], 1, 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[2.0, 3.0]).unwrap());
        let y = lin.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.5]);
    }

    #[test]
    fn linear_identity_passthrough() {
        let (store, lin) = store_with_linear(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], 2, 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xt = Tensor::from_f64(&[3, 2], &[1.0, -2.0, 0.5, 4.0, 3.0, 3.0]).unwrap();
        let x = tape.constant(xt.clone());
        let y = lin.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y), &xt);
    }

    #[test]
    fn linear_width_mismatch_is_error() {
        let (store, lin) = store_with_linear(&[1.0, 1.0], &[0.0], 1, 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::<f64>::zeros(&[1, 3]));
        assert!(matches!(lin.forward(&mut tape, &p, x), Err(Error::Shape { .. })));
    }

    /// One-head width-1 attention with scalar weights `(q, k, v, o)` and
    /// value bias `bv`.
    fn scalar_attention(q: f64, k: f64, v: f64, o: f64, bv: f64) -> (ParamStore<f64>, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        let att = MultiHeadAttention::new(&mut store, &mut init, "att", 1, 1).unwrap();
        for (lin, w, b) in [(&att.wq, q, 0.0), (&att.wk, k, 0.0), (&att.wv, v, bv), (&att.wo, o, 0.0)] {
            store.set(lin.weight, Tensor::from_f64(&[1, 1], &[w]).unwrap()).unwrap();
            store.set(lin.bias, Tensor::from_f64(&[1], &[b]).unwrap()).unwrap();
        }
        (store, att)
    }

    #[test]
    fn mhsa_two_token_hand_value() {
        // q = 2x, k = x, v = x + 1, o = 3·(·); x = [0, 1]
        // row 0: scores [0, 0] → mean of v = 1.5 → 4.5
        // row 1: scores [0, 2] → (1 + 2e²)/(1 + e²) → ×3
        let (store, att) = scalar_attention(2.0, 1.0, 1.0, 3.0, 1.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_f64(&[2, 1], &[0.0, 1.0]).unwrap());
        let y = att.self_attend(&mut tape, &p, x).unwrap();
        let e2 = 2f64.exp();
        let expect = [4.5, 3.0 * (1.0 + 2.0 * e2) / (1.0 + e2)];
        for (a, b) in tape.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn mhca_one_query_two_context_hand_value() {
        // scores [0, 1], values [0, 1] → e/(1 + e)
        let (store, att) = scalar_attention(1.0, 1.0, 1.0, 1.0, 0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let q = tape.constant(Tensor::from_f64(&[1, 1], &[1.0]).unwrap());
        let c = tape.constant(Tensor::from_f64(&[2, 1], &[0.0, 1.0]).unwrap());
        let y = att.cross_attend(&mut tape, &p, q, c).unwrap();
        let e = 1f64.exp();
        assert!((tape.value(y).data()[0] - e / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn singleton_key_passes_value_through() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(4);
        let att = MultiHeadAttention::new(&mut store, &mut init, "att", 4, 2).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let ctx = tape.constant(Tensor::from_f64(&[1, 4], &[0.3, -0.2, 0.9, 0.1]).unwrap());
        let v = att.wv.forward(&mut tape, &p, ctx).unwrap();
        let direct = att.wo.forward(&mut tape, &p, v).unwrap();
        let q = tape.constant(Tensor::from_f64(&[3, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let out = att.cross_attend(&mut tape, &p, q, ctx).unwrap();
        let want = tape.value(direct).data().to_vec();
        for row in tape.value(out).data().chunks(4) {
            for (a, b) in row.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let single = att.self_attend(&mut tape, &p, ctx).unwrap();
        assert_eq!(tape.value(single).data(), &want[..]);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(1);
        assert!(MultiHeadAttention::new(&mut store, &mut init, "a", 6, 4).is_err());
    }

    #[test]
    fn sorted_names_are_lexicographic() {
        let mut store = ParamStore::<f32>::new();
        store.add("b.x", Tensor::zeros(&[1]));
        store.add("a.y", Tensor::zeros(&[1]));
        let names: Vec<_> = store.sorted_names().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["a.y", "b.x"]);
    }
}
