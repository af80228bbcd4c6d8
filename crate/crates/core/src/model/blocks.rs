//! Degradation context extraction (DCE) and context fusion (CF) blocks.

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Init, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::tensor::{Scalar, Tape, Var};

/// Projects the context-pair tokens to width `C^l`, normalizes them and
/// lets them attend to each other.
#[derive(Clone, Debug)]
pub struct DceBlock {
    pub proj: Linear,
    pub ln: LayerNorm,
    /// `None` in the no-DCE ablation.
    pub attn: Option<MultiHeadAttention>,
}

impl DceBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        embed_dim: usize,
        width: usize,
        heads: usize,
        use_mhsa: bool,
    ) -> Result<Self> {
        let proj = Linear::new(store, init, &format!("{prefix}.proj"), embed_dim, width);
        let ln = LayerNorm::new(store, &format!("{prefix}.ln"), width);
        let attn = if use_mhsa {
            Some(MultiHeadAttention::new(store, init, &format!("{prefix}.attn"), width, heads)?)
        } else {
            None
        };
        Ok(DceBlock { proj, ln, attn })
    }

    pub fn width(&self) -> usize {
        self.proj.out_dim
    }

    /// `E_C[2L×D] → O_DCE[2L×C]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, context: Var) -> Result<Var> {
        let projected = self.proj.forward(tape, p, context)?;
        let projected = tape.gelu(projected);
        let normed = self.ln.forward(tape, p, projected)?;
        match &self.attn {
            Some(attn) => attn.self_attend(tape, p, normed),
            None => Ok(normed),
        }
    }
}

/// Injects DCE output into a decoder feature map through cross-attention
/// with the features as queries, then merges the result back to `K^l`
/// channels.
#[derive(Clone, Debug)]
pub struct CfBlock {
    pub in_proj: Conv2d,
    pub ln_feat: LayerNorm,
    pub ln_ctx: LayerNorm,
    /// `None` in the no-CF ablation (interpolate + multiply instead).
    pub attn: Option<MultiHeadAttention>,
    pub out_proj: Conv2d,
    pub post_merge: Conv2d,
}

/// CF result with the intermediate maps kept for inspection.
pub struct CfOutput {
    /// Merged map, `K^l×H^l×W^l`.
    pub output: Var,
    /// `O_CF`, `C^l×H^l×W^l`.
    pub fused: Var,
    /// Per-head `[H·W × 2L]` attention weights when cross-attention is on.
    pub attention: Vec<Var>,
}

/// Nearest-neighbour index map from `out` rows onto `src` rows.
pub fn nearest_token_index(src: usize, out: usize) -> Vec<usize> {
    (0..out).map(|i| (i * src / out).min(src - 1)).collect()
}

impl CfBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        feat_channels: usize,
        width: usize,
        heads: usize,
        use_mhca: bool,
    ) -> Result<Self> {
        let in_proj = Conv2d::new(store, init, &format!("{prefix}.in_proj"), feat_channels, width, 1, 1);
        let ln_feat = LayerNorm::new(store, &format!("{prefix}.ln_feat"), width);
        let ln_ctx = LayerNorm::new(store, &format!("{prefix}.ln_ctx"), width);
        let attn = if use_mhca {
            Some(MultiHeadAttention::new(store, init, &format!("{prefix}.attn"), width, heads)?)
        } else {
            None
        };
        let out_proj = Conv2d::new(store, init, &format!("{prefix}.out_proj"), width, width, 3, 1);
        let post_merge = Conv2d::new(
            store,
            init,
            &format!("{prefix}.post_merge"),
            feat_channels + width,
            feat_channels,
            1,
            1,
        );
        Ok(CfBlock {
            in_proj,
            ln_feat,
            ln_ctx,
            attn,
            out_proj,
            post_merge,
        })
    }

    pub fn width(&self) -> usize {
        self.in_proj.c_out
    }

    /// `F[K×H×W]`, `O_DCE[2L×C] → [K×H×W]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        features: Var,
        context: Var,
    ) -> Result<CfOutput> {
        let (k, h, w) = match tape.shape(features) {
            &[k, h, w] if k == self.in_proj.c_in => (k, h, w),
            s => return Err(Error::shape("cf_forward", s, &[self.in_proj.c_in, 0, 0])),
        };
        let c = self.width();
        match tape.shape(context) {
            &[_, cc] if cc == c => {}
            s => return Err(Error::shape("cf_forward", s, &[0, c])),
        }
        let projected = self.in_proj.forward(tape, p, features)?;
        let projected = tape.gelu(projected);
        // RH: [C×H×W] → [H·W × C]
        let flat = tape.reshape(projected, &[c, h * w])?;
        let tokens = tape.transpose(flat)?;
        let tokens = self.ln_feat.forward(tape, p, tokens)?;
        let ctx = self.ln_ctx.forward(tape, p, context)?;
        let (mixed, attention) = match &self.attn {
            Some(attn) => {
                let out = attn.attend(tape, p, tokens, ctx)?;
                (out.output, out.weights)
            }
            None => {
                let n_ctx = tape.shape(ctx)[0];
                let idx = nearest_token_index(n_ctx, h * w);
                let stretched = tape.gather_rows(ctx, &idx)?;
                (tape.mul(tokens, stretched)?, Vec::new())
            }
        };
        let back = tape.transpose(mixed)?;
        let back = tape.reshape(back, &[c, h, w])?;
        let fused = self.out_proj.forward(tape, p, back)?;
        let fused = tape.gelu(fused);
        let merged = tape.concat_channels(&[features, fused])?;
        let output = self.post_merge.forward(tape, p, merged)?;
        debug_assert_eq!(tape.shape(output), &[k, h, w]);
        Ok(CfOutput {
            output,
            fused,
            attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamId;
    use crate::tensor::Tensor;

    fn set(store: &mut ParamStore<f64>, id: ParamId, shape: &[usize], v: &[f64]) {
        store.set(id, Tensor::from_f64(shape, v).unwrap()).unwrap();
    }

    #[test]
    fn dce_hand_value() {
        // proj = I, LN over [gelu(1), gelu(3)] and the constant row [gelu(2)]·2,
        // zero query/key weights give uniform attention, so both output rows
        // are the mean of the normalized rows.
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(0);
        let dce = DceBlock::new(&mut store, &mut init, "dce", 2, 2, 1, true).unwrap();
        let eye = [1.0, 0.0, 0.0, 1.0];
        set(&mut store, dce.proj.weight, &[2, 2], &eye);
        let attn = dce.attn.as_ref().unwrap();
        set(&mut store, attn.wq.weight, &[2, 2], &[0.0; 4]);
        set(&mut store, attn.wk.weight, &[2, 2], &[0.0; 4]);
        set(&mut store, attn.wv.weight, &[2, 2], &eye);
        set(&mut store, attn.wo.weight, &[2, 2], &eye);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let e = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 3.0, 2.0, 2.0]).unwrap());
        let out = dce.forward(&mut tape, &p, e).unwrap();
        let h = 0.499997845920929;
        for (a, b) in tape.value(out).data().iter().zip([-h, h, -h, h]) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn cf_single_pixel_single_token_hand_value() {
        // One context token makes attention weight 1, so the MHCA output is
        // wo(wv(ln_ctx([0, 2]))) = [-a, a] with a = 1/√(1 + 1e-5). The centre
        // tap of out_proj is I, and post_merge [1, -1, 1] turns
        // [f, gelu(-a), gelu(a)] into f + a.
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(0);
        let cf = CfBlock::new(&mut store, &mut init, "cf", 1, 2, 1, true).unwrap();
        let eye = [1.0, 0.0, 0.0, 1.0];
        let attn = cf.attn.as_ref().unwrap();
        set(&mut store, attn.wv.weight, &[2, 2], &eye);
        set(&mut store, attn.wo.weight, &[2, 2], &eye);
        let mut k = vec![0.0; 2 * 2 * 9];
        k[4] = 1.0;
        k[(2 + 1) * 9 + 4] = 1.0;
        set(&mut store, cf.out_proj.weight, &[2, 2, 3, 3], &k);
        set(&mut store, cf.post_merge.weight, &[1, 3, 1, 1], &[1.0, -1.0, 1.0]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let f = tape.constant(Tensor::from_f64(&[1, 1, 1], &[0.3]).unwrap());
        let ctx = tape.constant(Tensor::from_f64(&[1, 2], &[0.0, 2.0]).unwrap());
        let out = cf.forward(&mut tape, &p, f, ctx).unwrap();
        assert_eq!(tape.shape(out.output), &[1, 1, 1]);
        assert!((tape.value(out.output).data()[0] - 1.2999950000375).abs() < 1e-12);
    }

    #[test]
    fn shape_contracts_hold() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(2);
        let dce = DceBlock::new(&mut store, &mut init, "dce", 16, 4, 2, true).unwrap();
        let cf = CfBlock::new(&mut store, &mut init, "cf", 8, 4, 2, true).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let e = tape.constant(Tensor::full(&[16, 16], 0.1));
        let o = dce.forward(&mut tape, &p, e).unwrap();
        assert_eq!(tape.shape(o), &[16, 4]);
        let f = tape.constant(Tensor::full(&[8, 4, 4], 0.2));
        let out = cf.forward(&mut tape, &p, f, o).unwrap();
        assert_eq!(tape.shape(out.output), &[8, 4, 4]);
        assert_eq!(tape.shape(out.fused), &[4, 4, 4]);
        assert_eq!(out.attention.len(), 2);
        let bad = tape.constant(Tensor::full(&[16, 5], 0.1));
        assert!(cf.forward(&mut tape, &p, f, bad).is_err());
    }

    #[test]
    fn nearest_index_covers_both_directions() {
        assert_eq!(nearest_token_index(2, 4), vec![0, 0, 1, 1]);
        assert_eq!(nearest_token_index(4, 2), vec![0, 2]);
        assert_eq!(nearest_token_index(34, 16).len(), 16);
        assert!(nearest_token_index(34, 1024).iter().all(|&i| i < 34));
    }
}
