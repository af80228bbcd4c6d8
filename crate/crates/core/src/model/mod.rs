//! The restoration network: a residual convolutional U-Net whose decoder
//! levels each receive degradation context through a DCE/CF pair.

mod blocks;
mod checkpoint;
mod config;

pub use blocks::{nearest_token_index, CfBlock, CfOutput, DceBlock};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, AWCK_MAGIC, AWCK_VERSION};
pub use config::{Ablation, ModelConfig, Variant};

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Init, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// `x + conv(gelu(conv(x)))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, prefix: &str, ch: usize) -> Self {
        ResBlock {
            conv1: Conv2d::new(store, init, &format!("{prefix}.conv1"), ch, ch, 3, 1),
            conv2: Conv2d::new(store, init, &format!("{prefix}.conv2"), ch, ch, 3, 1),
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        let h = self.conv2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

fn run_blocks<T: Scalar>(blocks: &[ResBlock], tape: &mut Tape<T>, p: &Bound, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(tape, p, x)?;
    }
    Ok(x)
}

/// Convolutional U-Net trunk. Level `l` runs at `H/2^l` with `K^l` channels.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: Conv2d,
    pub encoder: Vec<Vec<ResBlock>>,
    pub down: Vec<Conv2d>,
    pub bottleneck: Vec<ResBlock>,
    /// Indexed by the level being entered; entry `num_levels-1` is unused.
    pub up: Vec<Option<Conv2d>>,
    pub skip_merge: Vec<Option<Conv2d>>,
    pub decoder: Vec<Vec<ResBlock>>,
    pub head: Conv2d,
}

impl Backbone {
    fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, cfg: &ModelConfig) -> Self {
        let k = &cfg.backbone_channels;
        let n = cfg.num_levels;
        let blocks = |store: &mut ParamStore<T>, init: &mut Init, prefix: String, ch: usize| {
            (0..cfg.blocks_per_level)
                .map(|b| ResBlock::new(store, init, &format!("{prefix}.{b}"), ch))
                .collect::<Vec<_>>()
        };
        let stem = Conv2d::new(store, init, "backbone.stem", 3, k[0], 3, 1);
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for l in 0..n - 1 {
            encoder.push(blocks(store, init, format!("backbone.enc.{l}"), k[l]));
            down.push(Conv2d::new(store, init, &format!("backbone.down.{l}"), k[l], k[l + 1], 3, 2));
        }
        let bottleneck = blocks(store, init, "backbone.bottleneck".into(), k[n - 1]);
        let mut up = Vec::new();
        let mut skip_merge = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..n {
            if l + 1 < n {
                up.push(Some(Conv2d::new(store, init, &format!("backbone.up.{l}"), k[l + 1], k[l], 1, 1)));
                skip_merge.push(Some(Conv2d::new(
                    store,
                    init,
                    &format!("backbone.merge.{l}"),
                    2 * k[l],
                    k[l],
                    1,
                    1,
                )));
            } else {
                up.push(None);
                skip_merge.push(None);
            }
            decoder.push(blocks(store, init, format!("backbone.dec.{l}"), k[l]));
        }
        let head = Conv2d::new(store, init, "backbone.head", k[0], 3, 3, 1);
        Backbone {
            stem,
            encoder,
            down,
            bottleneck,
            up,
            skip_merge,
            decoder,
            head,
        }
    }
}

/// Everything produced by one forward pass.
pub struct ForwardOutput {
    /// Restored image (unclamped), `3×H×W`.
    pub output: Var,
    /// `O_DCE^l` per level (`None` where no fusion happens).
    pub dce: Vec<Option<Var>>,
    /// `O_CF^l` per level.
    pub fused: Vec<Option<Var>>,
    /// Cross-attention weights per level and head.
    pub attention: Vec<Vec<Var>>,
}

/// The full network with its parameters.
#[derive(Clone, Debug)]
pub struct AwracleNet<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub backbone: Backbone,
    pub dce: Vec<Option<DceBlock>>,
    pub cf: Vec<Option<CfBlock>>,
}

impl<T: Scalar> AwracleNet<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(config.seed);
        let backbone = Backbone::new(&mut params, &mut init, &config);
        if config.zero_init_head {
            params.set(backbone.head.weight, Tensor::zeros(params.get(backbone.head.weight).shape()))?;
        }
        let fusion = config.fusion_levels();
        let mut dce = Vec::new();
        let mut cf = Vec::new();
        for l in 0..config.num_levels {
            if fusion.contains(&l) {
                let c = config.dce_channels[l];
                dce.push(Some(DceBlock::new(
                    &mut params,
                    &mut init,
                    &format!("dce.{l}"),
                    config.embed_dim,
                    c,
                    config.heads,
                    config.ablation.use_dce_mhsa,
                )?));
                cf.push(Some(CfBlock::new(
                    &mut params,
                    &mut init,
                    &format!("cf.{l}"),
                    config.backbone_channels[l],
                    c,
                    config.heads,
                    config.ablation.use_cf_mhca,
                )?));
            } else {
                dce.push(None);
                cf.push(None);
            }
        }
        Ok(AwracleNet {
            config,
            params,
            backbone,
            dce,
            cf,
        })
    }

    /// Rebuilds the architecture for `config` and loads `params` into it,
    /// checking every name and shape.
    pub fn from_params(config: ModelConfig, params: &ParamStore<T>) -> Result<Self> {
        let mut net = Self::new(config)?;
        if net.params.len() != params.len() {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "expected {} tensors for this configuration, found {}",
                    net.params.len(),
                    params.len()
                ),
            ));
        }
        let ids: Vec<_> = net.params.ids().collect();
        for id in ids {
            let name = net.params.name(id).to_string();
            let src = params
                .find(&name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
            net.params
                .set(id, params.get(src).clone())
                .map_err(|e| Error::format("checkpoint", format!("{name}: {e}")))?;
        }
        Ok(net)
    }

    pub fn uses_context(&self) -> bool {
        self.config.ablation.use_context
    }

    /// Deterministically ordered `(name, tensor)` list of trainable parameters.
    pub fn collect_parameters(&self) -> Vec<(&str, &Tensor<T>)> {
        self.params
            .sorted_names()
            .into_iter()
            .map(|(n, id)| (n, self.params.get(id)))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_elements()
    }

    fn check_context(&self, tape: &Tape<T>, context: Option<Var>) -> Result<Option<Var>> {
        if !self.uses_context() {
            return Ok(None);
        }
        let ctx = context.ok_or_else(|| {
            Error::Usage("this model needs a context embedding (2L×D)".into())
        })?;
        let expect = [2 * self.config.embed_tokens, self.config.embed_dim];
        if tape.shape(ctx) != expect {
            return Err(Error::shape("model_forward", tape.shape(ctx), &expect));
        }
        Ok(Some(ctx))
    }

    /// `I_q[3×H×W]` and `E_C[2L×D]` to the restored image (residual added,
    /// not clamped).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        image: Var,
        context: Option<Var>,
    ) -> Result<ForwardOutput> {
        let (h, w) = match tape.shape(image) {
            &[3, h, w] => (h, w),
            s => return Err(Error::shape("model_forward", s, &[3, 0, 0])),
        };
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Indivisible { h, w, multiple: m });
        }
        let context = self.check_context(tape, context)?;
        let n = self.config.num_levels;
        let bb = &self.backbone;

        let mut x = bb.stem.forward(tape, p, image)?;
        let mut skips = Vec::with_capacity(n);
        for l in 0..n - 1 {
            x = run_blocks(&bb.encoder[l], tape, p, x)?;
            skips.push(x);
            x = bb.down[l].forward(tape, p, x)?;
        }
        x = run_blocks(&bb.bottleneck, tape, p, x)?;

        let mut dce_out = vec![None; n];
        let mut fused = vec![None; n];
        let mut attention = vec![Vec::new(); n];
        for l in (0..n).rev() {
            if let (Some(up), Some(merge)) = (&bb.up[l], &bb.skip_merge[l]) {
                x = tape.upsample2x(x)?;
                x = up.forward(tape, p, x)?;
                x = tape.concat_channels(&[x, skips[l]])?;
                x = merge.forward(tape, p, x)?;
            }
            if let (Some(dce), Some(cf), Some(ctx)) = (&self.dce[l], &self.cf[l], context) {
                let o_dce = dce.forward(tape, p, ctx)?;
                let out = cf.forward(tape, p, x, o_dce)?;
                x = out.output;
                dce_out[l] = Some(o_dce);
                fused[l] = Some(out.fused);
                attention[l] = out.attention;
            }
            x = run_blocks(&bb.decoder[l], tape, p, x)?;
        }
        let residual = bb.head.forward(tape, p, x)?;
        let output = tape.add(image, residual)?;
        Ok(ForwardOutput {
            output,
            dce: dce_out,
            fused,
            attention,
        })
    }

    /// DCE outputs only (no backbone work), one per fusion level.
    pub fn dce_outputs(&self, context: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let ctx = tape.constant(context.clone());
        let ctx = self
            .check_context(&tape, Some(ctx))?
            .ok_or_else(|| Error::Usage("baseline model has no DCE blocks".into()))?;
        self.dce
            .iter()
            .map(|b| match b {
                Some(b) => {
                    let out = b.forward(&mut tape, &p, ctx)?;
                    Ok(Some(tape.value(out).clone()))
                }
                None => Ok(None),
            })
            .collect()
    }

    /// Inference: no gradients, output clamped to `[0, 1]`.
    pub fn restore(&self, image: &Tensor<T>, context: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let img = tape.constant(image.clone());
        let ctx = context.map(|c| tape.constant(c.clone()));
        let out = self.forward(&mut tape, &p, img, ctx)?;
        let mut y = tape.value(out.output).clone();
        y.data_mut()
            .iter_mut()
            .for_each(|v| *v = v.max(T::zero()).min(T::one()));
        Ok(y)
    }

    pub fn cast<U: Scalar>(&self) -> AwracleNet<U> {
        AwracleNet {
            config: self.config.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            dce: self.dce.clone(),
            cf: self.cf.clone(),
        }
    }
}
