use std::fmt;
use std::str::FromStr;

use crate::config::KeyValues;
use crate::error::{Error, Result};

/// Switches for the ablation study.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ablation {
    /// `false` removes every DCE/CF block (backbone-only baseline).
    pub use_context: bool,
    /// `false` drops the self-attention stage inside each DCE block.
    pub use_dce_mhsa: bool,
    /// `false` replaces cross-attention by nearest interpolation of the
    /// context tokens and elementwise multiplication.
    pub use_cf_mhca: bool,
    /// `false` fuses context at a single decoder level only.
    pub multi_level_fusion: bool,
    pub fusion_level_when_single: usize,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_context: true,
            use_dce_mhsa: true,
            use_cf_mhca: true,
            multi_level_fusion: true,
            fusion_level_when_single: 3,
        }
    }
}

/// Rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    NoDce,
    NoCf,
    NoMlf,
    Unpaired,
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoDce,
        Variant::NoCf,
        Variant::NoMlf,
        Variant::Unpaired,
        Variant::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDce => "no_dce",
            Variant::NoCf => "no_cf",
            Variant::NoMlf => "no_mlf",
            Variant::Unpaired => "unpaired",
            Variant::Baseline => "baseline",
        }
    }

    /// Sets the architecture flags for this variant. `Unpaired` keeps the
    /// full architecture; it differs only in how training pairs are built.
    pub fn configure(self, config: &mut ModelConfig) {
        let last = config.num_levels.saturating_sub(1);
        config.ablation = Ablation {
            fusion_level_when_single: config.ablation.fusion_level_when_single.min(last),
            ..Ablation::default()
        };
        match self {
            Variant::Full | Variant::Unpaired => {}
            Variant::NoDce => config.ablation.use_dce_mhsa = false,
            Variant::NoCf => config.ablation.use_cf_mhca = false,
            Variant::NoMlf => config.ablation.multi_level_fusion = false,
            Variant::Baseline => config.ablation.use_context = false,
        }
    }

    pub fn uses_unpaired_context(self) -> bool {
        self == Variant::Unpaired
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation variant {s:?} (expected one of full, no_dce, no_cf, no_mlf, unpaired, baseline)"
                ))
            })
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_levels: usize,
    /// Decoder width `K^l`, shallow (l = 0) to deep.
    pub backbone_channels: Vec<usize>,
    /// Context projection width `C^l`.
    pub dce_channels: Vec<usize>,
    pub heads: usize,
    pub blocks_per_level: usize,
    /// Context tokens per image (`L`).
    pub embed_tokens: usize,
    /// Context embedding width (`D`).
    pub embed_dim: usize,
    pub ablation: Ablation,
    /// Start from the identity map by zeroing the output head.
    pub zero_init_head: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_levels: 4,
            backbone_channels: vec![32, 48, 64, 96],
            dce_channels: vec![16, 16, 24, 32],
            heads: 4,
            blocks_per_level: 2,
            embed_tokens: 17,
            embed_dim: 32,
            ablation: Ablation::default(),
            zero_init_head: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Narrow variant sized for repeated single-core training runs.
    pub fn desk() -> Self {
        ModelConfig {
            backbone_channels: vec![16, 24, 32, 48],
            dce_channels: vec![8, 8, 16, 16],
            blocks_per_level: 1,
            ..ModelConfig::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        variant.configure(&mut self);
        self
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.num_levels - 1)
    }

    /// Levels that carry a DCE/CF pair.
    pub fn fusion_levels(&self) -> Vec<usize> {
        if !self.ablation.use_context {
            Vec::new()
        } else if self.ablation.multi_level_fusion {
            (0..self.num_levels).collect()
        } else {
            vec![self.ablation.fusion_level_when_single]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_levels == 0 {
            return bad("model.num_levels must be at least 1".into());
        }
        if self.backbone_channels.len() != self.num_levels
            || self.dce_channels.len() != self.num_levels
        {
            return bad(format!(
                "per-level lists must have {} entries (backbone {:?}, dce {:?})",
                self.num_levels, self.backbone_channels, self.dce_channels
            ));
        }
        if self.backbone_channels.iter().chain(&self.dce_channels).any(|&c| c == 0) {
            return bad("channel widths must be positive".into());
        }
        if self.heads == 0 {
            return bad("model.heads must be positive".into());
        }
        for (l, &c) in self.dce_channels.iter().enumerate() {
            if c > self.embed_dim {
                return bad(format!(
                    "dce width C^{l} = {c} exceeds the embedding width D = {}",
                    self.embed_dim
                ));
            }
            if c % self.heads != 0 {
                return bad(format!("dce width C^{l} = {c} not divisible by {} heads", self.heads));
            }
        }
        if self.embed_tokens == 0 || self.embed_dim == 0 {
            return bad("embedding shape must be positive".into());
        }
        if self.ablation.fusion_level_when_single >= self.num_levels {
            return bad(format!(
                "fusion_level_when_single = {} but only {} levels",
                self.ablation.fusion_level_when_single, self.num_levels
            ));
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.set("model.num_levels", self.num_levels);
        kv.set_list("model.backbone_channels", &self.backbone_channels);
        kv.set_list("model.dce_channels", &self.dce_channels);
        kv.set("model.heads", self.heads);
        kv.set("model.blocks_per_level", self.blocks_per_level);
        kv.set("model.embed_tokens", self.embed_tokens);
        kv.set("model.embed_dim", self.embed_dim);
        kv.set("model.zero_init_head", self.zero_init_head);
        kv.set("model.seed", self.seed);
        let a = &self.ablation;
        kv.set("model.ablation.use_context", a.use_context);
        kv.set("model.ablation.use_dce_mhsa", a.use_dce_mhsa);
        kv.set("model.ablation.use_cf_mhca", a.use_cf_mhca);
        kv.set("model.ablation.multi_level_fusion", a.multi_level_fusion);
        kv.set("model.ablation.fusion_level_when_single", a.fusion_level_when_single);
    }

    /// Overrides fields from `model.*` keys, consuming them.
    pub fn apply_kv(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.apply("model.num_levels", &mut self.num_levels)?;
        kv.apply_list("model.backbone_channels", &mut self.backbone_channels)?;
        kv.apply_list("model.dce_channels", &mut self.dce_channels)?;
        kv.apply("model.heads", &mut self.heads)?;
        kv.apply("model.blocks_per_level", &mut self.blocks_per_level)?;
        kv.apply("model.embed_tokens", &mut self.embed_tokens)?;
        kv.apply("model.embed_dim", &mut self.embed_dim)?;
        kv.apply("model.zero_init_head", &mut self.zero_init_head)?;
        kv.apply("model.seed", &mut self.seed)?;
        let a = &mut self.ablation;
        kv.apply("model.ablation.use_context", &mut a.use_context)?;
        kv.apply("model.ablation.use_dce_mhsa", &mut a.use_dce_mhsa)?;
        kv.apply("model.ablation.use_cf_mhca", &mut a.use_cf_mhca)?;
        kv.apply("model.ablation.multi_level_fusion", &mut a.multi_level_fusion)?;
        kv.apply(
            "model.ablation.fusion_level_when_single",
            &mut a.fusion_level_when_single,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn rejects_wide_projection_and_bad_heads() {
        let mut c = ModelConfig::default();
        c.dce_channels[3] = 64;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.backbone_channels.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::desk().with_variant(Variant::NoMlf);
        c.seed = 99;
        let mut kv = KeyValues::new("t");
        c.to_kv(&mut kv);
        let mut back = ModelConfig::default();
        back.apply_kv(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn variant_flags() {
        let c = ModelConfig::default().with_variant(Variant::Baseline);
        assert!(c.fusion_levels().is_empty());
        let c = ModelConfig::default().with_variant(Variant::NoMlf);
        assert_eq!(c.fusion_levels(), vec![3]);
        let c = ModelConfig::default().with_variant(Variant::NoDce);
        assert!(!c.ablation.use_dce_mhsa && c.ablation.use_cf_mhca);
        assert_eq!("no_cf".parse::<Variant>().unwrap(), Variant::NoCf);
        assert!("bogus".parse::<Variant>().is_err());
    }
}
