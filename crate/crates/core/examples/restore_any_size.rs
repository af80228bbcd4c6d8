//! Restores an image whose sides are not multiples of the U-Net's size
//! multiple: the query is reflect-padded, restored and cropped back.

use awracle::embedder::{Embedder, EmbedderSpec};
use awracle::eval::restore_padded;
use awracle::metrics::psnr;
use awracle::model::{AwracleNet, ModelConfig};
use awracle::synth::{degrade, render_scene, DegradationSpec, Kind, SceneSpec, Severity};

fn main() -> anyhow::Result<()> {
    let mut cfg = ModelConfig::desk();
    cfg.zero_init_head = false;
    let model = AwracleNet::new(cfg)?;
    let clean = render_scene(&SceneSpec { seed: 3, height: 37, width: 50 })?;
    let query = degrade(&clean, &DegradationSpec { kind: Kind::Snow, severity: Severity::Heavy, seed: 1 })?;
    let ctx_clean = render_scene(&SceneSpec { seed: 4, height: 32, width: 32 })?;
    let ctx_degraded = degrade(&ctx_clean, &DegradationSpec { kind: Kind::Snow, severity: Severity::Heavy, seed: 2 })?;
    let context = Embedder::new(EmbedderSpec::default())?.embed_context(&ctx_degraded, &ctx_clean)?;

    let out = restore_padded(&model, &query, Some(&context))?;
    println!("query {:?} -> output {:?} (size multiple {})", query.shape(), out.shape(), model.config.size_multiple());
    println!("untrained, random head: PSNR {:.2} dB vs query {:.2} dB", psnr(&out, &clean, 1.0)?, psnr(&query, &clean, 1.0)?);
    Ok(())
}
