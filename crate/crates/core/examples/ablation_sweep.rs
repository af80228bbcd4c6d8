//! Trains every ablation variant briefly on the same small dataset and
//! prints validation PSNR per variant.
//!
//! Usage: ablation_sweep [EPOCHS]

use awracle::embedder::{Embedder, EmbedderSpec, EmbeddingCache};
use awracle::model::{ModelConfig, Variant};
use awracle::synth::{build_dataset, DatasetSpec, Kind};
use awracle::train::{ablation_train, TrainConfig};

fn main() -> anyhow::Result<()> {
    let epochs = std::env::args().nth(1).map_or(Ok(2), |s| s.parse())?;
    let dir = tempfile::tempdir()?;
    let manifest = build_dataset(&DatasetSpec::new(10, Kind::ALL.to_vec(), 2), dir.path())?;
    let embedder = Embedder::new(EmbedderSpec::default())?;
    let mut cache = EmbeddingCache::new(&embedder, dir.path());
    let cfg = TrainConfig { epochs, warmup_epochs: 1, ..TrainConfig::default() };
    for variant in Variant::ALL {
        let out = ablation_train(variant, ModelConfig::desk(), &manifest, &mut cache, &cfg, &dir.path().join(variant.name()))?;
        let last = out.final_log();
        println!(
            "{:<9} {:6} params  loss {:.5}  val {:.3} dB",
            variant.name(),
            out.state.model.parameter_count(),
            last.mean_loss,
            last.val_psnr
        );
    }
    Ok(())
}
