//! Trains a narrow model for a few epochs on a small synthetic dataset and
//! compares the result with the identity baseline.
//!
//! Usage: train_toy [EPOCHS]

use awracle::embedder::{Embedder, EmbedderSpec, EmbeddingCache};
use awracle::model::{AwracleNet, ModelConfig, Variant};
use awracle::synth::{build_dataset, DatasetSpec, Kind};
use awracle::train::{identity_psnr, train, RunInfo, TrainConfig, TrainData, TrainLimits, TrainState};

fn main() -> anyhow::Result<()> {
    let epochs = std::env::args().nth(1).map_or(Ok(4), |s| s.parse())?;
    let dir = tempfile::tempdir()?;
    let manifest = build_dataset(&DatasetSpec::new(20, Kind::ALL.to_vec(), 1), dir.path())?;
    let embedder = Embedder::new(EmbedderSpec::default())?;
    let mut cache = EmbeddingCache::new(&embedder, dir.path());
    let data = TrainData::load(&manifest, Some(&mut cache), false)?;

    let model = AwracleNet::new(ModelConfig::desk())?;
    let info = RunInfo {
        train: TrainConfig { epochs, warmup_epochs: 1, base_lr: 1e-3, ..TrainConfig::default() },
        embedder: Some(embedder.spec().clone()),
        variant: Variant::Full,
    };
    println!("{} parameters, {} training / {} validation samples", model.parameter_count(), data.train.len(), data.val.len());
    let out = train(TrainState::new(model), &data, &info, &dir.path().join("run"), TrainLimits::default())?;
    for l in &out.state.log {
        println!("epoch {}  loss {:.5}  lr {:.2e}  val {:.3} dB / {:.4}", l.epoch, l.mean_loss, l.lr, l.val_psnr, l.val_ssim);
    }
    println!("identity baseline {:.3} dB; best checkpoint {}", identity_psnr(&data.val)?, out.best_checkpoint().display());
    Ok(())
}
