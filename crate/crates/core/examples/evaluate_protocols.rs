//! Runs every evaluation protocol on a briefly trained narrow model:
//! correct, incorrect and fixed contexts, DCE cluster separation and
//! selective removal on haze+snow mixtures.

use awracle::embedder::{Embedder, EmbedderSpec, EmbeddingCache};
use awracle::eval::{cluster_contexts, cluster_separation, eval_model, selective_removal_score, ContextPolicy};
use awracle::model::{AwracleNet, ModelConfig, Variant};
use awracle::synth::{build_dataset, DatasetSpec, Kind};
use awracle::train::{ablation_train, TrainConfig};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let manifest = build_dataset(&DatasetSpec::new(20, Kind::ALL.to_vec(), 5).with_mixtures(), dir.path())?;
    let embedder = Embedder::new(EmbedderSpec::default())?;
    let mut cache = EmbeddingCache::new(&embedder, dir.path());
    let cfg = TrainConfig { epochs: 3, warmup_epochs: 1, base_lr: 1e-3, ..TrainConfig::default() };
    let out = ablation_train(Variant::Full, ModelConfig::desk(), &manifest, &mut cache, &cfg, &dir.path().join("run"))?;
    let model = &out.state.model;

    for policy in ["random_per_image", "incorrect_kind", "fixed:0..4"] {
        let report = eval_model(model, &manifest, &mut cache, &policy.parse::<ContextPolicy>()?, 0)?;
        let protocol = if policy.starts_with("fixed") { "fixed" } else { policy };
        let metric = if policy.starts_with("fixed") { "psnr_mean" } else { "psnr" };
        println!(
            "{policy:<17} all-kind PSNR {:.3} dB (identity {:.3})",
            report.get(protocol, "all", metric).unwrap(),
            report.get("identity", "all", "psnr").unwrap()
        );
    }

    let contexts = cluster_contexts(&manifest, &mut cache, 8)?;
    let untrained = AwracleNet::new(model.config.clone())?;
    println!(
        "cluster separation: trained {:.3}, untrained {:.3}",
        cluster_separation(model, &contexts)?,
        cluster_separation(&untrained, &contexts)?
    );
    let sel = selective_removal_score(model, &manifest, &mut cache, 0)?;
    println!(
        "selective removal on {} mixtures: haze-direction {:.2}, snow-direction {:.2}, joint {:.2}",
        sel.samples.len(),
        sel.haze_rate(),
        sel.snow_rate(),
        sel.success_rate()
    );
    Ok(())
}
