use std::path::Path;

use awracle::embedder::{Embedder, EmbedderSpec, EmbeddingCache};
use awracle::model::{load_checkpoint, AwracleNet, ModelConfig, Variant};
use awracle::synth::{build_dataset, DatasetSpec, Kind, Manifest};
use awracle::train::{
    epoch_checkpoint_name, resume_state, train, RunInfo, TrainConfig, TrainData, TrainLimits, TrainOutcome, TrainState,
};

fn narrow() -> ModelConfig {
    ModelConfig {
        backbone_channels: vec![8, 8, 16, 16],
        dce_channels: vec![8, 8, 8, 8],
        blocks_per_level: 1,
        ..ModelConfig::default()
    }
}

fn setup(dir: &Path) -> Manifest {
    build_dataset(&DatasetSpec::new(10, vec![Kind::Haze, Kind::Snow], 8), dir).unwrap()
}

fn info(embedder: &Embedder) -> RunInfo {
    RunInfo {
        train: TrainConfig { epochs: 3, warmup_epochs: 1, batch_size: 4, base_lr: 1e-3, ..TrainConfig::default() },
        embedder: Some(embedder.spec().clone()),
        variant: Variant::Full,
    }
}

fn run(data: &TrainData, info: &RunInfo, out: &Path, stop: Option<usize>) -> TrainOutcome {
    let net = AwracleNet::new(narrow()).unwrap();
    train(TrainState::new(net), data, info, out, TrainLimits { stop_after: stop }).unwrap()
}

#[test]
fn resume_matches_uninterrupted_run_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = setup(&dir.path().join("data"));
    let embedder = Embedder::new(EmbedderSpec::default()).unwrap();
    let mut cache = EmbeddingCache::new(&embedder, &manifest.root);
    let data = TrainData::load(&manifest, Some(&mut cache), false).unwrap();
    let info = info(&embedder);

    let straight = run(&data, &info, &dir.path().join("a"), None);
    let first = run(&data, &info, &dir.path().join("b"), Some(1));
    assert_eq!(first.state.epoch, 1);
    let (state, resumed_info) = resume_state(&dir.path().join("b").join(epoch_checkpoint_name(0))).unwrap();
    assert_eq!(resumed_info.train, info.train);
    assert_eq!(state.log.len(), 1);
    let resumed = train(state, &data, &resumed_info, &dir.path().join("b"), TrainLimits::default()).unwrap();

    assert_eq!(resumed.state.epoch, 3);
    assert_eq!(resumed.state.optim.t, straight.state.optim.t);
    for (a, b) in straight.state.log.iter().zip(&resumed.state.log) {
        assert_eq!((a.epoch, a.mean_loss, a.lr, a.val_psnr, a.val_ssim), (b.epoch, b.mean_loss, b.lr, b.val_psnr, b.val_ssim));
    }
    for ((na, ta), (nb, tb)) in straight.state.model.collect_parameters().iter().zip(resumed.state.model.collect_parameters()) {
        assert_eq!(*na, nb);
        assert_eq!(ta.data(), tb.data(), "{na}");
    }
    assert_eq!(straight.state.optim.m, resumed.state.optim.m);
    assert_eq!(straight.state.optim.v, resumed.state.optim.v);
    let best_a = load_checkpoint(&straight.best_checkpoint()).unwrap();
    let best_b = load_checkpoint(&resumed.best_checkpoint()).unwrap();
    assert_eq!(best_a.tensors, best_b.tensors);
}

#[test]
fn embedder_stays_frozen_and_outside_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = setup(&dir.path().join("data"));
    let embedder = Embedder::new(EmbedderSpec::default()).unwrap();
    let before: Vec<Vec<f32>> = {
        let p = embedder.parameters().unwrap();
        p.ids().map(|id| p.get(id).data().to_vec()).collect()
    };
    let probe = manifest.load_image(&manifest.rows[0].query).unwrap();
    let probe_embedding = embedder.embed(&probe).unwrap();

    let mut cache = EmbeddingCache::new(&embedder, &manifest.root);
    let data = TrainData::load(&manifest, Some(&mut cache), false).unwrap();
    let out = run(&data, &info(&embedder), &dir.path().join("run"), Some(1));

    let p = embedder.parameters().unwrap();
    let after: Vec<Vec<f32>> = p.ids().map(|id| p.get(id).data().to_vec()).collect();
    assert_eq!(before, after);
    assert!(p.ids().all(|id| p.get(id).grad.is_none()));
    assert_eq!(embedder.embed(&probe).unwrap(), probe_embedding);
    let embedder_names: Vec<&str> = p.ids().map(|id| p.name(id)).collect();
    for (name, _) in out.state.model.collect_parameters() {
        assert!(!embedder_names.contains(&name), "{name}");
    }
}

#[test]
fn unpaired_training_changes_only_the_clean_context() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = setup(&dir.path().join("data"));
    let embedder = Embedder::new(EmbedderSpec::default()).unwrap();
    let mut cache = EmbeddingCache::new(&embedder, &manifest.root);
    let paired = TrainData::load(&manifest, Some(&mut cache), false).unwrap();
    let unpaired = TrainData::load(&manifest, Some(&mut cache), true).unwrap();
    let l = embedder.tokens();
    let mut differing = 0;
    for (a, b) in paired.train.iter().zip(&unpaired.train) {
        assert_eq!(a.query, b.query);
        let (ca, cb) = (a.context.as_ref().unwrap(), b.context.as_ref().unwrap());
        let (da, db) = (ca.split_rows(&[l, l]).unwrap(), cb.split_rows(&[l, l]).unwrap());
        assert_eq!(da[0], db[0]);
        differing += usize::from(da[1] != db[1]);
    }
    assert_eq!(differing, paired.train.len());
    for (a, b) in paired.val.iter().zip(&unpaired.val) {
        assert_eq!(a.context, b.context);
    }
}
