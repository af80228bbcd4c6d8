use awracle::model::{AwracleNet, CfBlock, DceBlock, ModelConfig, Variant};
use awracle::nn::{Init, MultiHeadAttention, ParamStore};
use awracle::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(seed: u64, shape: &[usize], scale: f32) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}

fn permute_rows(t: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
    let c = t.shape()[1];
    let mut out = Vec::with_capacity(t.numel());
    for &i in perm {
        out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
    }
    Tensor::new(t.shape(), out).unwrap()
}

fn attention(seed: u64, dim: usize, heads: usize) -> (ParamStore<f32>, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let att = MultiHeadAttention::new(&mut store, &mut init, "att", dim, heads).unwrap();
    (store, att)
}

fn mhsa(store: &ParamStore<f32>, att: &MultiHeadAttention, x: &Tensor<f32>) -> Tensor<f32> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let y = att.self_attend(&mut tape, &p, xv).unwrap();
    tape.value(y).clone()
}

fn mhca(store: &ParamStore<f32>, att: &MultiHeadAttention, q: &Tensor<f32>, c: &Tensor<f32>) -> Tensor<f32> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let qv = tape.constant(q.clone());
    let cv = tape.constant(c.clone());
    let y = att.cross_attend(&mut tape, &p, qv, cv).unwrap();
    tape.value(y).clone()
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn sized_permutation(max: usize) -> impl Strategy<Value = Vec<usize>> {
    (1..=max).prop_flat_map(permutation)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mhsa_is_row_permutation_equivariant(seed in any::<u64>(), perm in sized_permutation(12)) {
        let (store, att) = attention(seed, 8, 2);
        let x = random(seed ^ 1, &[perm.len(), 8], 2.0);
        let y = mhsa(&store, &att, &x);
        let y_perm = mhsa(&store, &att, &permute_rows(&x, &perm));
        prop_assert_eq!(y_perm, permute_rows(&y, &perm));
    }

    #[test]
    fn mhca_is_context_permutation_invariant(
        seed in any::<u64>(),
        tq in 1usize..20,
        perm in sized_permutation(12),
    ) {
        let (store, att) = attention(seed, 8, 4);
        let q = random(seed ^ 2, &[tq, 8], 2.0);
        let c = random(seed ^ 3, &[perm.len(), 8], 2.0);
        let y = mhca(&store, &att, &q, &c);
        let y_perm = mhca(&store, &att, &q, &permute_rows(&c, &perm));
        prop_assert_eq!(&y, &y_perm);
        prop_assert_eq!(y.shape(), &[tq, 8]);
    }

    #[test]
    fn attention_rows_are_stochastic(seed in any::<u64>(), tq in 1usize..16, tk in 1usize..16) {
        let (store, att) = attention(seed, 8, 2);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let q = tape.constant(random(seed ^ 4, &[tq, 8], 3.0));
        let c = tape.constant(random(seed ^ 5, &[tk, 8], 3.0));
        let out = att.attend(&mut tape, &p, q, c).unwrap();
        for w in out.weights {
            for row in tape.value(w).data().chunks(tk) {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn mhsa_stays_finite_across_input_scales(seed in any::<u64>(), log_scale in -3.0f64..3.0) {
        let (store, att) = attention(seed, 8, 2);
        let base = random(seed, &[6, 8], 1.0);
        let s = 10f64.powf(log_scale) as f32;
        let x = Tensor::new(&[6, 8], base.data().iter().map(|v| v * s).collect()).unwrap();
        prop_assert!(mhsa(&store, &att, &x).all_finite());
    }

    #[test]
    fn dce_block_is_row_permutation_equivariant(seed in any::<u64>(), perm in sized_permutation(10)) {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(seed);
        let dce = DceBlock::new(&mut store, &mut init, "dce", 16, 8, 4, true).unwrap();
        let e = random(seed ^ 6, &[perm.len(), 16], 1.5);
        let run = |e: &Tensor<f32>| {
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let ev = tape.constant(e.clone());
            let o = dce.forward(&mut tape, &p, ev).unwrap();
            tape.value(o).clone()
        };
        prop_assert_eq!(run(&permute_rows(&e, &perm)), permute_rows(&run(&e), &perm));
    }

    #[test]
    fn cf_is_invariant_to_dce_row_order(seed in any::<u64>(), perm in sized_permutation(10)) {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(seed);
        let cf = CfBlock::new(&mut store, &mut init, "cf", 8, 4, 2, true).unwrap();
        let f = random(seed ^ 7, &[8, 4, 4], 1.0);
        let o = random(seed ^ 8, &[perm.len(), 4], 1.0);
        let run = |o: &Tensor<f32>| {
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let fv = tape.constant(f.clone());
            let ov = tape.constant(o.clone());
            let out = cf.forward(&mut tape, &p, fv, ov).unwrap();
            tape.value(out.output).clone()
        };
        prop_assert_eq!(run(&o), run(&permute_rows(&o, &perm)));
    }
}

fn grid_config(levels: usize, c: usize) -> ModelConfig {
    let mut cfg = ModelConfig::desk();
    cfg.num_levels = levels;
    cfg.backbone_channels = vec![8, 12, 16, 24][..levels].to_vec();
    cfg.dce_channels = vec![c; levels];
    cfg.embed_tokens = 5;
    cfg.embed_dim = 16;
    cfg.zero_init_head = false;
    cfg.ablation.fusion_level_when_single = levels - 1;
    cfg
}

#[test]
fn shape_contracts_over_config_grid() {
    for levels in 2..=4 {
        for c in [8, 16] {
            let cfg = grid_config(levels, c);
            let net = AwracleNet::<f32>::new(cfg.clone()).unwrap();
            let size = cfg.size_multiple() * 2;
            let mut tape = Tape::new();
            let p = net.params.bind(&mut tape);
            let img = tape.constant(random(1, &[3, size, size], 0.5));
            let ctx = tape.constant(random(2, &[10, 16], 1.0));
            let out = net.forward(&mut tape, &p, img, Some(ctx)).unwrap();
            assert_eq!(tape.shape(out.output), &[3, size, size]);
            for l in 0..levels {
                let hl = size >> l;
                assert_eq!(tape.shape(out.dce[l].unwrap()), &[10, c], "levels {levels} C {c} l {l}");
                assert_eq!(tape.shape(out.fused[l].unwrap()), &[c, hl, hl]);
                for w in &out.attention[l] {
                    assert_eq!(tape.shape(*w), &[hl * hl, 10]);
                }
            }

            let mut store = ParamStore::<f32>::new();
            let mut init = Init::new(3);
            for (l, &k) in cfg.backbone_channels.iter().enumerate() {
                let cf = CfBlock::new(&mut store, &mut init, &format!("cf{l}"), k, c, 4, l % 2 == 0).unwrap();
                let hl = size >> l;
                let mut tape = Tape::new();
                let p = store.bind(&mut tape);
                let f = tape.constant(random(4, &[k, hl, hl], 1.0));
                let o = tape.constant(random(5, &[10, c], 1.0));
                let out = cf.forward(&mut tape, &p, f, o).unwrap();
                assert_eq!(tape.shape(out.output), &[k, hl, hl]);
            }
        }
    }
}

#[test]
fn indivisible_size_is_rejected() {
    let net = AwracleNet::<f32>::new(ModelConfig::desk()).unwrap();
    let err = net
        .restore(&Tensor::full(&[3, 12, 16], 0.5), Some(&Tensor::full(&[34, 32], 0.0)))
        .unwrap_err();
    assert!(err.to_string().contains('8'), "{err}");
}

#[test]
fn zero_head_is_identity() {
    let net = AwracleNet::<f32>::new(ModelConfig::desk()).unwrap();
    let img = random(9, &[3, 16, 16], 0.5);
    let img = Tensor::new(&[3, 16, 16], img.data().iter().map(|v| v + 0.5).collect()).unwrap();
    let ctx = random(10, &[34, 32], 1.0);
    assert_eq!(net.restore(&img, Some(&ctx)).unwrap(), img);
}

#[test]
fn forward_is_bit_deterministic() {
    let mut cfg = ModelConfig::desk();
    cfg.zero_init_head = false;
    let a = AwracleNet::<f32>::new(cfg.clone()).unwrap();
    let b = AwracleNet::<f32>::new(cfg).unwrap();
    let img = random(11, &[3, 16, 16], 1.0);
    let ctx = random(12, &[34, 32], 1.0);
    let ya = a.restore(&img, Some(&ctx)).unwrap();
    let yb = b.restore(&img, Some(&ctx)).unwrap();
    assert_eq!(ya.data(), yb.data());
}

fn gradient_norms(cfg: ModelConfig, seed: u64) -> Vec<(String, f64)> {
    let mut net = AwracleNet::<f32>::new(cfg).unwrap();
    let mut tape = Tape::new();
    let p = net.params.bind(&mut tape);
    let img = tape.constant(random(seed, &[3, 16, 16], 1.0));
    let gt = tape.constant(random(seed + 1, &[3, 16, 16], 1.0));
    let ctx = tape.constant(random(seed + 2, &[34, 32], 1.0));
    let out = net.forward(&mut tape, &p, img, Some(ctx)).unwrap();
    let loss = tape.l1_loss(out.output, gt).unwrap();
    tape.backward(loss).unwrap();
    net.params.accumulate_grads(&tape, &p, 1.0);
    net.collect_parameters()
        .into_iter()
        .map(|(n, t)| {
            let g = t.grad.as_ref().unwrap();
            (n.to_string(), g.iter().map(|v| (*v as f64).abs()).sum())
        })
        .collect()
}

#[test]
fn every_parameter_receives_gradient() {
    for seed in 0..3 {
        let mut cfg = ModelConfig::default();
        cfg.zero_init_head = false;
        cfg.seed = seed;
        for (name, g) in gradient_norms(cfg, seed * 10) {
            assert!(g > 0.0, "seed {seed}: {name} has zero gradient");
        }
    }
}

#[test]
fn single_level_fusion_trains_one_pair() {
    let mut cfg = ModelConfig::desk().with_variant(Variant::NoMlf);
    cfg.zero_init_head = false;
    let grads = gradient_norms(cfg, 5);
    let mut levels: Vec<&str> = grads
        .iter()
        .filter(|(n, _)| n.starts_with("dce.") || n.starts_with("cf."))
        .map(|(n, g)| {
            assert!(*g > 0.0, "{n}");
            n.split('.').nth(1).unwrap()
        })
        .collect();
    levels.dedup();
    assert_eq!(levels, ["3"]);
}

#[test]
fn collected_names_follow_variant() {
    let full = AwracleNet::<f32>::new(ModelConfig::default()).unwrap();
    let names: Vec<&str> = full.collect_parameters().into_iter().map(|(n, _)| n).collect();
    let again = AwracleNet::<f32>::new(ModelConfig::default()).unwrap();
    let names2: Vec<&str> = again.collect_parameters().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, names2);
    assert!(names.windows(2).all(|w| w[0] < w[1]));
    assert!(names.contains(&"dce.3.attn.wq.weight"));

    let no_dce = AwracleNet::<f32>::new(ModelConfig::default().with_variant(Variant::NoDce)).unwrap();
    assert!(no_dce
        .collect_parameters()
        .iter()
        .all(|(n, _)| !(n.starts_with("dce.") && n.contains(".attn."))));
    let no_cf = AwracleNet::<f32>::new(ModelConfig::default().with_variant(Variant::NoCf)).unwrap();
    assert!(no_cf.collect_parameters().iter().all(|(n, _)| !(n.starts_with("cf.") && n.contains(".attn."))));
    let base = AwracleNet::<f32>::new(ModelConfig::default().with_variant(Variant::Baseline)).unwrap();
    assert!(base.collect_parameters().iter().all(|(n, _)| n.starts_with("backbone.")));
}

#[test]
fn default_parameter_count_is_golden() {
    let net = AwracleNet::<f32>::new(ModelConfig::default()).unwrap();
    assert_eq!(net.parameter_count(), 1_393_499);
    let backbone: usize = net
        .collect_parameters()
        .iter()
        .filter(|(n, _)| n.starts_with("backbone."))
        .map(|(_, t)| t.numel())
        .sum();
    assert_eq!(backbone, 1_324_627);
}
