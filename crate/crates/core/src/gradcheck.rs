//! Central finite-difference checks of every backward rule, run in `f64`.
//!
//! A case builds some output `y` from its inputs; the checked scalar is
//! `sum(y ⊙ R)` for a fixed random `R`, so every output element carries a
//! distinct weight. The relative error of one entry is
//! `|a − n| / max(|a|, |n|, 1e-6)` for analytic `a` and numeric `n`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{AwracleNet, CfBlock, DceBlock, ModelConfig, Variant};
use crate::nn::{Bound, Init, Linear, MultiHeadAttention, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
/// Cap on checked entries for the whole-model case.
pub const MAX_MODEL_ENTRIES: usize = 2000;

const FLOOR: f64 = 1e-6;

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One differentiable computation to verify.
pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    /// `None` checks every input entry.
    pub max_entries: Option<usize>,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel: f64,
    pub tolerance: f64,
    pub entries: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn weighted_loss(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(weights.clone());
    let prod = tape.mul(y, r)?;
    Ok(tape.sum(prod))
}

fn loss_at(case: &GradCase, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = (case.build)(&mut tape, &vars)?;
    let loss = weighted_loss(&mut tape, y, weights)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares analytic and numeric gradients of `case` on (a subset of) its
/// input entries. `seed` fixes `R` and the subset.
pub fn check_case(case: &GradCase, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9ad);
    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let y = (case.build)(&mut tape, &vars)?;
    let weights = random_tensor(&mut rng, tape.shape(y), -1.0, 1.0);
    let loss = weighted_loss(&mut tape, y, &weights)?;
    tape.backward(loss)?;

    let per_input = case
        .max_entries
        .map(|m| (m / case.inputs.len()).max(1));
    let mut max_rel = 0.0f64;
    let mut entries = 0;
    let mut work = case.inputs.clone();
    for (i, v) in vars.iter().enumerate() {
        let n = case.inputs[i].numel();
        let zeros = vec![0.0; n];
        let analytic = tape.grad(*v).unwrap_or(&zeros).to_vec();
        let picks = match per_input {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in picks {
            let orig = case.inputs[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let up = loss_at(case, &work, &weights)?;
            work[i].data_mut()[j] = orig - STEP;
            let down = loss_at(case, &work, &weights)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            max_rel = max_rel.max(relative_error(analytic[j], numeric));
            entries += 1;
        }
    }
    Ok(CheckOutcome {
        name: case.name.to_string(),
        max_rel,
        tolerance: case.tolerance,
        entries,
    })
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data).expect("finite")
}

fn op(name: &'static str, inputs: Vec<Tensor<f64>>, build: Build) -> GradCase {
    GradCase {
        name,
        tolerance: OP_TOLERANCE,
        max_entries: None,
        inputs,
        build,
    }
}

/// One case per differentiable tape operation, inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape, -1.0, 1.0);
    let mut cases = vec![
        op("matmul", vec![r(&[3, 4]), r(&[4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        op("matmul_nt", vec![r(&[3, 4]), r(&[5, 4])], Box::new(|t, v| t.matmul_nt(v[0], v[1]))),
        op("attend", vec![r(&[3, 4]), r(&[4, 2])], Box::new(|t, v| t.attend(v[0], v[1]))),
        op("add", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|t, v| t.add(v[0], v[1]))),
        op("sub", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|t, v| t.sub(v[0], v[1]))),
        op("mul", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|t, v| t.mul(v[0], v[1]))),
        op("scale", vec![r(&[2, 3])], Box::new(|t, v| Ok(t.scale(v[0], 0.7)))),
        op(
            "add_row_bias",
            vec![r(&[3, 4]), r(&[4])],
            Box::new(|t, v| t.add_row_bias(v[0], v[1])),
        ),
        op(
            "conv2d_1x1",
            vec![r(&[3, 4, 4]), r(&[2, 3, 1, 1]), r(&[2])],
            Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1)),
        ),
        op(
            "conv2d_3x3",
            vec![r(&[2, 5, 5]), r(&[3, 2, 3, 3]), r(&[3])],
            Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1)),
        ),
        op(
            "conv2d_3x3_stride2",
            vec![r(&[2, 6, 6]), r(&[3, 2, 3, 3]), r(&[3])],
            Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 2)),
        ),
        op("upsample2x", vec![r(&[2, 3, 3])], Box::new(|t, v| t.upsample2x(v[0]))),
        op("reshape", vec![r(&[4, 6])], Box::new(|t, v| t.reshape(v[0], &[4, 2, 3]))),
        op("transpose", vec![r(&[3, 5])], Box::new(|t, v| t.transpose(v[0]))),
        op(
            "concat_rows",
            vec![r(&[2, 3]), r(&[1, 3])],
            Box::new(|t, v| t.concat_rows(&[v[0], v[1]])),
        ),
        op(
            "concat_axis1",
            vec![r(&[2, 3]), r(&[2, 2])],
            Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        ),
        op(
            "concat_channels",
            vec![r(&[2, 2, 3]), r(&[1, 2, 3])],
            Box::new(|t, v| t.concat_channels(&[v[0], v[1]])),
        ),
        op("slice", vec![r(&[3, 5])], Box::new(|t, v| t.slice(v[0], 1, 1, 3))),
        op(
            "split_rows",
            vec![r(&[5, 2])],
            Box::new(|t, v| {
                let parts = t.split_rows(v[0], &[2, 3])?;
                t.concat_rows(&[parts[1], parts[0]])
            }),
        ),
        op(
            "gather_rows",
            vec![r(&[4, 3])],
            Box::new(|t, v| t.gather_rows(v[0], &[0, 2, 2, 3, 1, 0])),
        ),
        op("sum", vec![r(&[2, 3])], Box::new(|t, v| Ok(t.sum(v[0])))),
        op("mean", vec![r(&[2, 3])], Box::new(|t, v| Ok(t.mean(v[0])))),
    ];
    let wide = random_tensor(&mut rng, &[2, 5], -3.0, 3.0);
    cases.push(op("gelu", vec![wide], Box::new(|t, v| Ok(t.gelu(v[0])))));
    let logits = random_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    cases.push(op("softmax_rows", vec![logits], Box::new(|t, v| t.softmax_rows(v[0]))));
    let x = random_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    let gamma = random_tensor(&mut rng, &[5], 0.5, 1.5);
    let beta = random_tensor(&mut rng, &[5], -0.5, 0.5);
    cases.push(op(
        "layer_norm",
        vec![x, gamma, beta],
        Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], crate::nn::LN_EPS)),
    ));
    // Keep |pred − target| ≥ 0.1 so the kink at zero is never straddled.
    let pred = random_tensor(&mut rng, &[2, 4], -1.0, 1.0);
    let target: Vec<f64> = pred
        .data()
        .iter()
        .map(|&p| {
            let off = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) { p + off } else { p - off }
        })
        .collect();
    let target = Tensor::from_f64(&[2, 4], &target).expect("finite");
    cases.push(op("l1_loss", vec![pred, target], Box::new(|t, v| t.l1_loss(v[0], v[1]))));
    cases
}

/// Case over a parameter store plus extra inputs; the store's tensors come
/// first in `inputs`, in id order.
fn module_case<F>(name: &'static str, store: ParamStore<f64>, extra: Vec<Tensor<f64>>, max_entries: Option<usize>, f: F) -> GradCase
where
    F: Fn(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var> + 'static,
{
    let n = store.len();
    let mut inputs: Vec<Tensor<f64>> = store.ids().map(|id| store.get(id).clone()).collect();
    inputs.extend(extra);
    GradCase {
        name,
        tolerance: COMPOSITE_TOLERANCE,
        max_entries,
        inputs,
        build: Box::new(move |tape, vars| {
            let p = Bound::from_vars(vars[..n].to_vec());
            f(tape, &p, &vars[n..])
        }),
    }
}

/// Smallest configuration that still exercises every block type.
pub fn tiny_model_config(variant: Variant, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig {
        num_levels: 2,
        backbone_channels: vec![4, 8],
        dce_channels: vec![4, 4],
        heads: 2,
        blocks_per_level: 1,
        embed_tokens: 3,
        embed_dim: 6,
        zero_init_head: false,
        seed,
        ..ModelConfig::default()
    };
    cfg.ablation.fusion_level_when_single = 1;
    cfg.with_variant(variant)
}

/// Layers, blocks and the whole network.
pub fn composite_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let mut init = Init::new(seed);
    let mut cases = Vec::new();

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, &mut init, "lin", 4, 3);
    let x = random_tensor(&mut rng, &[5, 4], -1.0, 1.0);
    cases.push(module_case("linear", store, vec![x], None, move |t, p, v| lin.forward(t, p, v[0])));

    let mut store = ParamStore::new();
    let att = MultiHeadAttention::new(&mut store, &mut init, "att", 8, 2)?;
    let x = random_tensor(&mut rng, &[5, 8], -1.0, 1.0);
    let a2 = att.clone();
    cases.push(module_case("mhsa", store.clone(), vec![x], None, move |t, p, v| {
        a2.self_attend(t, p, v[0])
    }));
    let q = random_tensor(&mut rng, &[6, 8], -1.0, 1.0);
    let c = random_tensor(&mut rng, &[4, 8], -1.0, 1.0);
    cases.push(module_case("mhca", store, vec![q, c], None, move |t, p, v| {
        att.cross_attend(t, p, v[0], v[1])
    }));

    for (name, use_mhsa) in [("dce", true), ("dce_no_mhsa", false)] {
        let mut store = ParamStore::new();
        let dce = DceBlock::new(&mut store, &mut init, "dce", 6, 4, 2, use_mhsa)?;
        let e = random_tensor(&mut rng, &[6, 6], -1.0, 1.0);
        cases.push(module_case(name, store, vec![e], None, move |t, p, v| dce.forward(t, p, v[0])));
    }

    for (name, use_mhca) in [("cf", true), ("cf_interp_mul", false)] {
        let mut store = ParamStore::new();
        let cf = CfBlock::new(&mut store, &mut init, "cf", 4, 4, 2, use_mhca)?;
        let f = random_tensor(&mut rng, &[4, 4, 4], -1.0, 1.0);
        let o = random_tensor(&mut rng, &[6, 4], -1.0, 1.0);
        cases.push(module_case(name, store, vec![f, o], None, move |t, p, v| {
            Ok(cf.forward(t, p, v[0], v[1])?.output)
        }));
    }

    let net = AwracleNet::<f64>::new(tiny_model_config(Variant::Full, seed))?;
    let img = random_tensor(&mut rng, &[3, 4, 4], 0.0, 1.0);
    let ctx = random_tensor(&mut rng, &[6, 6], -1.0, 1.0);
    let store = net.params.clone();
    cases.push(module_case(
        "model",
        store,
        vec![img, ctx],
        Some(MAX_MODEL_ENTRIES),
        move |t, p, v| Ok(net.forward(t, p, v[0], Some(v[1]))?.output),
    ));
    Ok(cases)
}

/// `x³` recorded with the wrong derivative `2x`: the checker must flag it.
pub fn fault_case() -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_tensor(&mut rng, &[2, 3], 0.5, 1.5);
    op(
        "injected_fault",
        vec![x],
        Box::new(|t, v| Ok(t.map(v[0], |x| x * x * x, |x| 2.0 * x))),
    )
}

fn merge(results: &mut Vec<CheckOutcome>, o: CheckOutcome) {
    match results.iter_mut().find(|r| r.name == o.name) {
        Some(r) => {
            r.max_rel = r.max_rel.max(o.max_rel);
            r.entries += o.entries;
        }
        None => results.push(o),
    }
}

/// Runs every op case for `op_seeds` seeds and every composite case for
/// `composite_seeds` seeds; results hold the worst error per case name.
pub fn run_suite(op_seeds: u64, composite_seeds: u64, inject_fault: bool) -> Result<Vec<CheckOutcome>> {
    let mut results = Vec::new();
    for seed in 0..op_seeds {
        for case in op_cases(seed) {
            merge(&mut results, check_case(&case, seed)?);
        }
    }
    for seed in 0..composite_seeds {
        for case in composite_cases(seed)? {
            merge(&mut results, check_case(&case, seed)?);
        }
    }
    if inject_fault {
        results.push(check_case(&fault_case(), 0)?);
    }
    Ok(results)
}
