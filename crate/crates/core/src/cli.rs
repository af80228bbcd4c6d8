//! The `awracle` command line: argument definitions and subcommand runners.
//! Exit codes: 0 success, 1 check failure, 2 usage/config/I-O, 3 numerical
//! abort.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::embedder::{write_embedding_store, Embedder, EmbedderBackend, EmbedderSpec, EmbeddingCache};
use crate::error::{Error, Result};
use crate::eval::{
    cluster_contexts, cluster_separation, context_pools, dump_dce_activations, eval_model, load_trained,
    restore_padded, selective_removal_score, worker_threads, ContextPolicy, EvalReport, MIN_CLUSTER_PAIRS,
};
use crate::gradcheck::run_suite;
use crate::image::{load_image, write_ppm};
use crate::metrics::psnr;
use crate::model::{AwracleNet, Variant};
use crate::run_config::RunConfig;
use crate::synth::{build_dataset, parse_kinds, DatasetSpec, Manifest, RowKind};
use crate::tensor::write_awtf;
use crate::train::{resume_state, train, RunInfo, TrainData, TrainLimits, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "awracle", version, about = "In-context all-weather image restoration at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic haze/rain/snow dataset with manifest.tsv
    Synth(SynthArgs),
    /// Train a model (or an ablation variant) on a synthesized dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint under a context policy
    Eval(EvalArgs),
    /// Restore one image given a context pair
    Restore(RestoreArgs),
    /// Run the finite-difference gradient suite in 64-bit mode
    Gradcheck(GradcheckArgs),
    /// Precompute an embedding store for the file backend
    Embed(EmbedArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Scenes per (kind, severity) cell
    #[arg(long, default_value_t = 100)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated subset of haze,rain,snow
    #[arg(long, default_value = "haze,rain,snow")]
    pub kinds: String,
    /// Also render haze+snow mixtures with their single-degradation renders
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub mixtures: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config (`key = value` lines); defaults apply to missing keys
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// One of full, no_dce, no_cf, no_mlf, unpaired, baseline
    #[arg(long)]
    pub ablation: Option<String>,
    /// Continue from an epoch checkpoint; its stored settings win
    #[arg(long, conflicts_with_all = ["config", "ablation"])]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// random_per_image, incorrect_kind, fixed:N or fixed:A..B
    #[arg(long, default_value = "random_per_image")]
    pub policy: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write DCE activations for this many context pairs per kind next to the report
    #[arg(long, default_value_t = 0)]
    pub dump_dce: usize,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub ctx_degraded: Option<PathBuf>,
    #[arg(long)]
    pub ctx_clean: Option<PathBuf>,
    /// Output path; the .ppm and .awtf siblings are both written
    #[arg(long)]
    pub out: PathBuf,
    /// Clean reference; prints PSNR when given
    #[arg(long)]
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seeds for the per-op cases
    #[arg(long, default_value_t = 3)]
    pub op_seeds: u64,
    /// Seeds for the composed model cases
    #[arg(long, default_value_t = 1)]
    pub model_seeds: u64,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Run config whose embedder.* keys pick the encoder
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Exit code for a failed run.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code. Messages go to stdout, errors to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    worker_threads()?;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Restore(a) => restore(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Embed(a) => embed(a),
    }
}

fn synth(a: SynthArgs) -> Result<i32> {
    let kinds = parse_kinds(&a.kinds)?;
    let mut spec = DatasetSpec::new(a.scenes, kinds, a.seed);
    if a.mixtures {
        spec = spec.with_mixtures();
    }
    let m = build_dataset(&spec, &a.out)?;
    let mixtures = m.rows.iter().filter(|r| r.kind == RowKind::Mixture).count();
    println!(
        "wrote {} samples ({} single-degradation, {} mixtures) to {}",
        m.rows.len(),
        m.rows.len() - mixtures,
        mixtures,
        a.out.display()
    );
    Ok(EXIT_OK)
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn train_cmd(a: TrainArgs) -> Result<i32> {
    let manifest = Manifest::load(&a.data)?;
    let (state, info) = match &a.resume {
        Some(path) => resume_state(path)?,
        None => {
            let cfg = load_run_config(a.config.as_deref())?;
            let variant: Variant = match &a.ablation {
                Some(v) => v.parse()?,
                None => Variant::Full,
            };
            let model_cfg = match &a.ablation {
                Some(_) => cfg.model.clone().with_variant(variant),
                None => cfg.model.clone(),
            };
            let net = AwracleNet::new(model_cfg)?;
            let embedder = net.uses_context().then(|| cfg.embedder.clone());
            (TrainState::new(net), RunInfo { train: cfg.train, embedder, variant })
        }
    };
    let spec = info.embedder.clone().unwrap_or_default();
    let emb = Embedder::new(spec)?;
    let mut cache = EmbeddingCache::new(&emb, &a.data);
    let use_ctx = state.model.uses_context();
    let data = TrainData::load(&manifest, use_ctx.then_some(&mut cache), info.variant.uses_unpaired_context())?;
    println!(
        "training {} ({} parameters) on {} samples, {} held out; epochs {}..{}",
        info.variant,
        state.model.parameter_count(),
        data.train.len(),
        data.val.len(),
        state.epoch,
        info.train.epochs
    );
    let out = train(state, &data, &info, &a.out, TrainLimits::default())?;
    for l in &out.state.log {
        println!(
            "epoch {:3}  loss {:.5}  lr {:.3e}  val psnr {:.3}  ssim {:.4}  {:.1}s",
            l.epoch, l.mean_loss, l.lr, l.val_psnr, l.val_ssim, l.wall_seconds
        );
    }
    if let Some(last) = out.state.log.last() {
        println!("final val psnr {:.3} ssim {:.4}", last.val_psnr, last.val_ssim);
    }
    Ok(EXIT_OK)
}

fn eval_cmd(a: EvalArgs) -> Result<i32> {
    let policy: ContextPolicy = a.policy.parse()?;
    let (model, info) = load_trained(&a.ckpt)?;
    let manifest = Manifest::load(&a.data)?;
    let emb = Embedder::new(info.embedder.clone().unwrap_or_default())?;
    let mut cache = EmbeddingCache::new(&emb, &a.data);
    let mut report = eval_model(&model, &manifest, &mut cache, &policy, a.seed)?;
    if model.uses_context() {
        let pools = context_pools(&manifest);
        if pools.len() >= 2 && pools.values().all(|p| p.len() >= MIN_CLUSTER_PAIRS) {
            let contexts = cluster_contexts(&manifest, &mut cache, 4 * MIN_CLUSTER_PAIRS)?;
            report.push("cluster", "all", "separation_ratio", cluster_separation(&model, &contexts)?);
            if a.dump_dce > 0 {
                let dir = a.out.parent().unwrap_or(Path::new(".")).to_path_buf();
                for (i, (_, ctx)) in cluster_contexts(&manifest, &mut cache, a.dump_dce)?.iter().enumerate() {
                    dump_dce_activations(&model, ctx, &dir, i)?;
                }
            }
        }
        if manifest.rows.iter().any(|r| r.kind == RowKind::Mixture) {
            report.extend(selective_removal_score(&model, &manifest, &mut cache, a.seed)?.to_report());
        }
    }
    report.save(&a.out)?;
    print_overall(&report, &policy);
    Ok(EXIT_OK)
}

fn print_overall(report: &EvalReport, policy: &ContextPolicy) {
    let protocol = match policy {
        ContextPolicy::Fixed(ids) if ids.len() > 1 => "fixed".to_string(),
        p => p.name(),
    };
    for e in report.entries.iter().filter(|e| e.kind == "all" && (e.protocol == protocol || e.protocol == "identity")) {
        println!("{}\t{}\t{}\t{:.4}", e.protocol, e.kind, e.metric, e.value);
    }
}

fn restore(a: RestoreArgs) -> Result<i32> {
    let (model, info) = load_trained(&a.ckpt)?;
    let query = load_image(&a.query)?;
    let context = if model.uses_context() {
        let (d, c) = match (&a.ctx_degraded, &a.ctx_clean) {
            (Some(d), Some(c)) => (load_image(d)?, load_image(c)?),
            _ => return Err(Error::Usage("this model needs --ctx-degraded and --ctx-clean".into())),
        };
        let emb = Embedder::new(info.embedder.clone().unwrap_or_default())?;
        Some(emb.embed_context(&d, &c)?)
    } else {
        None
    };
    let out = restore_padded(&model, &query, context.as_ref())?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let ppm = a.out.with_extension("ppm");
    let awtf = a.out.with_extension("awtf");
    write_ppm(&ppm, &out)?;
    write_awtf(&awtf, &out)?;
    println!("wrote {} and {}", ppm.display(), awtf.display());
    if let Some(gt) = &a.gt {
        let gt = load_image(gt)?;
        println!("psnr {:.4} (query {:.4})", psnr(&out, &gt, 1.0)?, psnr(&query, &gt, 1.0)?);
    }
    Ok(EXIT_OK)
}

fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    let results = run_suite(a.op_seeds, a.model_seeds, a.inject_fault)?;
    let mut first_failure = None;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<28} max rel {:.3e}  tol {:.0e}  entries {:5}  {status}", r.name, r.max_rel, r.tolerance, r.entries);
        if !r.passed() && first_failure.is_none() {
            first_failure = Some(r.name.clone());
        }
    }
    match first_failure {
        Some(name) => {
            eprintln!("gradient check failed: {name}");
            Ok(EXIT_CHECK)
        }
        None => {
            println!("all {} gradient checks passed", results.len());
            Ok(EXIT_OK)
        }
    }
}

fn embed(a: EmbedArgs) -> Result<i32> {
    let cfg = load_run_config(a.config.as_deref())?;
    let manifest = Manifest::load(&a.data)?;
    let emb = Embedder::new(EmbedderSpec { backend: EmbedderBackend::ToyEncoder, ..cfg.embedder })?;
    let mut names: Vec<&String> = Vec::new();
    for r in &manifest.rows {
        names.extend([Some(&r.query), r.ctx_degraded.as_ref(), r.ctx_clean.as_ref()].into_iter().flatten());
    }
    names.sort();
    names.dedup();
    let images: Vec<(&str, crate::tensor::Tensor<f32>)> = names
        .iter()
        .map(|n| Ok((n.as_str(), manifest.load_image(n)?)))
        .collect::<Result<_>>()?;
    let n = write_embedding_store(&emb, &a.out, images.iter().map(|(n, t)| (*n, t)))?;
    println!("wrote {n} embeddings to {}", a.out.display());
    Ok(EXIT_OK)
}
