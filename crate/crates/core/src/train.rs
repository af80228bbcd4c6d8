//! Training: L1 loss, AdamW with decoupled decay, linear warmup into cosine
//! annealing (updated per epoch), joint crop/flip of query and target,
//! per-epoch checkpoints and a best-by-validation checkpoint.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::KeyValues;
use crate::embedder::{EmbedderSpec, EmbeddingCache};
use crate::error::{Error, Result};
use crate::metrics::{mean, psnr, ssim};
use crate::model::{load_checkpoint, save_checkpoint, AwracleNet, Checkpoint, ModelConfig, Variant};
use crate::nn::ParamStore;
use crate::seed;
use crate::synth::{is_validation_scene, Kind, Manifest};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_epochs: usize,
    pub crop: usize,
    pub flip_prob: f64,
    pub seed: u64,
    pub eta_min: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            base_lr: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_epochs: 3,
            crop: 32,
            flip_prob: 0.5,
            seed: 0,
            eta_min: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        let m = model.size_multiple();
        if self.crop == 0 || self.crop % m != 0 {
            return bad(format!("crop {} must be a positive multiple of {m}", self.crop));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob {} outside [0, 1]", self.flip_prob));
        }
        if !(self.base_lr > 0.0) || self.eta_min < 0.0 || self.eta_min > self.base_lr {
            return bad(format!("need 0 ≤ eta_min ≤ base_lr and base_lr > 0 (got {} and {})", self.eta_min, self.base_lr));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.set("train.epochs", self.epochs);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.base_lr", self.base_lr);
        kv.set("train.weight_decay", self.weight_decay);
        kv.set("train.beta1", self.beta1);
        kv.set("train.beta2", self.beta2);
        kv.set("train.eps", self.eps);
        kv.set("train.warmup_epochs", self.warmup_epochs);
        kv.set("train.crop", self.crop);
        kv.set("train.flip_prob", self.flip_prob);
        kv.set("train.seed", self.seed);
        kv.set("train.eta_min", self.eta_min);
    }

    pub fn apply_kv(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.apply("train.epochs", &mut self.epochs)?;
        kv.apply("train.batch_size", &mut self.batch_size)?;
        kv.apply("train.base_lr", &mut self.base_lr)?;
        kv.apply("train.weight_decay", &mut self.weight_decay)?;
        kv.apply("train.beta1", &mut self.beta1)?;
        kv.apply("train.beta2", &mut self.beta2)?;
        kv.apply("train.eps", &mut self.eps)?;
        kv.apply("train.warmup_epochs", &mut self.warmup_epochs)?;
        kv.apply("train.crop", &mut self.crop)?;
        kv.apply("train.flip_prob", &mut self.flip_prob)?;
        kv.apply("train.seed", &mut self.seed)?;
        kv.apply("train.eta_min", &mut self.eta_min)?;
        Ok(())
    }
}

/// Learning rate for a (possibly fractional) epoch.
pub fn lr_at(cfg: &TrainConfig, epoch: f64) -> Result<f64> {
    let (e, w) = (cfg.epochs as f64, cfg.warmup_epochs as f64);
    if !(0.0..=e).contains(&epoch) {
        return Err(Error::Param(format!("epoch {epoch} outside [0, {e}]")));
    }
    if epoch < w {
        return Ok(cfg.base_lr * (epoch + 1.0) / w);
    }
    let progress = (epoch - w) / (e - w);
    Ok(cfg.eta_min + 0.5 * (cfg.base_lr - cfg.eta_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One AdamW update from the gradients accumulated on `params`. Parameters
/// without a gradient buffer are treated as having zero gradient.
pub fn adamw_step(params: &mut ParamStore<f32>, state: &mut OptimizerState, hp: &AdamW, lr: f64) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape("adamw_step", &[state.m.len()], &[params.len()]));
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = params.get_mut(id);
        let n = p.numel();
        if state.m[i].len() != n || state.v[i].len() != n {
            return Err(Error::shape("adamw_step", &[state.m[i].len()], &[n]));
        }
        let grad = p.grad.take();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, theta) in p.data_mut().iter_mut().enumerate() {
            let g = grad.as_ref().map_or(0.0, |g| g[k] as f64);
            let mk = hp.beta1 * m[k] as f64 + (1.0 - hp.beta1) * g;
            let vk = hp.beta2 * v[k] as f64 + (1.0 - hp.beta2) * g * g;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let update = (mk / bc1) / ((vk / bc2).sqrt() + hp.eps);
            let th = *theta as f64;
            *theta = (th - lr * (update + hp.weight_decay * th)) as f32;
        }
    }
    Ok(())
}

/// One training or validation example held in memory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub row: usize,
    pub kind: Kind,
    pub query: Tensor<f32>,
    pub gt: Tensor<f32>,
    /// `E_C`, absent for the backbone-only baseline.
    pub context: Option<Tensor<f32>>,
}

/// Single-kind manifest rows split by scene into training and validation.
pub struct TrainData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl TrainData {
    /// Loads every single-kind row. With `unpaired`, training contexts come
    /// from [`Manifest::unpaired`]; validation always uses paired contexts.
    pub fn load(manifest: &Manifest, cache: Option<&mut EmbeddingCache<'_>>, unpaired: bool) -> Result<Self> {
        let train_rows = if unpaired { manifest.unpaired()? } else { manifest.clone() };
        let mut cache = cache;
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, row) in manifest.rows.iter().enumerate() {
            let Some(kind) = row.single_kind() else { continue };
            let is_val = is_validation_scene(row.scene_id);
            let ctx_row = if is_val { row } else { &train_rows.rows[i] };
            let context = match cache.as_deref_mut() {
                Some(c) => Some(c.get(
                    ctx_row.ctx_degraded.as_deref().unwrap(),
                    ctx_row.ctx_clean.as_deref().unwrap(),
                )?),
                None => None,
            };
            let s = Sample {
                row: i,
                kind,
                query: manifest.load_image(&row.query)?,
                gt: manifest.load_image(&row.gt)?,
                context,
            };
            if is_val {
                val.push(s);
            } else {
                train.push(s);
            }
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config(format!(
                "{}: need training and validation rows (validation scenes have id % 10 == 9)",
                manifest.root.display()
            )));
        }
        Ok(TrainData { train, val })
    }

    pub fn kinds(&self) -> Vec<Kind> {
        let mut k: Vec<Kind> = self.train.iter().map(|s| s.kind).collect();
        k.sort();
        k.dedup();
        k
    }
}

/// Per-kind shuffled queues drained round-robin in a shuffled kind order,
/// so every batch mixes kinds as evenly as the counts allow.
pub fn epoch_order(samples: &[Sample], cfg: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut rng = seed::rng(cfg.seed, &[0x0bde, epoch as u64]);
    let mut queues: BTreeMap<Kind, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        queues.entry(s.kind).or_default().push(i);
    }
    let mut queues: Vec<Vec<usize>> = queues.into_values().collect();
    for q in &mut queues {
        q.shuffle(&mut rng);
    }
    let mut order = Vec::with_capacity(samples.len());
    while queues.iter().any(|q| !q.is_empty()) {
        let mut round: Vec<usize> = (0..queues.len()).filter(|&k| !queues[k].is_empty()).collect();
        round.shuffle(&mut rng);
        for k in round {
            order.push(queues[k].pop().unwrap());
        }
    }
    order
}

/// Joint random crop and horizontal flip of a query/target pair.
pub fn augment(
    query: &Tensor<f32>,
    gt: &Tensor<f32>,
    crop: usize,
    flip_prob: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h, w) = crate::image::image_dims(query)?;
    if gt.shape() != query.shape() {
        return Err(Error::shape("augment", query.shape(), gt.shape()));
    }
    if crop > h || crop > w {
        return Err(Error::Config(format!("crop {crop} exceeds image size {h}x{w}")));
    }
    let y0 = rng.gen_range(0..=h - crop);
    let x0 = rng.gen_range(0..=w - crop);
    let flip = rng.gen_bool(flip_prob);
    let take = |img: &Tensor<f32>| {
        let d = img.data();
        let mut out = Vec::with_capacity(3 * crop * crop);
        for c in 0..3 {
            for y in 0..crop {
                let row = (c * h + y0 + y) * w + x0;
                if flip {
                    out.extend(d[row..row + crop].iter().rev());
                } else {
                    out.extend_from_slice(&d[row..row + crop]);
                }
            }
        }
        Tensor::new(&[3, crop, crop], out)
    };
    Ok((take(query)?, take(gt)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub wall_seconds: f64,
}

pub const LOG_FILE: &str = "train_log.tsv";
pub const LOG_HEADER: &str = "epoch\tmean_loss\tlr\tval_psnr\tval_ssim\twall_seconds";
pub const BEST_CHECKPOINT: &str = "best.awck";
pub const OPTIM_PREFIX: &str = "optim.";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.awck")
}

impl EpochLog {
    fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{:.3}",
            self.epoch, self.mean_loss, self.lr, self.val_psnr, self.val_ssim, self.wall_seconds
        )
    }
}

/// Validation PSNR/SSIM of the clamped output, averaged per kind and then
/// across kinds.
pub fn validate(model: &AwracleNet<f32>, samples: &[Sample]) -> Result<(f64, f64)> {
    let mut per_kind: BTreeMap<Kind, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in samples {
        let out = model.restore(&s.query, s.context.as_ref())?;
        let e = per_kind.entry(s.kind).or_default();
        e.0.push(psnr(&out, &s.gt, 1.0)?);
        e.1.push(ssim(&out, &s.gt)?);
    }
    let p: Vec<f64> = per_kind.values().map(|(p, _)| mean(p)).collect();
    let q: Vec<f64> = per_kind.values().map(|(_, q)| mean(q)).collect();
    Ok((mean(&p), mean(&q)))
}

/// Identity-baseline PSNR(query, gt) with the same per-kind averaging.
pub fn identity_psnr(samples: &[Sample]) -> Result<f64> {
    let mut per_kind: BTreeMap<Kind, Vec<f64>> = BTreeMap::new();
    for s in samples {
        per_kind.entry(s.kind).or_default().push(psnr(&s.query, &s.gt, 1.0)?);
    }
    Ok(mean(&per_kind.values().map(|v| mean(v)).collect::<Vec<_>>()))
}

/// Mutable state of a run; everything needed to resume.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: AwracleNet<f32>,
    pub optim: OptimizerState,
    /// Next epoch to run.
    pub epoch: usize,
    pub best_val_psnr: f64,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(model: AwracleNet<f32>) -> Self {
        let optim = OptimizerState::new(&model.params);
        TrainState {
            model,
            optim,
            epoch: 0,
            best_val_psnr: f64::NEG_INFINITY,
            best_epoch: None,
            log: Vec::new(),
        }
    }
}

/// Settings written into every checkpoint next to the model config.
#[derive(Clone, Debug)]
pub struct RunInfo {
    pub train: TrainConfig,
    pub embedder: Option<EmbedderSpec>,
    pub variant: Variant,
}

impl RunInfo {
    fn to_kv(&self, kv: &mut KeyValues) {
        self.train.to_kv(kv);
        if let Some(e) = &self.embedder {
            e.to_kv(kv);
        }
        kv.set("run.variant", self.variant);
    }
}

fn model_checkpoint(model: &AwracleNet<f32>, info: &RunInfo) -> Checkpoint {
    let mut ck = Checkpoint::from_model(model);
    info.to_kv(&mut ck.meta);
    ck
}

fn state_checkpoint(state: &TrainState, info: &RunInfo) -> Checkpoint {
    let mut ck = model_checkpoint(&state.model, info);
    for (i, id) in state.model.params.ids().enumerate() {
        let name = state.model.params.name(id);
        let shape = state.model.params.get(id).shape().to_vec();
        for (tag, buf) in [("m", &state.optim.m[i]), ("v", &state.optim.v[i])] {
            let t = Tensor::new(&shape, buf.clone()).expect("finite moments");
            ck.tensors.push((format!("{OPTIM_PREFIX}{tag}.{name}"), t));
        }
    }
    ck.meta.set("state.next_epoch", state.epoch);
    ck.meta.set("state.optim_t", state.optim.t);
    ck.meta.set("state.best_val_psnr", state.best_val_psnr);
    ck.meta.set("state.best_epoch", state.best_epoch.map_or(-1, |e| e as i64));
    ck
}

/// Model, optimizer and counters from an epoch checkpoint. The loss log is
/// re-read from `train_log.tsv` beside it when present.
pub fn resume_state(path: &Path) -> Result<(TrainState, RunInfo)> {
    let ck = load_checkpoint(path)?;
    let model = ck.to_model(&[OPTIM_PREFIX])?;
    let mut meta = ck.meta.clone();
    let ctx = path.display().to_string();
    let need = |meta: &mut KeyValues, key: &str| -> Result<String> {
        meta.take(key)
            .ok_or_else(|| Error::format(ctx.clone(), format!("missing {key} (not an epoch checkpoint)")))
    };
    let parse_err = |k: &str| Error::format(ctx.clone(), format!("bad value for {k}"));
    let epoch: usize = need(&mut meta, "state.next_epoch")?.parse().map_err(|_| parse_err("state.next_epoch"))?;
    let t: u64 = need(&mut meta, "state.optim_t")?.parse().map_err(|_| parse_err("state.optim_t"))?;
    let best_val_psnr: f64 = need(&mut meta, "state.best_val_psnr")?
        .parse()
        .map_err(|_| parse_err("state.best_val_psnr"))?;
    let best: i64 = need(&mut meta, "state.best_epoch")?.parse().map_err(|_| parse_err("state.best_epoch"))?;
    let mut optim = OptimizerState::new(&model.params);
    optim.t = t;
    for (i, id) in model.params.ids().enumerate() {
        let name = model.params.name(id);
        for (tag, buf) in [("m", &mut optim.m[i]), ("v", &mut optim.v[i])] {
            let key = format!("{OPTIM_PREFIX}{tag}.{name}");
            let t = ck.tensor(&key).ok_or_else(|| Error::format(ctx.clone(), format!("missing {key}")))?;
            if t.numel() != buf.len() {
                return Err(Error::format(ctx.clone(), format!("{key} has the wrong size")));
            }
            buf.copy_from_slice(t.data());
        }
    }
    let info = run_info_from_meta(&ck.meta)?;
    let log = path
        .parent()
        .map(|d| read_log(&d.join(LOG_FILE)).unwrap_or_default())
        .unwrap_or_default()
        .into_iter()
        .filter(|l| l.epoch < epoch)
        .collect();
    Ok((
        TrainState {
            model,
            optim,
            epoch,
            best_val_psnr,
            best_epoch: (best >= 0).then_some(best as usize),
            log,
        },
        info,
    ))
}

/// Training config, embedder spec and variant recorded in checkpoint metadata.
pub fn run_info_from_meta(meta: &KeyValues) -> Result<RunInfo> {
    let mut meta = meta.clone();
    let mut train = TrainConfig::default();
    let mut t = meta.split_prefix("train");
    train.apply_kv(&mut t)?;
    t.finish()?;
    let mut e = meta.split_prefix("embedder");
    let embedder = if e.is_empty() {
        None
    } else {
        let mut spec = EmbedderSpec::default();
        spec.apply_kv(&mut e)?;
        e.finish()?;
        Some(spec)
    };
    let variant = match meta.take("run.variant") {
        Some(v) => v.parse()?,
        None => Variant::Full,
    };
    Ok(RunInfo { train, embedder, variant })
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::format(ctx.clone(), format!("bad log line {l:?}")))
            };
            Ok(EpochLog {
                epoch: num(0)? as usize,
                mean_loss: num(1)?,
                lr: num(2)?,
                val_psnr: num(3)?,
                val_ssim: num(4)?,
                wall_seconds: num(5)?,
            })
        })
        .collect()
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = format!("{LOG_HEADER}\n");
    for l in log {
        let _ = writeln!(text, "{}", l.to_line());
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub out_dir: PathBuf,
}

impl TrainOutcome {
    pub fn best_checkpoint(&self) -> PathBuf {
        self.out_dir.join(BEST_CHECKPOINT)
    }

    pub fn final_log(&self) -> &EpochLog {
        self.state.log.last().expect("at least one epoch")
    }

    pub fn best_log(&self) -> &EpochLog {
        let e = self.state.best_epoch.expect("at least one epoch");
        self.state.log.iter().find(|l| l.epoch == e).expect("best epoch is logged")
    }
}

/// Which epochs to stop after; `None` runs to `cfg.epochs`.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainLimits {
    pub stop_after: Option<usize>,
}

/// Runs epochs `state.epoch..` and writes logs and checkpoints to `out_dir`.
pub fn train(
    mut state: TrainState,
    data: &TrainData,
    info: &RunInfo,
    out_dir: &Path,
    limits: TrainLimits,
) -> Result<TrainOutcome> {
    let cfg = &info.train;
    cfg.validate(&state.model.config)?;
    if state.model.uses_context() && data.train.iter().any(|s| s.context.is_none()) {
        return Err(Error::Config("context model needs context embeddings for every sample".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let hp = cfg.adamw();
    let end = limits.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    while state.epoch < end {
        let epoch = state.epoch;
        let started = Instant::now();
        let lr = lr_at(cfg, epoch as f64)?;
        let order = epoch_order(&data.train, cfg, epoch);
        let mut losses = Vec::with_capacity(order.len());
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let batch_seed = seed::derive(cfg.seed, &[0x57e9, epoch as u64, step as u64]);
            let mut rng = seed::rng(batch_seed, &[]);
            let weight = 1.0 / batch.len() as f32;
            state.model.params.zero_grads();
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let s = &data.train[i];
                let (q, gt) = augment(&s.query, &s.gt, cfg.crop, cfg.flip_prob, &mut rng)?;
                let mut tape = Tape::new();
                let p = state.model.params.bind(&mut tape);
                let x = tape.constant(q);
                let ctx = s.context.as_ref().map(|c| tape.constant(c.clone()));
                let out = state.model.forward(&mut tape, &p, x, ctx)?;
                let target = tape.constant(gt);
                let loss = tape.l1_loss(out.output, target)?;
                let value = tape.value(loss).data()[0] as f64;
                if !value.is_finite() {
                    let rows: Vec<usize> = batch.iter().map(|&j| data.train[j].row).collect();
                    let dump = out_dir.join("nan_dump.txt");
                    let msg = format!(
                        "non-finite loss at epoch {epoch}, step {step}, batch seed {batch_seed:#018x}, manifest rows {rows:?}"
                    );
                    fs::write(&dump, format!("{msg}\n")).map_err(|e| Error::io(&dump, e))?;
                    return Err(Error::Numerical(format!("{msg} (details in {})", dump.display())));
                }
                batch_loss += value;
                tape.backward(loss)?;
                state.model.params.accumulate_grads(&tape, &p, weight);
            }
            adamw_step(&mut state.model.params, &mut state.optim, &hp, lr)?;
            losses.push(batch_loss / batch.len() as f64);
        }
        let (val_psnr, val_ssim) = validate(&state.model, &data.val)?;
        state.epoch += 1;
        if val_psnr > state.best_val_psnr {
            state.best_val_psnr = val_psnr;
            state.best_epoch = Some(epoch);
            save_checkpoint(&out_dir.join(BEST_CHECKPOINT), &model_checkpoint(&state.model, info))?;
        }
        state.log.push(EpochLog {
            epoch,
            mean_loss: mean(&losses),
            lr,
            val_psnr,
            val_ssim,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        write_log(&out_dir.join(LOG_FILE), &state.log)?;
        save_checkpoint(&out_dir.join(epoch_checkpoint_name(epoch)), &state_checkpoint(&state, info))?;
    }
    Ok(TrainOutcome {
        state,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Trains one ablation variant from scratch: the variant sets the model
/// flags, and `unpaired` swaps each training context's clean image.
pub fn ablation_train(
    variant: Variant,
    model: ModelConfig,
    manifest: &Manifest,
    cache: &mut EmbeddingCache<'_>,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let config = model.with_variant(variant);
    let net = AwracleNet::new(config)?;
    let uses_context = net.uses_context();
    let spec = cache.embedder().spec().clone();
    let data = TrainData::load(manifest, uses_context.then_some(cache), variant.uses_unpaired_context())?;
    let info = RunInfo {
        train: cfg.clone(),
        embedder: uses_context.then_some(spec),
        variant,
    };
    train(TrainState::new(net), &data, &info, out_dir, TrainLimits::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_golden() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[1], 1.0f32));
        store.get_mut(id).grad = Some(vec![1.0]);
        let mut st = OptimizerState::new(&store);
        let hp = TrainConfig::default().adamw();
        adamw_step(&mut store, &mut st, &hp, 0.1).unwrap();
        assert!((store.get(id).data()[0] as f64 - 0.899).abs() < 1e-6);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adamw_zero_gradient_cases() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], vec![0.5f32, -2.0]).unwrap());
        let mut st = OptimizerState::new(&store);
        let quiet = AdamW { weight_decay: 0.0, ..TrainConfig::default().adamw() };
        adamw_step(&mut store, &mut st, &quiet, 0.3).unwrap();
        assert_eq!(store.get(id).data(), &[0.5, -2.0]);
        let decay = TrainConfig::default().adamw();
        adamw_step(&mut store, &mut st, &decay, 0.5).unwrap();
        let expect = [0.5 * (1.0 - 0.5 * 0.01), -2.0 * (1.0 - 0.5 * 0.01)];
        for (a, b) in store.get(id).data().iter().zip(expect) {
            assert!((*a as f64 - b).abs() < 1e-7);
        }
    }

    #[test]
    fn adamw_rejects_mismatched_state() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::full(&[3], 1.0f32));
        let mut st = OptimizerState { m: vec![vec![0.0; 2]], v: vec![vec![0.0; 2]], t: 0 };
        assert!(adamw_step(&mut store, &mut st, &TrainConfig::default().adamw(), 0.1).is_err());
    }

    #[test]
    fn schedule_golden_values() {
        let cfg = TrainConfig::default();
        assert!((lr_at(&cfg, 3.0).unwrap() - 2e-4).abs() < 1e-12);
        assert!((lr_at(&cfg, 30.0).unwrap() - 0.0).abs() < 1e-12);
        assert!((lr_at(&cfg, 3.0 + 13.5).unwrap() - 1e-4).abs() < 1e-12);
        assert!((lr_at(&cfg, 0.0).unwrap() - 2e-4 / 3.0).abs() < 1e-12);
        assert!((lr_at(&cfg, 2.0).unwrap() - 2e-4).abs() < 1e-12);
        assert!(lr_at(&cfg, 30.5).is_err());
        assert!(lr_at(&cfg, -0.1).is_err());
    }

    #[test]
    fn config_validation_and_kv() {
        let m = ModelConfig::default();
        TrainConfig::default().validate(&m).unwrap();
        let bad = TrainConfig { warmup_epochs: 30, ..TrainConfig::default() };
        assert!(bad.validate(&m).is_err());
        let bad = TrainConfig { crop: 28, ..TrainConfig::default() };
        assert!(bad.validate(&m).is_err());
        let cfg = TrainConfig { seed: 9, base_lr: 3e-4, ..TrainConfig::default() };
        let mut kv = KeyValues::default();
        cfg.to_kv(&mut kv);
        let mut back = TrainConfig::default();
        back.apply_kv(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(back, cfg);
    }

    fn dummy(kind: Kind) -> Sample {
        Sample { row: 0, kind, query: Tensor::zeros(&[3, 16, 16]), gt: Tensor::zeros(&[3, 16, 16]), context: None }
    }

    #[test]
    fn epoch_order_is_a_balanced_permutation() {
        let samples: Vec<Sample> = (0..30).map(|i| dummy(Kind::ALL[i % 3])).collect();
        let cfg = TrainConfig::default();
        let order = epoch_order(&samples, &cfg, 4);
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..30).collect::<Vec<_>>());
        for chunk in order.chunks(3) {
            let mut kinds: Vec<Kind> = chunk.iter().map(|&i| samples[i].kind).collect();
            kinds.sort();
            assert_eq!(kinds, Kind::ALL.to_vec());
        }
        assert_eq!(order, epoch_order(&samples, &cfg, 4));
        assert_ne!(order, epoch_order(&samples, &cfg, 5));
    }

    #[test]
    fn augment_crops_and_flips_jointly() {
        let data: Vec<f32> = (0..3 * 8 * 8).map(|i| i as f32 / 192.0).collect();
        let q = Tensor::new(&[3, 8, 8], data).unwrap();
        let gt = q.clone();
        let mut rng = seed::rng(1, &[]);
        for _ in 0..20 {
            let (a, b) = augment(&q, &gt, 4, 0.5, &mut rng).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.shape(), &[3, 4, 4]);
        }
        let (a, _) = augment(&q, &gt, 8, 1.0, &mut rng).unwrap();
        assert_eq!(a.at(&[0, 0, 0]), q.at(&[0, 0, 7]));
        let (a, _) = augment(&q, &gt, 8, 0.0, &mut rng).unwrap();
        assert_eq!(a, q);
    }
}
