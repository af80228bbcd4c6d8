//! Evaluation protocols: restoration quality under a context policy,
//! fixed-context spread, DCE cluster separation and selective removal on
//! haze+snow mixtures.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::embedder::EmbeddingCache;
use crate::error::{Error, Result};
use crate::metrics::{mean, psnr, ssim, std_dev};
use crate::image::{crop, image_dims, reflect_pad_to_multiple};
use crate::model::{load_checkpoint, AwracleNet};
use crate::train::{run_info_from_meta, RunInfo, OPTIM_PREFIX};
use crate::seed;
use crate::synth::{is_validation_scene, Kind, Manifest, RowKind};
use crate::tensor::{write_awtf, Tensor};

pub const REPORT_FILE: &str = "eval_report.tsv";
pub const RATIO_CAP: f64 = 1e6;
pub const MIN_CLUSTER_PAIRS: usize = 5;
pub const THREADS_ENV: &str = "AWRACLE_THREADS";

/// How each query gets its context pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ContextPolicy {
    /// A random training pair of the query's kind.
    RandomPerImage,
    /// Training pair number `i` of the query's kind, for every `i` listed.
    Fixed(Vec<usize>),
    /// A random training pair of some other kind.
    IncorrectKind,
}

impl ContextPolicy {
    pub fn name(&self) -> String {
        match self {
            ContextPolicy::RandomPerImage => "random_per_image".into(),
            ContextPolicy::IncorrectKind => "incorrect_kind".into(),
            ContextPolicy::Fixed(ids) => match ids.as_slice() {
                [one] => format!("fixed:{one}"),
                _ => "fixed".into(),
            },
        }
    }
}

impl fmt::Display for ContextPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for ContextPolicy {
    type Err = Error;

    /// `random_per_image`, `incorrect_kind`, `fixed:N` or `fixed:A..B` (inclusive).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Usage(format!(
            "unknown context policy {s:?} (expected random_per_image, incorrect_kind, fixed:N or fixed:A..B)"
        ));
        match s {
            "random_per_image" => Ok(ContextPolicy::RandomPerImage),
            "incorrect_kind" => Ok(ContextPolicy::IncorrectKind),
            _ => {
                let spec = s.strip_prefix("fixed:").ok_or_else(bad)?;
                let ids = match spec.split_once("..") {
                    Some((a, b)) => {
                        let a: usize = a.parse().map_err(|_| bad())?;
                        let b: usize = b.parse().map_err(|_| bad())?;
                        if b < a {
                            return Err(bad());
                        }
                        (a..=b).collect()
                    }
                    None => vec![spec.parse().map_err(|_| bad())?],
                };
                Ok(ContextPolicy::Fixed(ids))
            }
        }
    }
}

/// One `protocol, kind, metric, value` line.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportEntry {
    pub protocol: String,
    pub kind: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub entries: Vec<ReportEntry>,
}

impl EvalReport {
    pub fn push(&mut self, protocol: &str, kind: &str, metric: &str, value: f64) {
        self.entries.push(ReportEntry {
            protocol: protocol.into(),
            kind: kind.into(),
            metric: metric.into(),
            value,
        });
    }

    pub fn get(&self, protocol: &str, kind: &str, metric: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.protocol == protocol && e.kind == kind && e.metric == metric)
            .map(|e| e.value)
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.entries.extend(other.entries);
    }

    /// Values use the shortest representation that parses back exactly.
    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\t{}\n", e.protocol, e.kind, e.metric, e.value))
            .collect()
    }

    pub fn parse(text: &str, ctx: &str) -> Result<Self> {
        let mut report = EvalReport::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let value = match f.as_slice() {
                [_, _, _, v] => v.parse::<f64>().ok(),
                _ => None,
            }
            .ok_or_else(|| Error::format(format!("{ctx}:{}", i + 1), format!("bad report line {line:?}")))?;
            report.push(f[0], f[1], f[2], value);
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// A context pair drawn from the training split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolEntry {
    pub row: usize,
    pub degraded: String,
    pub clean: String,
}

/// Training-split context pairs per kind, in manifest order.
pub fn context_pools(manifest: &Manifest) -> BTreeMap<Kind, Vec<PoolEntry>> {
    let mut pools: BTreeMap<Kind, Vec<PoolEntry>> = BTreeMap::new();
    for (i, r) in manifest.rows.iter().enumerate() {
        if let (Some(k), Some(d), Some(c)) = (r.single_kind(), &r.ctx_degraded, &r.ctx_clean) {
            if !is_validation_scene(r.scene_id) {
                pools.entry(k).or_default().push(PoolEntry {
                    row: i,
                    degraded: d.clone(),
                    clean: c.clone(),
                });
            }
        }
    }
    pools
}

fn pick<'p>(pools: &'p BTreeMap<Kind, Vec<PoolEntry>>, kind: Kind, rng: &mut impl Rng) -> Result<&'p PoolEntry> {
    let pool = pools
        .get(&kind)
        .filter(|p| !p.is_empty())
        .ok_or_else(|| Error::Config(format!("no training context pairs of kind {kind}")))?;
    Ok(&pool[rng.gen_range(0..pool.len())])
}

/// Validation rows with single-kind degradations.
pub fn test_rows(manifest: &Manifest) -> Vec<usize> {
    (0..manifest.rows.len())
        .filter(|&i| {
            let r = &manifest.rows[i];
            r.single_kind().is_some() && is_validation_scene(r.scene_id)
        })
        .collect()
}

struct Scores {
    psnr: BTreeMap<Kind, Vec<f64>>,
    ssim: BTreeMap<Kind, Vec<f64>>,
}

impl Scores {
    fn new() -> Self {
        Scores {
            psnr: BTreeMap::new(),
            ssim: BTreeMap::new(),
        }
    }

    fn add(&mut self, kind: Kind, p: f64, s: f64) {
        self.psnr.entry(kind).or_default().push(p);
        self.ssim.entry(kind).or_default().push(s);
    }

    /// Per-kind means plus the mean over kinds under `"all"`.
    fn summarize(&self, report: &mut EvalReport, protocol: &str, suffix: &str) {
        for (metric, map) in [("psnr", &self.psnr), ("ssim", &self.ssim)] {
            let per_kind: Vec<f64> = map.values().map(|v| mean(v)).collect();
            for (k, v) in map.keys().zip(&per_kind) {
                report.push(protocol, k.name(), &format!("{metric}{suffix}"), *v);
            }
            report.push(protocol, "all", &format!("{metric}{suffix}"), mean(&per_kind));
        }
    }
}

/// Worker count from `AWRACLE_THREADS`, default 1.
pub fn worker_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Maps `f` over `items` on `worker_threads()` workers, keeping input order.
pub fn parallel_map<I: Sync, O: Send>(items: &[I], f: impl Fn(&I) -> Result<O> + Sync + Send) -> Result<Vec<O>> {
    parallel_map_on(worker_threads()?, items, f)
}

pub fn parallel_map_on<I: Sync, O: Send>(
    threads: usize,
    items: &[I],
    f: impl Fn(&I) -> Result<O> + Sync + Send,
) -> Result<Vec<O>> {
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

fn score_all(
    model: &AwracleNet<f32>,
    images: &[(Kind, Tensor<f32>, Tensor<f32>)],
    contexts: &[Option<Tensor<f32>>],
) -> Result<Scores> {
    let jobs: Vec<usize> = (0..images.len()).collect();
    let scored = parallel_map(&jobs, |&i| {
        let (_, q, gt) = &images[i];
        let out = model.restore(q, contexts[i].as_ref())?;
        Ok((psnr(&out, gt, 1.0)?, ssim(&out, gt)?))
    })?;
    let mut scores = Scores::new();
    for ((k, _, _), (p, s)) in images.iter().zip(scored) {
        scores.add(*k, p, s);
    }
    Ok(scores)
}

/// Restores every validation query under `policy` and reports PSNR/SSIM
/// per kind. `Fixed` with several ids reports `psnr_mean`/`psnr_std` over
/// the per-pair means (and the same for SSIM). Identity PSNR(query, gt) is
/// always included under the `identity` protocol.
pub fn eval_model(
    model: &AwracleNet<f32>,
    manifest: &Manifest,
    cache: &mut EmbeddingCache<'_>,
    policy: &ContextPolicy,
    seed_value: u64,
) -> Result<EvalReport> {
    let rows = test_rows(manifest);
    if rows.is_empty() {
        return Err(Error::Config(format!("{}: no validation rows", manifest.root.display())));
    }
    let pools = context_pools(manifest);
    let kinds: Vec<Kind> = pools.keys().copied().collect();
    if *policy == ContextPolicy::IncorrectKind && kinds.len() < 2 {
        return Err(Error::Config("incorrect_kind needs a manifest with at least two kinds".into()));
    }
    let images: Vec<(Kind, Tensor<f32>, Tensor<f32>)> = rows
        .iter()
        .map(|&i| {
            let r = &manifest.rows[i];
            Ok((r.single_kind().unwrap(), manifest.load_image(&r.query)?, manifest.load_image(&r.gt)?))
        })
        .collect::<Result<_>>()?;
    let mut report = EvalReport::default();
    let mut identity = Scores::new();
    for (k, q, gt) in &images {
        identity.add(*k, psnr(q, gt, 1.0)?, ssim(q, gt)?);
    }
    identity.summarize(&mut report, "identity", "");

    let mut embed = |ctx: &PoolEntry| -> Result<Option<Tensor<f32>>> {
        if !model.uses_context() {
            return Ok(None);
        }
        Ok(Some(cache.get(&ctx.degraded, &ctx.clean)?))
    };
    let protocol = policy.name();
    match policy {
        ContextPolicy::RandomPerImage | ContextPolicy::IncorrectKind => {
            let mut contexts = Vec::with_capacity(images.len());
            for (n, (k, _, _)) in images.iter().enumerate() {
                let mut rng = seed::rng(seed_value, &[0xe7a1, rows[n] as u64]);
                let ctx_kind = if *policy == ContextPolicy::IncorrectKind {
                    let others: Vec<Kind> = kinds.iter().copied().filter(|o| o != k).collect();
                    others[rng.gen_range(0..others.len())]
                } else {
                    *k
                };
                contexts.push(embed(pick(&pools, ctx_kind, &mut rng)?)?);
            }
            let scores = score_all(model, &images, &contexts)?;
            scores.summarize(&mut report, &protocol, "");
        }
        ContextPolicy::Fixed(ids) => {
            let mut per_pair: Vec<EvalReport> = Vec::new();
            for &id in ids {
                let mut contexts = Vec::with_capacity(images.len());
                for (k, _, _) in &images {
                    let pool = pools.get(k).map(Vec::as_slice).unwrap_or(&[]);
                    let entry = pool.get(id).ok_or_else(|| {
                        Error::Config(format!("fixed context {id} out of range: {} {k} training pairs", pool.len()))
                    })?;
                    contexts.push(embed(entry)?);
                }
                let scores = score_all(model, &images, &contexts)?;
                let mut r = EvalReport::default();
                scores.summarize(&mut r, &format!("fixed:{id}"), "");
                per_pair.push(r);
            }
            if per_pair.len() == 1 {
                report.extend(per_pair.pop().unwrap());
            } else {
                let mut labels: Vec<String> = kinds.iter().map(|k| k.name().to_string()).collect();
                labels.push("all".into());
                for kind in labels {
                    for metric in ["psnr", "ssim"] {
                        let vals: Vec<f64> = per_pair
                            .iter()
                            .zip(ids)
                            .filter_map(|(r, id)| r.get(&format!("fixed:{id}"), &kind, metric))
                            .collect();
                        if vals.is_empty() {
                            continue;
                        }
                        report.push("fixed", &kind, &format!("{metric}_mean"), mean(&vals));
                        report.push("fixed", &kind, &format!("{metric}_std"), std_dev(&vals));
                    }
                }
                for r in per_pair {
                    report.extend(r);
                }
            }
        }
    }
    Ok(report)
}

/// Mean over rows of a token matrix.
fn pooled(t: &Tensor<f32>) -> Vec<f64> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    (0..cols)
        .map(|c| mean(&(0..rows).map(|r| t.data()[r * cols + c] as f64).collect::<Vec<_>>()))
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Inter/intra ratio of labelled vectors: mean distance between kind
/// centroids over mean distance of each vector to its own centroid.
pub fn separation_ratio(points: &[(Kind, Vec<f64>)]) -> Result<f64> {
    let mut groups: BTreeMap<Kind, Vec<&Vec<f64>>> = BTreeMap::new();
    for (k, v) in points {
        groups.entry(*k).or_default().push(v);
    }
    if groups.len() < 2 {
        return Err(Error::Config("cluster separation needs at least two kinds".into()));
    }
    if let Some((k, g)) = groups.iter().find(|(_, g)| g.len() < MIN_CLUSTER_PAIRS) {
        return Err(Error::Config(format!(
            "cluster separation needs ≥{MIN_CLUSTER_PAIRS} pairs per kind, {k} has {}",
            g.len()
        )));
    }
    let dim = points[0].1.len();
    let centroids: BTreeMap<Kind, Vec<f64>> = groups
        .iter()
        .map(|(k, g)| {
            let c = (0..dim).map(|d| mean(&g.iter().map(|v| v[d]).collect::<Vec<_>>())).collect();
            (*k, c)
        })
        .collect();
    let intra = mean(&points.iter().map(|(k, v)| dist(v, &centroids[k])).collect::<Vec<_>>());
    let cs: Vec<&Vec<f64>> = centroids.values().collect();
    let mut inter = Vec::new();
    for i in 0..cs.len() {
        for j in i + 1..cs.len() {
            inter.push(dist(cs[i], cs[j]));
        }
    }
    let inter = mean(&inter);
    if intra < 1e-12 {
        return Ok(RATIO_CAP);
    }
    Ok((inter / intra).min(RATIO_CAP))
}

/// Deepest level that carries a DCE block.
pub fn deepest_dce_level(model: &AwracleNet<f32>) -> Option<usize> {
    (0..model.dce.len()).rev().find(|&l| model.dce[l].is_some())
}

/// Separation of mean-pooled deepest-level `O_DCE` vectors, one per
/// context embedding.
pub fn cluster_separation(model: &AwracleNet<f32>, contexts: &[(Kind, Tensor<f32>)]) -> Result<f64> {
    let level = deepest_dce_level(model).ok_or_else(|| Error::Config("model has no DCE blocks".into()))?;
    let points = contexts
        .iter()
        .map(|(k, e)| {
            let outs = model.dce_outputs(e)?;
            Ok((*k, pooled(outs[level].as_ref().expect("level has a DCE block"))))
        })
        .collect::<Result<Vec<_>>>()?;
    separation_ratio(&points)
}

/// The first `per_kind` training context embeddings of every kind.
pub fn cluster_contexts(
    manifest: &Manifest,
    cache: &mut EmbeddingCache<'_>,
    per_kind: usize,
) -> Result<Vec<(Kind, Tensor<f32>)>> {
    let mut out = Vec::new();
    for (k, pool) in context_pools(manifest) {
        for e in pool.iter().take(per_kind) {
            out.push((k, cache.get(&e.degraded, &e.clean)?));
        }
    }
    Ok(out)
}

/// PSNRs of one mixture sample under haze and snow context.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureScore {
    pub row: usize,
    pub haze_ctx_vs_snow_only: f64,
    pub haze_ctx_vs_haze_only: f64,
    pub snow_ctx_vs_haze_only: f64,
    pub snow_ctx_vs_snow_only: f64,
}

impl MixtureScore {
    /// Haze context leaves the snow-only image behind.
    pub fn haze_direction(&self) -> bool {
        self.haze_ctx_vs_snow_only > self.haze_ctx_vs_haze_only
    }

    /// Snow context leaves the haze-only image behind.
    pub fn snow_direction(&self) -> bool {
        self.snow_ctx_vs_haze_only > self.snow_ctx_vs_snow_only
    }

    pub fn success(&self) -> bool {
        self.haze_direction() && self.snow_direction()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveRemoval {
    pub samples: Vec<MixtureScore>,
}

impl SelectiveRemoval {
    fn rate(&self, f: impl Fn(&MixtureScore) -> bool) -> f64 {
        self.samples.iter().filter(|s| f(s)).count() as f64 / self.samples.len() as f64
    }

    /// Fraction of samples where both directions hold.
    pub fn success_rate(&self) -> f64 {
        self.rate(MixtureScore::success)
    }

    pub fn haze_rate(&self) -> f64 {
        self.rate(MixtureScore::haze_direction)
    }

    pub fn snow_rate(&self) -> f64 {
        self.rate(MixtureScore::snow_direction)
    }

    pub fn to_report(&self) -> EvalReport {
        let mut r = EvalReport::default();
        let avg = |f: fn(&MixtureScore) -> f64| mean(&self.samples.iter().map(f).collect::<Vec<_>>());
        r.push("selective", "mixture", "haze_ctx_vs_snow_only", avg(|s| s.haze_ctx_vs_snow_only));
        r.push("selective", "mixture", "haze_ctx_vs_haze_only", avg(|s| s.haze_ctx_vs_haze_only));
        r.push("selective", "mixture", "snow_ctx_vs_haze_only", avg(|s| s.snow_ctx_vs_haze_only));
        r.push("selective", "mixture", "snow_ctx_vs_snow_only", avg(|s| s.snow_ctx_vs_snow_only));
        r.push("selective", "mixture", "haze_direction_rate", self.haze_rate());
        r.push("selective", "mixture", "snow_direction_rate", self.snow_rate());
        r.push("selective", "mixture", "success_rate", self.success_rate());
        r
    }
}

/// Restores every mixture twice, with a random training haze pair and a
/// random training snow pair, and compares against the single-degradation
/// renders.
pub fn selective_removal_score(
    model: &AwracleNet<f32>,
    manifest: &Manifest,
    cache: &mut EmbeddingCache<'_>,
    seed_value: u64,
) -> Result<SelectiveRemoval> {
    if !model.uses_context() {
        return Err(Error::Config("selective removal needs a context model".into()));
    }
    let pools = context_pools(manifest);
    let mut samples = Vec::new();
    for (i, row) in manifest.rows.iter().enumerate() {
        if row.kind != RowKind::Mixture {
            continue;
        }
        let (haze_rel, snow_rel) = row.mixture_intermediates().expect("mixture row");
        let missing = |rel: &str| !manifest.path(rel).is_file();
        if missing(&haze_rel) || missing(&snow_rel) {
            return Err(Error::Lookup(format!(
                "mixture {} lacks its haze-only/snow-only ground truths",
                row.query
            )));
        }
        let q = manifest.load_image(&row.query)?;
        let haze_only = manifest.load_image(&haze_rel)?;
        let snow_only = manifest.load_image(&snow_rel)?;
        let mut rng = seed::rng(seed_value, &[0x5e1, i as u64]);
        let h = pick(&pools, Kind::Haze, &mut rng)?;
        let s = pick(&pools, Kind::Snow, &mut rng)?;
        let out_h = model.restore(&q, Some(&cache.get(&h.degraded, &h.clean)?))?;
        let out_s = model.restore(&q, Some(&cache.get(&s.degraded, &s.clean)?))?;
        samples.push(MixtureScore {
            row: i,
            haze_ctx_vs_snow_only: psnr(&out_h, &snow_only, 1.0)?,
            haze_ctx_vs_haze_only: psnr(&out_h, &haze_only, 1.0)?,
            snow_ctx_vs_haze_only: psnr(&out_s, &haze_only, 1.0)?,
            snow_ctx_vs_snow_only: psnr(&out_s, &snow_only, 1.0)?,
        });
    }
    if samples.is_empty() {
        return Err(Error::Lookup(format!("{}: no mixture samples", manifest.root.display())));
    }
    Ok(SelectiveRemoval { samples })
}

/// Model plus the run settings stored in a checkpoint.
pub fn load_trained(path: &Path) -> Result<(AwracleNet<f32>, RunInfo)> {
    let ck = load_checkpoint(path)?;
    let model = ck.to_model(&[OPTIM_PREFIX])?;
    Ok((model, run_info_from_meta(&ck.meta)?))
}

/// Restores an image of any size: reflect-pads to the model's size
/// multiple, restores and crops back.
pub fn restore_padded(model: &AwracleNet<f32>, image: &Tensor<f32>, context: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
    let (h, w) = image_dims(image)?;
    let padded = reflect_pad_to_multiple(image, model.config.size_multiple())?;
    crop(&model.restore(&padded, context)?, h, w)
}

/// Writes `dce_act_<level>_<sample>.awtf` for every level with a DCE block.
pub fn dump_dce_activations(
    model: &AwracleNet<f32>,
    context: &Tensor<f32>,
    out_dir: &Path,
    sample: usize,
) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (level, out) in model.dce_outputs(context)?.into_iter().enumerate() {
        if let Some(t) = out {
            let path = out_dir.join(format!("dce_act_{level}_{sample}.awtf"));
            write_awtf(&path, &t)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..50).collect();
        let serial = parallel_map_on(1, &items, |&x| Ok(x * x)).unwrap();
        assert_eq!(parallel_map_on(3, &items, |&x| Ok(x * x)).unwrap(), serial);
        assert!(parallel_map_on(2, &items, |&x| if x == 7 { Err(Error::Numerical("x".into())) } else { Ok(x) }).is_err());
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("random_per_image".parse::<ContextPolicy>().unwrap(), ContextPolicy::RandomPerImage);
        assert_eq!("fixed:0..9".parse::<ContextPolicy>().unwrap(), ContextPolicy::Fixed((0..10).collect()));
        assert_eq!("fixed:4".parse::<ContextPolicy>().unwrap().name(), "fixed:4");
        for bad in ["fixed:9..2", "fixed:", "sometimes"] {
            assert!(bad.parse::<ContextPolicy>().is_err(), "{bad}");
        }
    }

    #[test]
    fn report_round_trip_is_lossless() {
        let mut r = EvalReport::default();
        r.push("random_per_image", "haze", "psnr", 23.456789012345678);
        r.push("fixed", "all", "psnr_std", 1e-17);
        r.push("selective", "mixture", "success_rate", 2.0 / 3.0);
        let back = EvalReport::parse(&r.to_tsv(), "t").unwrap();
        assert_eq!(back, r);
        assert_eq!(back.get("fixed", "all", "psnr_std"), Some(1e-17));
        assert!(EvalReport::parse("a\tb\tc\n", "t").is_err());
    }

    fn blob(k: Kind, centre: f64, n: usize, spread: f64) -> Vec<(Kind, Vec<f64>)> {
        (0..n).map(|i| (k, vec![centre + spread * (i as f64 - 2.0), centre])).collect()
    }

    #[test]
    fn separation_ratio_cases() {
        let mut same: Vec<(Kind, Vec<f64>)> = Vec::new();
        same.extend(blob(Kind::Haze, 1.0, 5, 0.0));
        same.extend(blob(Kind::Rain, 1.0, 5, 0.0));
        assert_eq!(separation_ratio(&same).unwrap(), RATIO_CAP);

        // Two kinds 3√2 apart, each spread at offsets {−2,−1,0,1,2}·0.5 on one axis.
        let mut pts = blob(Kind::Haze, 0.0, 5, 0.5);
        pts.extend(blob(Kind::Snow, 3.0, 5, 0.5));
        let expect = (18f64).sqrt() / 0.6;
        assert!((separation_ratio(&pts).unwrap() - expect).abs() < 1e-12);

        assert!(separation_ratio(&blob(Kind::Haze, 0.0, 6, 1.0)).is_err());
        let mut few = blob(Kind::Haze, 0.0, 4, 1.0);
        few.extend(blob(Kind::Rain, 1.0, 5, 1.0));
        assert!(separation_ratio(&few).is_err());
    }

    #[test]
    fn selective_rates() {
        let s = |a: f64, b: f64, c: f64, d: f64| MixtureScore {
            row: 0,
            haze_ctx_vs_snow_only: a,
            haze_ctx_vs_haze_only: b,
            snow_ctx_vs_haze_only: c,
            snow_ctx_vs_snow_only: d,
        };
        let r = SelectiveRemoval { samples: vec![s(30.0, 20.0, 30.0, 20.0), s(30.0, 20.0, 20.0, 30.0), s(1.0, 2.0, 1.0, 2.0)] };
        assert_eq!(r.success_rate(), 1.0 / 3.0);
        assert_eq!(r.haze_rate(), 2.0 / 3.0);
        assert_eq!(r.snow_rate(), 1.0 / 3.0);
    }
}
