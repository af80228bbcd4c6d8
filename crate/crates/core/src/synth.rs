//! Procedural clean scenes, haze/rain/snow degradations at two severities,
//! and the on-disk dataset (AWTF images, PPM previews, `manifest.tsv`).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::write_ppm;
use crate::seed;
use crate::tensor::{read_awtf, write_awtf, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kind {
    Haze,
    Rain,
    Snow,
}

impl Kind {
    pub const ALL: [Kind; 3] = [Kind::Haze, Kind::Rain, Kind::Snow];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Haze => "haze",
            Kind::Rain => "rain",
            Kind::Snow => "snow",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown degradation kind {s:?} (expected haze, rain or snow)")))
    }
}

/// Parses a comma-separated kind list such as `haze,rain,snow`.
pub fn parse_kinds(list: &str) -> Result<Vec<Kind>> {
    let mut kinds = Vec::new();
    for part in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let k: Kind = part.parse()?;
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    if kinds.is_empty() {
        return Err(Error::Usage("empty kind list".into()));
    }
    Ok(kinds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Severity {
    Light,
    Heavy,
}

impl Severity {
    pub const ALL: [Severity; 2] = [Severity::Light, Severity::Heavy];

    pub fn name(self) -> &'static str {
        match self {
            Severity::Light => "light",
            Severity::Heavy => "heavy",
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Severity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "light" => Ok(Severity::Light),
            "heavy" => Ok(Severity::Heavy),
            _ => Err(Error::Usage(format!("unknown severity {s:?} (expected light or heavy)"))),
        }
    }
}

// ---- scenes ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Smooth four-corner gradient overlaid with rectangles, discs and strokes.
pub fn render_scene(spec: &SceneSpec) -> Result<Tensor<f32>> {
    let (h, w) = (spec.height, spec.width);
    if h < 16 || w < 16 {
        return Err(Error::Param(format!("scenes need H, W ≥ 16, got {h}x{w}")));
    }
    let mut rng = seed::rng(spec.seed, &[0x5ce7e]);
    let corners = [color(&mut rng), color(&mut rng), color(&mut rng), color(&mut rng)];
    let mut img = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        let fy = y as f32 / (h - 1) as f32;
        for x in 0..w {
            let fx = x as f32 / (w - 1) as f32;
            for c in 0..3 {
                let top = corners[0][c] * (1.0 - fx) + corners[1][c] * fx;
                let bot = corners[2][c] * (1.0 - fx) + corners[3][c] * fx;
                img[(c * h + y) * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let (hf, wf) = (h as f32, w as f32);
    for _ in 0..rng.gen_range(2..=5) {
        let col = color(&mut rng);
        let x0 = rng.gen_range(0.0..wf * 0.8);
        let y0 = rng.gen_range(0.0..hf * 0.8);
        let x1 = (x0 + rng.gen_range(wf * 0.1..wf * 0.5)).min(wf);
        let y1 = (y0 + rng.gen_range(hf * 0.1..hf * 0.5)).min(hf);
        paint(&mut img, h, w, col, |px, py| px >= x0 && px < x1 && py >= y0 && py < y1);
    }
    for _ in 0..rng.gen_range(1..=4) {
        let col = color(&mut rng);
        let cx = rng.gen_range(0.0..wf);
        let cy = rng.gen_range(0.0..hf);
        let r = rng.gen_range(hf.min(wf) * 0.06..hf.min(wf) * 0.25);
        paint(&mut img, h, w, col, |px, py| (px - cx).powi(2) + (py - cy).powi(2) <= r * r);
    }
    for _ in 0..rng.gen_range(1..=3) {
        let col = color(&mut rng);
        let a = (rng.gen_range(0.0..wf), rng.gen_range(0.0..hf));
        let b = (rng.gen_range(0.0..wf), rng.gen_range(0.0..hf));
        let half = rng.gen_range(0.5..1.5f32);
        paint(&mut img, h, w, col, |px, py| segment_distance((px, py), a, b) <= half);
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(&[3, h, w], img)
}

fn paint(img: &mut [f32], h: usize, w: usize, col: [f32; 3], inside: impl Fn(f32, f32) -> bool) {
    for y in 0..h {
        for x in 0..w {
            if inside(x as f32 + 0.5, y as f32 + 0.5) {
                for (c, &v) in col.iter().enumerate() {
                    img[(c * h + y) * w + x] = v;
                }
            }
        }
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

// ---- degradations ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct HazeParams {
    /// Scattering coefficient β.
    pub beta: f32,
    /// Per-channel airlight A.
    pub airlight: [f32; 3],
    pub depth_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RainParams {
    /// Streaks per pixel.
    pub density: f32,
    pub length: (f32, f32),
    /// Streak direction in degrees from vertical.
    pub angle_deg: f32,
    pub intensity: (f32, f32),
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnowParams {
    /// Flakes per pixel.
    pub density: f32,
    pub radius: (f32, f32),
    pub opacity: (f32, f32),
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DegradationParams {
    Haze(HazeParams),
    Rain(RainParams),
    Snow(SnowParams),
}

/// A degradation of one kind at one severity; the concrete parameters are
/// drawn from the severity's range by `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DegradationSpec {
    pub kind: Kind,
    pub severity: Severity,
    pub seed: u64,
}

pub const HAZE_BETA: [(f32, f32); 2] = [(0.4, 0.8), (1.2, 2.0)];
pub const RAIN_DENSITY: [f32; 2] = [0.001, 0.004];
pub const SNOW_DENSITY: [f32; 2] = [0.002, 0.008];

impl DegradationSpec {
    pub fn params(&self) -> DegradationParams {
        let mut rng = seed::rng(self.seed, &[0xde9, self.kind.index()]);
        let s = self.severity as usize;
        match self.kind {
            Kind::Haze => {
                let (lo, hi) = HAZE_BETA[s];
                DegradationParams::Haze(HazeParams {
                    beta: rng.gen_range(lo..hi),
                    airlight: [0; 3].map(|_| rng.gen_range(0.7..1.0)),
                    depth_seed: rng.gen(),
                })
            }
            Kind::Rain => DegradationParams::Rain(RainParams {
                density: RAIN_DENSITY[s],
                length: [(6.0, 10.0), (10.0, 16.0)][s],
                angle_deg: rng.gen_range(-25.0..25.0),
                intensity: [(0.5, 0.7), (0.7, 0.9)][s],
                seed: rng.gen(),
            }),
            Kind::Snow => DegradationParams::Snow(SnowParams {
                density: SNOW_DENSITY[s],
                radius: [(0.8, 1.5), (1.2, 2.5)][s],
                opacity: [(0.6, 0.8), (0.8, 1.0)][s],
                seed: rng.gen(),
            }),
        }
    }
}

pub fn apply(j: &Tensor<f32>, params: &DegradationParams) -> Result<Tensor<f32>> {
    match params {
        DegradationParams::Haze(p) => apply_haze(j, p),
        DegradationParams::Rain(p) => apply_rain(j, p),
        DegradationParams::Snow(p) => apply_snow(j, p),
    }
}

pub fn degrade(j: &Tensor<f32>, spec: &DegradationSpec) -> Result<Tensor<f32>> {
    apply(j, &spec.params())
}

fn dims(j: &Tensor<f32>) -> Result<(usize, usize)> {
    crate::image::image_dims(j)
}

/// Smooth field in `[0, 1]`: a tilted ramp plus two low-frequency waves,
/// min-max normalized.
pub fn depth_field(seed: u64, h: usize, w: usize) -> Vec<f32> {
    let mut rng = seed::rng(seed, &[0xde97]);
    let (gx, gy): (f32, f32) = (rng.gen_range(-0.5..0.5), rng.gen_range(0.5..1.5));
    let waves: Vec<(f32, f32, f32, f32)> = (0..2)
        .map(|_| {
            (
                rng.gen_range(0.5..2.0),
                rng.gen_range(0.5..2.0),
                rng.gen_range(0.0..std::f32::consts::TAU),
                rng.gen_range(0.1..0.3),
            )
        })
        .collect();
    let mut d: Vec<f32> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f32 / h as f32, (i % w) as f32 / w as f32);
            let mut v = gx * x + gy * y;
            for &(fx, fy, ph, amp) in &waves {
                v += amp * (std::f32::consts::TAU * (fx * x + fy * y) + ph).sin();
            }
            v
        })
        .collect();
    let (lo, hi) = d.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-6);
    d.iter_mut().for_each(|v| *v = ((*v - lo) / span).clamp(0.0, 1.0));
    d
}

/// Atmospheric scattering `I = J·t + A·(1 − t)`, `t = exp(−β·d)`.
pub fn haze_with_depth(j: &Tensor<f32>, beta: f32, airlight: [f32; 3], depth: &[f32]) -> Result<Tensor<f32>> {
    let (h, w) = dims(j)?;
    if !(beta >= 0.0) {
        return Err(Error::Param(format!("haze β must be non-negative, got {beta}")));
    }
    if depth.len() != h * w {
        return Err(Error::shape("haze depth", &[depth.len()], &[h * w]));
    }
    let src = j.data();
    let mut out = vec![0.0f32; 3 * h * w];
    for (i, &d) in depth.iter().enumerate() {
        let t = (-beta * d).exp();
        for (c, &a) in airlight.iter().enumerate() {
            let k = c * h * w + i;
            out[k] = (src[k] * t + a * (1.0 - t)).clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[3, h, w], out)
}

pub fn apply_haze(j: &Tensor<f32>, p: &HazeParams) -> Result<Tensor<f32>> {
    let (h, w) = dims(j)?;
    haze_with_depth(j, p.beta, p.airlight, &depth_field(p.depth_seed, h, w))
}

fn count(density: f32, h: usize, w: usize) -> usize {
    (density as f64 * (h * w) as f64).round() as usize
}

/// Blends `color` into pixels where `alpha(px, py) > 0`, within a box.
fn composite(
    out: &mut [f32],
    h: usize,
    w: usize,
    bbox: (f32, f32, f32, f32),
    color: f32,
    alpha: impl Fn(f32, f32) -> f32,
) {
    let x0 = bbox.0.floor().max(0.0) as usize;
    let y0 = bbox.1.floor().max(0.0) as usize;
    let x1 = (bbox.2.ceil().max(0.0) as usize).min(w);
    let y1 = (bbox.3.ceil().max(0.0) as usize).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            let a = alpha(x as f32 + 0.5, y as f32 + 0.5).clamp(0.0, 1.0);
            if a > 0.0 {
                for c in 0..3 {
                    let k = (c * h + y) * w + x;
                    out[k] = (out[k] * (1.0 - a) + color * a).clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Bright anti-aliased streaks sharing one direction, each centred inside
/// the frame.
pub fn apply_rain(j: &Tensor<f32>, p: &RainParams) -> Result<Tensor<f32>> {
    let (h, w) = dims(j)?;
    let mut out = j.data().to_vec();
    let mut rng = seed::rng(p.seed, &[0x7a1]);
    let (hf, wf) = (h as f32, w as f32);
    for _ in 0..count(p.density, h, w) {
        let len = rng.gen_range(p.length.0..=p.length.1);
        let angle = (p.angle_deg + rng.gen_range(-4.0..4.0f32)).to_radians();
        let (dx, dy) = (angle.sin() * len, angle.cos() * len);
        let mid = (rng.gen_range(0.0..wf), rng.gen_range(0.0..hf));
        let a = (mid.0 - dx / 2.0, mid.1 - dy / 2.0);
        let b = (mid.0 + dx / 2.0, mid.1 + dy / 2.0);
        let strength = rng.gen_range(p.intensity.0..=p.intensity.1);
        let brightness = rng.gen_range(0.85..1.0f32);
        let bbox = (a.0.min(b.0) - 1.5, a.1.min(b.1) - 1.5, a.0.max(b.0) + 1.5, a.1.max(b.1) + 1.5);
        composite(&mut out, h, w, bbox, brightness, |px, py| {
            strength * (1.0 - segment_distance((px, py), a, b) / 1.1)
        });
    }
    Tensor::new(&[3, h, w], out)
}

/// Soft white discs.
pub fn apply_snow(j: &Tensor<f32>, p: &SnowParams) -> Result<Tensor<f32>> {
    let (h, w) = dims(j)?;
    let mut out = j.data().to_vec();
    let mut rng = seed::rng(p.seed, &[0x5a0]);
    for _ in 0..count(p.density, h, w) {
        let cx = rng.gen_range(0.0..w as f32);
        let cy = rng.gen_range(0.0..h as f32);
        let r = rng.gen_range(p.radius.0..=p.radius.1);
        let o = rng.gen_range(p.opacity.0..=p.opacity.1);
        let bbox = (cx - r - 1.0, cy - r - 1.0, cx + r + 1.0, cy + r + 1.0);
        composite(&mut out, h, w, bbox, 1.0, |px, py| {
            let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            o * (1.5 * (1.0 - d / (r + 0.5))).min(1.0)
        });
    }
    Tensor::new(&[3, h, w], out)
}

// ---- dataset --------------------------------------------------------------

/// What a manifest row holds: a single-kind sample or a haze+snow mixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RowKind {
    Single(Kind),
    Mixture,
}

impl fmt::Display for RowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowKind::Single(k) => k.fmt(f),
            RowKind::Mixture => f.write_str("mixture"),
        }
    }
}

/// One manifest line. Paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub query: String,
    pub gt: String,
    /// `None` for mixture rows.
    pub ctx_degraded: Option<String>,
    pub ctx_clean: Option<String>,
    pub kind: RowKind,
    pub severity: Severity,
    /// Scene of the query image.
    pub scene_id: u64,
    /// Scene of the degraded context image.
    pub ctx_scene_id: Option<u64>,
}

pub fn clean_scene_path(scene: u64) -> String {
    format!("clean/scene_{scene:05}.awtf")
}

impl ManifestRow {
    pub fn single_kind(&self) -> Option<Kind> {
        match self.kind {
            RowKind::Single(k) => Some(k),
            RowKind::Mixture => None,
        }
    }

    /// True when the clean context image renders the degraded context's scene.
    pub fn is_paired(&self) -> bool {
        match (&self.ctx_clean, self.ctx_scene_id) {
            (Some(c), Some(s)) => *c == clean_scene_path(s),
            _ => false,
        }
    }

    /// `(haze_only, snow_only)` ground truths of a mixture row.
    pub fn mixture_intermediates(&self) -> Option<(String, String)> {
        if self.kind != RowKind::Mixture {
            return None;
        }
        let (dir, file) = self.query.rsplit_once('/')?;
        let rest = file.strip_prefix("mix_")?;
        Some((format!("{dir}/haze_only_{rest}"), format!("{dir}/snow_only_{rest}")))
    }

    fn to_line(&self) -> String {
        let dash = |o: &Option<String>| o.clone().unwrap_or_else(|| "-".into());
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.query,
            self.gt,
            dash(&self.ctx_degraded),
            dash(&self.ctx_clean),
            self.kind,
            self.severity,
            self.scene_id,
            self.ctx_scene_id.map_or("-".to_string(), |s| s.to_string()),
        )
    }

    fn parse(line: &str, ctx: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(Error::format(ctx, format!("expected 8 tab-separated fields, got {}", f.len())));
        }
        let opt = |s: &str| (s != "-").then(|| s.to_string());
        let kind = match f[4] {
            "mixture" => RowKind::Mixture,
            k => RowKind::Single(k.parse().map_err(|e: Error| Error::format(ctx, e.to_string()))?),
        };
        let num = |s: &str| s.parse::<u64>().map_err(|e| Error::format(ctx, format!("{s:?}: {e}")));
        let row = ManifestRow {
            query: f[0].into(),
            gt: f[1].into(),
            ctx_degraded: opt(f[2]),
            ctx_clean: opt(f[3]),
            kind,
            severity: f[5].parse().map_err(|e: Error| Error::format(ctx, e.to_string()))?,
            scene_id: num(f[6])?,
            ctx_scene_id: if f[7] == "-" { None } else { Some(num(f[7])?) },
        };
        let single = matches!(kind, RowKind::Single(_));
        if single != (row.ctx_degraded.is_some() && row.ctx_clean.is_some() && row.ctx_scene_id.is_some()) {
            return Err(Error::format(ctx, "context columns must be present exactly for single-kind rows"));
        }
        Ok(row)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let rows = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| ManifestRow::parse(l, &format!("{}:{}", path.display(), i + 1)))
            .collect::<Result<_>>()?;
        Ok(Manifest { root: root.to_path_buf(), rows })
    }

    pub fn to_text(&self) -> String {
        self.rows.iter().map(|r| r.to_line() + "\n").collect()
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_image(&self, rel: &str) -> Result<Tensor<f32>> {
        read_awtf(&self.path(rel))
    }

    pub fn kinds(&self) -> Vec<Kind> {
        let mut k: Vec<Kind> = self.rows.iter().filter_map(|r| r.single_kind()).collect();
        k.sort();
        k.dedup();
        k
    }

    /// Same rows with every clean context image swapped for the clean
    /// render of another row's context scene of the same kind and severity.
    pub fn unpaired(&self) -> Result<Manifest> {
        let mut rows = self.rows.clone();
        let groups: Vec<(Kind, Severity)> = {
            let mut g: Vec<_> = rows
                .iter()
                .filter_map(|r| r.single_kind().map(|k| (k, r.severity)))
                .collect();
            g.sort();
            g.dedup();
            g
        };
        for (kind, sev) in groups {
            let idx: Vec<usize> = (0..rows.len())
                .filter(|&i| rows[i].single_kind() == Some(kind) && rows[i].severity == sev)
                .collect();
            if idx.len() < 2 {
                return Err(Error::Config(format!(
                    "unpaired context needs at least two {kind}/{sev} samples"
                )));
            }
            let donors: Vec<String> = idx.iter().map(|&i| rows[i].ctx_clean.clone().unwrap()).collect();
            for (n, &i) in idx.iter().enumerate() {
                rows[i].ctx_clean = Some(donors[(n + 1) % donors.len()].clone());
            }
        }
        Ok(Manifest { root: self.root.clone(), rows })
    }
}

/// Held-out rows: every tenth query scene.
pub fn is_validation_scene(scene_id: u64) -> bool {
    scene_id % 10 == 9
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSpec {
    pub n_scenes: usize,
    pub kinds: Vec<Kind>,
    pub size: usize,
    pub seed: u64,
    /// Number of haze+snow mixture samples (0 disables them).
    pub mixtures: usize,
}

impl DatasetSpec {
    pub fn new(n_scenes: usize, kinds: Vec<Kind>, seed: u64) -> Self {
        DatasetSpec {
            n_scenes,
            kinds,
            size: 32,
            seed,
            mixtures: 0,
        }
    }

    pub fn with_mixtures(mut self) -> Self {
        self.mixtures = (self.n_scenes / 4).max(8);
        self
    }
}

struct Writer<'a> {
    root: &'a Path,
}

impl Writer<'_> {
    fn image(&self, rel: &str, img: &Tensor<f32>) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_awtf(&path, img)?;
        write_ppm(&path.with_extension("ppm"), img)
    }
}

fn scene(spec: &DatasetSpec, id: u64) -> Result<Tensor<f32>> {
    render_scene(&SceneSpec {
        seed: seed::derive(spec.seed, &[1, id]),
        height: spec.size,
        width: spec.size,
    })
}

/// Generates the dataset under `out_dir` and writes `manifest.tsv`.
///
/// Samples run kind-major, then severity, then slot `0..n_scenes`. Sample
/// `j` renders its own query scene `j` and its own context scene `N + j`
/// (`N` samples in total), the context degraded with the same kind and
/// severity but independently drawn parameters. Mixture scenes follow,
/// each light haze under heavy snow (rows carry the snow severity).
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    if spec.n_scenes == 0 || spec.kinds.is_empty() {
        return Err(Error::Usage("dataset needs at least one scene and one kind".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let w = Writer { root: out_dir };
    let mut rows = Vec::new();
    let total = (spec.n_scenes * spec.kinds.len() * Severity::ALL.len()) as u64;
    let mut j = 0u64;
    for &kind in &spec.kinds {
        for severity in Severity::ALL {
            for s in 0..spec.n_scenes {
                let (q_scene, ctx_scene) = (j, total + j);
                j += 1;
                let clean = scene(spec, q_scene)?;
                let ctx_clean = scene(spec, ctx_scene)?;
                let tag = format!("{kind}_{severity}_{s:05}");
                let q = degrade(&clean, &DegradationSpec { kind, severity, seed: seed::derive(spec.seed, &[2, q_scene]) })?;
                let c = degrade(&ctx_clean, &DegradationSpec { kind, severity, seed: seed::derive(spec.seed, &[3, ctx_scene]) })?;
                let row = ManifestRow {
                    query: format!("query/{tag}.awtf"),
                    gt: clean_scene_path(q_scene),
                    ctx_degraded: Some(format!("context/{tag}.awtf")),
                    ctx_clean: Some(clean_scene_path(ctx_scene)),
                    kind: RowKind::Single(kind),
                    severity,
                    scene_id: q_scene,
                    ctx_scene_id: Some(ctx_scene),
                };
                w.image(&row.gt, &clean)?;
                w.image(&row.query, &q)?;
                w.image(row.ctx_degraded.as_ref().unwrap(), &c)?;
                w.image(row.ctx_clean.as_ref().unwrap(), &ctx_clean)?;
                rows.push(row);
            }
        }
    }
    let mut next_scene = 2 * total;
    for _ in 0..spec.mixtures {
        let id = next_scene;
        next_scene += 1;
        let clean = scene(spec, id)?;
        w.image(&clean_scene_path(id), &clean)?;
        let severity = Severity::Heavy;
        let haze = DegradationSpec { kind: Kind::Haze, severity: Severity::Light, seed: seed::derive(spec.seed, &[4, id]) }.params();
        let snow = DegradationSpec { kind: Kind::Snow, severity, seed: seed::derive(spec.seed, &[5, id]) }.params();
        let haze_only = apply(&clean, &haze)?;
        let snow_only = apply(&clean, &snow)?;
        let mixed = apply(&haze_only, &snow)?;
        let row = ManifestRow {
            query: format!("mixture/mix_{id:05}.awtf"),
            gt: clean_scene_path(id),
            ctx_degraded: None,
            ctx_clean: None,
            kind: RowKind::Mixture,
            severity,
            scene_id: id,
            ctx_scene_id: None,
        };
        let (h_rel, s_rel) = row.mixture_intermediates().expect("mixture row");
        w.image(&row.query, &mixed)?;
        w.image(&h_rel, &haze_only)?;
        w.image(&s_rel, &snow_only)?;
        rows.push(row);
    }
    let manifest = Manifest { root: out_dir.to_path_buf(), rows };
    manifest.save()?;
    Ok(manifest)
}
