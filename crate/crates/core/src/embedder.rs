//! Frozen context embedder. Maps an image to `L×D` tokens; a context pair
//! becomes the `2L×D` matrix `[f(I_d); f(I_c)]`.
//!
//! Two backends: a small deterministic ViT-style encoder built from the
//! crate's own layers, and a directory of precomputed embeddings keyed by
//! a hash of the image bytes.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::image::{image_dims, resize_bilinear};
use crate::nn::{Init, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::synth::{Kind, Severity};
use crate::tensor::{read_awtf, write_awtf, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EmbedderBackend {
    ToyEncoder,
    /// Directory holding `<key>.awtf` files and `index.tsv`.
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbedderSpec {
    pub backend: EmbedderBackend,
    pub input_resolution: usize,
    pub patch: usize,
    /// Tokens per image (`L`), patch tokens plus one class token.
    pub tokens: usize,
    /// Token width (`D`).
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec {
            backend: EmbedderBackend::ToyEncoder,
            input_resolution: 32,
            patch: 8,
            tokens: 17,
            dim: 32,
            blocks: 2,
            heads: 4,
            seed: 0x0e3b,
        }
    }
}

impl EmbedderSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.input_resolution % self.patch != 0 {
            return bad(format!(
                "embedder resolution {} is not a multiple of patch {}",
                self.input_resolution, self.patch
            ));
        }
        let side = self.input_resolution / self.patch;
        if self.tokens != side * side + 1 {
            return bad(format!(
                "embedder tokens L = {} but a {}px input with {}px patches gives {} + 1",
                self.tokens,
                self.input_resolution,
                self.patch,
                side * side
            ));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("embedder width {} is not divisible by {} heads", self.dim, self.heads));
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        let backend = match &self.backend {
            EmbedderBackend::ToyEncoder => "toy".to_string(),
            EmbedderBackend::File(p) => format!("file:{}", p.display()),
        };
        kv.set("embedder.backend", backend);
        kv.set("embedder.input_resolution", self.input_resolution);
        kv.set("embedder.patch", self.patch);
        kv.set("embedder.tokens", self.tokens);
        kv.set("embedder.dim", self.dim);
        kv.set("embedder.blocks", self.blocks);
        kv.set("embedder.heads", self.heads);
        kv.set("embedder.seed", self.seed);
    }

    pub fn apply_kv(&mut self, kv: &mut KeyValues) -> Result<()> {
        if let Some(b) = kv.take("embedder.backend") {
            self.backend = match b.as_str() {
                "toy" => EmbedderBackend::ToyEncoder,
                other => match other.strip_prefix("file:") {
                    Some(dir) => EmbedderBackend::File(PathBuf::from(dir)),
                    None => return Err(Error::Config(format!("unknown embedder backend {other:?}"))),
                },
            };
        }
        kv.apply("embedder.input_resolution", &mut self.input_resolution)?;
        kv.apply("embedder.patch", &mut self.patch)?;
        kv.apply("embedder.tokens", &mut self.tokens)?;
        kv.apply("embedder.dim", &mut self.dim)?;
        kv.apply("embedder.blocks", &mut self.blocks)?;
        kv.apply("embedder.heads", &mut self.heads)?;
        kv.apply("embedder.seed", &mut self.seed)?;
        Ok(())
    }
}

/// A degraded/clean context pair and where it came from.
#[derive(Clone, Debug)]
pub struct ContextPair {
    pub degraded: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub kind: Kind,
    pub severity: Severity,
    pub scene_id: u64,
    pub clean_scene_id: u64,
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct ToyEncoder {
    params: ParamStore<f32>,
    patch_embed: Linear,
    class_token: crate::nn::ParamId,
    positions: Tensor<f32>,
    blocks: Vec<EncoderBlock>,
    ln_final: LayerNorm,
}

/// Standard sinusoidal table, `tokens×dim`.
pub fn sinusoidal_positions(tokens: usize, dim: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(tokens * dim);
    for t in 0..tokens {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = t as f64 * freq;
            data.push(if i % 2 == 0 { a.sin() } else { a.cos() } as f32);
        }
    }
    Tensor::new(&[tokens, dim], data).expect("finite table")
}

/// Non-overlapping `p×p` patches as rows, features ordered `(c, dy, dx)`.
pub fn patchify(img: &Tensor<f32>, p: usize) -> Result<Tensor<f32>> {
    let (h, w) = image_dims(img)?;
    if h % p != 0 || w % p != 0 {
        return Err(Error::Indivisible { h, w, multiple: p });
    }
    let d = img.data();
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(3 * h * w);
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..3 {
                for dy in 0..p {
                    let row = (c * h + py * p + dy) * w + px * p;
                    out.extend_from_slice(&d[row..row + p]);
                }
            }
        }
    }
    Tensor::new(&[gh * gw, 3 * p * p], out)
}

impl ToyEncoder {
    fn new(spec: &EmbedderSpec) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut init = Init::new(spec.seed);
        let d = spec.dim;
        let patch_embed = Linear::new(&mut params, &mut init, "embed.patch", 3 * spec.patch * spec.patch, d);
        let class_token = params.add("embed.cls", init.uniform(&[1, d], 0.5));
        let blocks = (0..spec.blocks)
            .map(|b| {
                let n = format!("embed.block.{b}");
                Ok(EncoderBlock {
                    ln1: LayerNorm::new(&mut params, &format!("{n}.ln1"), d),
                    attn: MultiHeadAttention::new(&mut params, &mut init, &format!("{n}.attn"), d, spec.heads)?,
                    ln2: LayerNorm::new(&mut params, &format!("{n}.ln2"), d),
                    fc1: Linear::new(&mut params, &mut init, &format!("{n}.fc1"), d, 4 * d),
                    fc2: Linear::new(&mut params, &mut init, &format!("{n}.fc2"), 4 * d, d),
                })
            })
            .collect::<Result<_>>()?;
        let ln_final = LayerNorm::new(&mut params, "embed.ln_final", d);
        Ok(ToyEncoder {
            params,
            patch_embed,
            class_token,
            positions: sinusoidal_positions(spec.tokens, d),
            blocks,
            ln_final,
        })
    }

    fn encode(&self, spec: &EmbedderSpec, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        let r = spec.input_resolution;
        let img = resize_bilinear(img, r, r)?;
        let patches = patchify(&img, spec.patch)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.constant(patches);
        let x = self.patch_embed.forward(&mut tape, &p, x)?;
        let x = tape.concat_rows(&[p[self.class_token], x])?;
        let pos = tape.constant(self.positions.clone());
        let mut x = tape.add(x, pos)?;
        for b in &self.blocks {
            let h = b.ln1.forward(&mut tape, &p, x)?;
            let h = b.attn.self_attend(&mut tape, &p, h)?;
            x = tape.add(x, h)?;
            let h = b.ln2.forward(&mut tape, &p, x)?;
            let h = b.fc1.forward(&mut tape, &p, h)?;
            let h = tape.gelu(h);
            let h = b.fc2.forward(&mut tape, &p, h)?;
            x = tape.add(x, h)?;
        }
        let x = self.ln_final.forward(&mut tape, &p, x)?;
        Ok(tape.value(x).clone().with_requires_grad(false))
    }
}

/// Lowercase hex FNV-1a (64-bit) over the little-endian `f32` pixel bytes.
pub fn image_key(img: &Tensor<f32>) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in img.data() {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    format!("{h:016x}")
}

pub const INDEX_FILE: &str = "index.tsv";

pub struct Embedder {
    spec: EmbedderSpec,
    toy: Option<ToyEncoder>,
}

impl Embedder {
    pub fn new(spec: EmbedderSpec) -> Result<Self> {
        spec.validate()?;
        let toy = match &spec.backend {
            EmbedderBackend::ToyEncoder => Some(ToyEncoder::new(&spec)?),
            EmbedderBackend::File(dir) => {
                if !dir.is_dir() {
                    return Err(Error::io(dir, std::io::Error::from(std::io::ErrorKind::NotFound)));
                }
                None
            }
        };
        Ok(Embedder { spec, toy })
    }

    pub fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    pub fn tokens(&self) -> usize {
        self.spec.tokens
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    /// Parameters of the toy encoder (empty for the file backend).
    pub fn parameters(&self) -> Option<&ParamStore<f32>> {
        self.toy.as_ref().map(|t| &t.params)
    }

    /// `f(I)`: one image to `L×D`.
    pub fn embed(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        image_dims(img)?;
        if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Param("embedder input must lie in [0, 1]".into()));
        }
        let out = match (&self.spec.backend, &self.toy) {
            (EmbedderBackend::ToyEncoder, Some(toy)) => toy.encode(&self.spec, img)?,
            (EmbedderBackend::File(dir), _) => {
                let key = image_key(img);
                let path = dir.join(format!("{key}.awtf"));
                if !path.is_file() {
                    return Err(Error::Lookup(format!(
                        "no precomputed embedding for image key {key} in {}",
                        dir.display()
                    )));
                }
                read_awtf(&path)?
            }
            _ => unreachable!("toy backend always carries its encoder"),
        };
        let expect = [self.spec.tokens, self.spec.dim];
        if out.shape() != expect {
            return Err(Error::format(
                "embedding",
                format!("expected {:?}, got {:?}", expect, out.shape()),
            ));
        }
        Ok(out)
    }

    /// `E_C = [f(I_d); f(I_c)]`, `2L×D`.
    pub fn embed_context(&self, degraded: &Tensor<f32>, clean: &Tensor<f32>) -> Result<Tensor<f32>> {
        let a = self.embed(degraded)?;
        let b = self.embed(clean)?;
        Tensor::concat_rows(&[&a, &b])
    }

    pub fn embed_pair(&self, pair: &ContextPair) -> Result<Tensor<f32>> {
        self.embed_context(&pair.degraded, &pair.clean)
    }
}

/// Memoizes `E_C` per `(degraded, clean)` image path pair under a dataset
/// root. Context images are never augmented, so one entry serves every epoch.
pub struct EmbeddingCache<'a> {
    embedder: &'a Embedder,
    root: PathBuf,
    entries: HashMap<(String, String), Tensor<f32>>,
}

impl<'a> EmbeddingCache<'a> {
    pub fn new(embedder: &'a Embedder, root: &Path) -> Self {
        EmbeddingCache {
            embedder,
            root: root.to_path_buf(),
            entries: HashMap::new(),
        }
    }

    pub fn embedder(&self) -> &Embedder {
        self.embedder
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&mut self, degraded: &str, clean: &str) -> Result<Tensor<f32>> {
        let key = (degraded.to_string(), clean.to_string());
        if let Some(t) = self.entries.get(&key) {
            return Ok(t.clone());
        }
        let d = read_awtf(&self.root.join(degraded))?;
        let c = read_awtf(&self.root.join(clean))?;
        let e = self.embedder.embed_context(&d, &c)?;
        self.entries.insert(key, e.clone());
        Ok(e)
    }
}

/// Writes precomputed embeddings for the file backend: one `<key>.awtf`
/// per image plus `index.tsv` mapping keys to source names.
pub fn write_embedding_store<'a>(
    embedder: &Embedder,
    dir: &Path,
    images: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index_path = dir.join(INDEX_FILE);
    let mut index: BTreeMap<String, String> = BTreeMap::new();
    if let Ok(text) = fs::read_to_string(&index_path) {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('\t') {
                index.insert(k.to_string(), v.to_string());
            }
        }
    }
    let mut written = 0;
    for (source, img) in images {
        let key = image_key(img);
        write_awtf(&dir.join(format!("{key}.awtf")), &embedder.embed(img)?)?;
        index.insert(key, source.to_string());
        written += 1;
    }
    let mut text = String::new();
    for (k, v) in &index {
        let _ = writeln!(text, "{k}\t{v}");
    }
    fs::write(&index_path, text).map_err(|e| Error::io(&index_path, e))?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_scene, SceneSpec};

    fn scene(seed: u64, size: usize) -> Tensor<f32> {
        render_scene(&SceneSpec { seed, height: size, width: size }).unwrap()
    }

    #[test]
    fn shapes_and_determinism() {
        let e = Embedder::new(EmbedderSpec::default()).unwrap();
        let a = scene(1, 32);
        let f = e.embed(&a).unwrap();
        assert_eq!(f.shape(), &[17, 32]);
        assert_eq!(f, Embedder::new(EmbedderSpec::default()).unwrap().embed(&a).unwrap());
        let big = e.embed(&scene(1, 48)).unwrap();
        assert_eq!(big.shape(), &[17, 32]);
        let ctx = e.embed_context(&a, &scene(2, 32)).unwrap();
        assert_eq!(ctx.shape(), &[34, 32]);
    }

    #[test]
    fn identical_pair_gives_identical_halves() {
        let e = Embedder::new(EmbedderSpec::default()).unwrap();
        let a = scene(3, 32);
        let ctx = e.embed_context(&a, &a).unwrap();
        let halves = ctx.split_rows(&[17, 17]).unwrap();
        assert_eq!(halves[0], halves[1]);
    }

    #[test]
    fn one_patch_changes_the_embedding() {
        let e = Embedder::new(EmbedderSpec::default()).unwrap();
        let a = scene(4, 32);
        let mut b = a.clone();
        for c in 0..3 {
            for y in 8..16 {
                for x in 16..24 {
                    let v = &mut b.data_mut()[(c * 32 + y) * 32 + x];
                    *v = 1.0 - *v;
                }
            }
        }
        assert!(e.embed(&a).unwrap().max_abs_diff(&e.embed(&b).unwrap()) > 1e-3);
    }

    #[test]
    fn seed_selects_weights() {
        let a = scene(5, 32);
        let e1 = Embedder::new(EmbedderSpec::default()).unwrap();
        let e2 = Embedder::new(EmbedderSpec { seed: 99, ..EmbedderSpec::default() }).unwrap();
        assert!(e1.embed(&a).unwrap().max_abs_diff(&e2.embed(&a).unwrap()) > 1e-3);
    }

    #[test]
    fn patchify_orders_channel_then_rows() {
        let data: Vec<f32> = (0..3 * 4 * 4).map(|i| i as f32 / 48.0).collect();
        let img = Tensor::new(&[3, 4, 4], data).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 12]);
        let row1: Vec<f32> = [2, 3, 6, 7, 18, 19, 22, 23, 34, 35, 38, 39].iter().map(|&i| i as f32 / 48.0).collect();
        assert_eq!(&p.data()[12..24], &row1[..]);
    }

    #[test]
    fn sinusoid_first_rows() {
        let t = sinusoidal_positions(2, 4);
        assert_eq!(&t.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((t.at(&[1, 0]) - 1f32.sin()).abs() < 1e-7);
        assert!((t.at(&[1, 3]) - 0.01f32.cos()).abs() < 1e-7);
    }

    #[test]
    fn rejects_out_of_range_and_bad_spec() {
        let e = Embedder::new(EmbedderSpec::default()).unwrap();
        let bright = Tensor::full(&[3, 32, 32], 1.5f32);
        assert!(matches!(e.embed(&bright), Err(Error::Param(_))));
        let bad = EmbedderSpec { tokens: 16, ..EmbedderSpec::default() };
        assert!(matches!(Embedder::new(bad), Err(Error::Config(_))));
        let bad = EmbedderSpec { patch: 5, ..EmbedderSpec::default() };
        assert!(matches!(Embedder::new(bad), Err(Error::Config(_))));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(image_key(&Tensor::new(&[1], vec![1.0f32]).unwrap()), "4b72477f9c5c2f98");
        assert_eq!(image_key(&Tensor::new(&[1], vec![0.0f32]).unwrap()), "4d25767f9dce13f5");
    }

    #[test]
    fn file_backend_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let toy = Embedder::new(EmbedderSpec::default()).unwrap();
        let (a, b) = (scene(6, 32), scene(7, 32));
        assert_eq!(write_embedding_store(&toy, dir.path(), [("a", &a), ("b", &b)]).unwrap(), 2);
        let index = fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap();
        assert_eq!(index.lines().count(), 2);
        let file = Embedder::new(EmbedderSpec {
            backend: EmbedderBackend::File(dir.path().to_path_buf()),
            ..EmbedderSpec::default()
        })
        .unwrap();
        assert_eq!(file.embed_context(&a, &b).unwrap(), toy.embed_context(&a, &b).unwrap());
        assert!(matches!(file.embed(&scene(8, 32)), Err(Error::Lookup(_))));
        write_awtf(&dir.path().join(format!("{}.awtf", image_key(&a))), &Tensor::<f32>::zeros(&[3, 4])).unwrap();
        assert!(matches!(file.embed(&a), Err(Error::Format { .. })));
    }

    #[test]
    fn kv_round_trip() {
        let spec = EmbedderSpec { backend: EmbedderBackend::File("/tmp/e".into()), seed: 7, ..EmbedderSpec::default() };
        let mut kv = KeyValues::default();
        spec.to_kv(&mut kv);
        let mut back = EmbedderSpec::default();
        back.apply_kv(&mut kv).unwrap();
        assert_eq!(back, spec);
    }
}
