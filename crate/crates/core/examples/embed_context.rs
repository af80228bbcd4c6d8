//! Embeds context pairs with the frozen toy encoder, compares pooled
//! embeddings across kinds, and round-trips a file-backend store.

use awracle::embedder::{write_embedding_store, Embedder, EmbedderBackend, EmbedderSpec};
use awracle::synth::{degrade, render_scene, DegradationSpec, Kind, SceneSpec, Severity};
use awracle::Tensor;

fn pooled(t: &Tensor<f32>) -> Vec<f32> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    (0..cols).map(|c| (0..rows).map(|r| t.data()[r * cols + c]).sum::<f32>() / rows as f32).collect()
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f32]| v.iter().map(|x| x * x).sum::<f32>().sqrt();
    dot / (n(a) * n(b))
}

fn main() -> anyhow::Result<()> {
    let toy = Embedder::new(EmbedderSpec::default())?;
    let mut pairs = Vec::new();
    for (i, kind) in Kind::ALL.into_iter().enumerate() {
        let clean = render_scene(&SceneSpec { seed: 40 + i as u64, height: 32, width: 32 })?;
        let degraded = degrade(&clean, &DegradationSpec { kind, severity: Severity::Heavy, seed: 9 })?;
        let e = toy.embed_context(&degraded, &clean)?;
        println!("{kind}: context embedding {:?}", e.shape());
        pairs.push((kind, degraded, clean, e));
    }
    for a in &pairs {
        for b in &pairs {
            print!("{:8.4}", cosine(&pooled(&a.3), &pooled(&b.3)));
        }
        println!("   <- {}", a.0);
    }

    let dir = tempfile::tempdir()?;
    let images: Vec<(String, &Tensor<f32>)> = pairs
        .iter()
        .flat_map(|(k, d, c, _)| [(format!("{k}_degraded"), d), (format!("{k}_clean"), c)])
        .collect();
    let n = write_embedding_store(&toy, dir.path(), images.iter().map(|(s, t)| (s.as_str(), *t)))?;
    let file = Embedder::new(EmbedderSpec { backend: EmbedderBackend::File(dir.path().to_path_buf()), ..EmbedderSpec::default() })?;
    let (_, d, c, e) = &pairs[0];
    println!("store holds {n} embeddings; file backend matches toy: {}", file.embed_context(d, c)? == *e);
    Ok(())
}
