//! Times one forward + backward pass of the model at 32×32.

use std::time::Instant;

use awracle::model::{AwracleNet, ModelConfig};
use awracle::{Tape, Tensor};

fn time_config(name: &str, mut cfg: ModelConfig) -> anyhow::Result<()> {
    cfg.zero_init_head = false;
    let net = AwracleNet::<f32>::new(cfg.clone())?;
    let image = Tensor::full(&[3, 32, 32], 0.5f32);
    let ctx = Tensor::full(&[2 * cfg.embed_tokens, cfg.embed_dim], 0.1f32);
    let reps = 10;
    let start = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let p = net.params.bind(&mut tape);
        let x = tape.constant(image.clone());
        let c = tape.constant(ctx.clone());
        let out = net.forward(&mut tape, &p, x, Some(c))?;
        let loss = tape.l1_loss(out.output, x)?;
        tape.backward(loss)?;
    }
    let per = start.elapsed().as_secs_f64() / reps as f64;
    println!(
        "{name}: {} params, {:.1} ms per sample step",
        net.parameter_count(),
        per * 1e3
    );
    Ok(())
}

fn main() -> anyhow::Result<()> {
    time_config("default", ModelConfig::default())?;
    time_config("desk", ModelConfig::desk())?;
    Ok(())
}
