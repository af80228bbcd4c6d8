//! Builds a small graph on the tape, runs backward and compares one
//! gradient entry with a central difference.

use awracle::{Tape, Tensor};

fn loss(x: &Tensor<f64>, w: &Tensor<f64>) -> anyhow::Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.leaf(w.clone().with_requires_grad(true));
    let h = tape.matmul(xv, wv)?;
    let h = tape.gelu(h);
    let p = tape.softmax_rows(h)?;
    let l = tape.sum(p);
    let sq = tape.mul(p, p)?;
    let l2 = tape.sum(sq);
    let total = tape.add(l, l2)?;
    tape.backward(total)?;
    Ok((tape.value(total).data()[0], tape.grad(wv).unwrap().to_vec()))
}

fn main() -> anyhow::Result<()> {
    let x = Tensor::new(&[2, 3], vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.7])?;
    let w = Tensor::new(&[3, 2], vec![0.4, -0.2, 0.9, 0.3, -0.5, 0.8])?;
    let (value, grad) = loss(&x, &w)?;
    println!("loss {value:.6}");
    let h = 1e-6;
    for i in 0..grad.len() {
        let mut plus = w.data().to_vec();
        let mut minus = w.data().to_vec();
        plus[i] += h;
        minus[i] -= h;
        let fp = loss(&x, &Tensor::new(&[3, 2], plus)?)?.0;
        let fm = loss(&x, &Tensor::new(&[3, 2], minus)?)?.0;
        println!("dL/dw[{i}]  analytic {:+.8}  numeric {:+.8}", grad[i], (fp - fm) / (2.0 * h));
    }
    Ok(())
}
