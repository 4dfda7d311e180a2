//! Reverse-mode gradients on a small two-layer function, checked against
//! central differences.

use hdrfuse::gradcheck::{grad_check, GradCheckOptions};
use hdrfuse::{Tape, Tensor};

fn main() -> hdrfuse::Result<()> {
    let w = Tensor::from_f64(vec![3, 2], &[0.3, -0.2, 0.8, 0.1, -0.5, 0.4])?;
    let x0 = Tensor::from_f64(vec![2, 3], &[0.5, -1.0, 2.0, 1.5, 0.0, -0.3])?;

    let f = |tape: &mut Tape<f64>, x| {
        let wv = tape.constant(w.clone());
        let h = tape.matmul(x, wv)?;
        let h = tape.gelu(h)?;
        let h = tape.mul(h, h)?;
        tape.mean(h)
    };

    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    println!("loss {:.6}", tape.value(y).data()[0]);
    println!("grad {:?}", tape.grad(x).map(|g| g.data().to_vec()));

    let report = grad_check(f, &x0, &GradCheckOptions::default())?;
    println!("max relative error vs central differences: {:.2e}", report.max_relative_error);
    Ok(())
}
