//! Records a small computation, backpropagates it and checks the result
//! against central differences.

use lsanet::tensor::gradcheck::{check_gradients, GradcheckOptions};
use lsanet::tensor::{Tape, Tensor};

fn main() -> lsanet::Result<()> {
    let x = Tensor::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.0, -0.5])?;
    let w = Tensor::from_f64(&[4, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6, 0.7, 0.8, -0.9, 1.0, 0.0, 0.5])?;

    // loss = mean over classes of cross entropy of sigmoid(x wᵀ)
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(x.clone(), true);
    let wv = tape.leaf(w.clone(), true);
    let h = tape.linear(xv, wv)?;
    let h = tape.sigmoid(h)?;
    let loss = tape.cross_entropy(h, &[1, 3])?;
    println!("loss {:.6}", tape.value(loss).item().unwrap());

    let grads = tape.backward(loss)?;
    println!("dL/dw {:?}", grads.get(wv).unwrap().data());

    let report = check_gradients(
        &[x, w],
        |t, v| {
            let h = t.linear(v[0], v[1])?;
            let h = t.sigmoid(h)?;
            t.cross_entropy(h, &[1, 3])
        },
        GradcheckOptions::default(),
    )?;
    println!("finite-difference worst relative error {:.2e}", report.worst());
    Ok(())
}
