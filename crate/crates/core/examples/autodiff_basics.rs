//! The reverse-mode tape on its own: a tiny conv net, its gradients and a
//! finite-difference spot check.
//!
//!     cargo run --release --example autodiff_basics

use genrep::{SeededRng, Tape, Tensor};

fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape")
}

fn loss(x: &Tensor, w: &Tensor, b: &Tensor) -> genrep::Result<(Tape, genrep::Var, genrep::Var)> {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let wv = t.variable(w.clone());
    let bv = t.variable(b.clone());
    let y = t.conv2d(xv, wv, Some(bv))?;
    let y = t.tanh(y)?;
    let l = t.squared_norm(y)?;
    Ok((t, l, wv))
}

fn main() -> genrep::Result<()> {
    let mut rng = SeededRng::new(0);
    let x = random(&[2, 3, 6, 6], &mut rng);
    let w = random(&[4, 3, 3, 3], &mut rng);
    let b = random(&[4], &mut rng);

    let (mut tape, l, wv) = loss(&x, &w, &b)?;
    println!("loss {:.6} on a tape of {} nodes", tape.value(l).item(), tape.len());
    let grads = tape.backward(l)?;
    let gw = grads.wrt(wv);

    let eps = 1e-5;
    for i in [0, 17, 80] {
        let (mut plus, mut minus) = (w.clone(), w.clone());
        plus.data_mut()[i] += eps;
        minus.data_mut()[i] -= eps;
        let f = |w: &Tensor| -> genrep::Result<f64> {
            let (t, l, _) = loss(&x, w, &b)?;
            Ok(t.value(l).item())
        };
        let numeric = (f(&plus)? - f(&minus)?) / (2.0 * eps);
        println!("dL/dw[{i:>2}]  analytic {:+.8}  numeric {numeric:+.8}", gw.data()[i]);
    }
    Ok(())
}
