//! Records a small computation on the tape, differentiates it and compares
//! one gradient entry with a central difference.

use rtpca::tensor::{Tape, Tensor};

fn objective(x: &Tensor<f64>, w: &Tensor<f64>) -> rtpca::Result<f64> {
    let tape = Tape::new();
    let y = tape.constant(x).matmul(tape.constant(w))?.gelu().softmax(1)?;
    Ok(y.square().sum().item())
}

fn main() -> rtpca::Result<()> {
    let x = Tensor::from_f64([2, 3], &[0.5, -1.0, 2.0, 0.1, 0.3, -0.7])?;
    let w = Tensor::from_f64([3, 2], &[1.0, -0.5, 0.25, 0.8, -1.2, 0.4])?;

    let tape = Tape::new();
    let (xv, wv) = (tape.constant(&x), tape.param(&w));
    let loss = xv.matmul(wv)?.gelu().softmax(1)?.square().sum();
    let grads = tape.backward(loss)?;
    let gw = grads.get(wv).expect("w is a parameter");
    println!("loss {:.6}", loss.item());
    println!("dloss/dw {:?}", gw.data());

    let h = 1e-6;
    let bump = |d: f64| Tensor::from_fn(vec![3, 2], |i| w.data()[i] + if i == 4 { d } else { 0.0 });
    let numeric = (objective(&x, &bump(h))? - objective(&x, &bump(-h))?) / (2.0 * h);
    println!("w[2,0]: tape {:.9}, central difference {numeric:.9}", gw.data()[4]);
    Ok(())
}
