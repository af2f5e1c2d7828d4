//! Reverse-mode gradients on a tape, checked against a central difference.

use lmt::{Tape, Tensor};

fn main() -> lmt::Result<()> {
    let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.25, -0.5]])?;
    let w = Tensor::from_rows(&[vec![0.3, -0.2, 0.1], vec![0.0, 0.4, -0.6]])?;
    let labels = [1, 0];

    let loss_of = |w: &Tensor| -> lmt::Result<(f64, Option<Tensor>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.param(w.clone());
        let z = tape.matmul_t(xv, wv)?;
        let h = tape.tanh(z)?;
        let loss = tape.softmax_cross_entropy(h, &labels)?;
        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        Ok((value, grads.tensor(wv)))
    };

    let (loss, grad) = loss_of(&w)?;
    let grad = grad.expect("w requires a gradient");
    println!("loss {loss:.6}");
    println!("dloss/dw {:?}", grad.data());

    let h = 1e-6;
    let mut bumped = w.data().to_vec();
    bumped[4] += h;
    let up = loss_of(&Tensor::new(w.shape().to_vec(), bumped.clone())?)?.0;
    bumped[4] -= 2.0 * h;
    let down = loss_of(&Tensor::new(w.shape().to_vec(), bumped)?)?.0;
    println!(
        "entry (1,1): tape {:.9}, central difference {:.9}",
        grad.data()[4],
        (up - down) / (2.0 * h)
    );
    Ok(())
}
