//! Reverse-mode gradients on the tape: a two-layer regression step.

use incdet::numeric::{SeededRng, Tape, Tensor};

fn main() -> incdet::Result<()> {
    let mut rng = SeededRng::new(7);
    let mut normal = |r, c| Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect());
    let x = normal(4, 3)?;
    let w1 = normal(3, 5)?;
    let w2 = normal(5, 1)?;
    let y = Tensor::matrix(4, 1, vec![1.0, -1.0, 0.5, 0.0])?;

    let tape = Tape::new();
    let (w1v, w2v) = (tape.param(&w1), tape.param(&w2));
    let pred = tape.constant(x).matmul(w1v)?.relu()?.matmul(w2v)?;
    let loss = pred.sub(tape.constant(y))?.square()?.mean()?;
    let grads = tape.backward(loss)?;

    println!("loss        {:.6}", loss.item());
    println!("dL/dw2      {:?}", grads.wrt(w2v).data());
    println!("|dL/dw1|    {:.6}", grads.wrt(w1v).data().iter().map(|g| g * g).sum::<f64>().sqrt());
    println!("tape nodes  {}", tape.len());
    Ok(())
}
