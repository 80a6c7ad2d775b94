//! Multi-head attention over an external, longer key/value sequence, as
//! used when the previous block's keys are appended.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtpca::attention::AttentionParams;
use rtpca::nn::{Ctx, ParamStore};
use rtpca::tensor::{Tape, Tensor, Var};

fn main() -> rtpca::Result<()> {
    let (n, extra, dim, heads) = (4, 3, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let attn = AttentionParams::new(&mut store, "attn", dim, heads, &mut rng)?;

    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &store);
    let x = tape.constant(&Tensor::from_fn(vec![n, dim], |i| (i as f64 * 0.37).sin()));
    let memory = tape.constant(&Tensor::from_fn(vec![extra, dim], |i| (i as f64 * 0.11).cos()));
    let kv = Var::concat(&[x, memory], 0)?;
    let a = attn.forward(&ctx, x, kv, kv)?;

    println!("output {:?}, weights {:?}", a.out.shape(), a.weights.shape());
    let w = a.weights.value();
    for h in 0..heads {
        for q in 0..n {
            let row: Vec<f64> = (0..n + extra).map(|k| w.at(&[h, q, k])).collect();
            println!("head {h} query {q}: {row:.3?} sum {:.12}", row.iter().sum::<f64>());
        }
    }
    Ok(())
}
