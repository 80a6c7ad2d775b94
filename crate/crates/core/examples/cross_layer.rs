//! Two temporal attention layers linked by the cross-layer carry: the
//! second attends over its own keys plus the pooled keys of the first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtpca::attention::AttentionParams;
use rtpca::nn::{Ctx, ParamStore};
use rtpca::tensor::{Tape, Tensor};
use rtpca::tpca::{TpcaConfig, TpcaState};
use rtpca::xlr::{xlr_attention, XlrConfig};

fn main() -> rtpca::Result<()> {
    let (n, dim, heads) = (9, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let mut layer = |name: &str| -> rtpca::Result<_> {
        let attn = AttentionParams::new(&mut store, &format!("{name}.attn"), dim, heads, &mut rng)?;
        let k = TpcaState::new(&mut store, &format!("{name}.k"), TpcaConfig::default(), dim, &mut rng)?;
        let v = TpcaState::new(&mut store, &format!("{name}.v"), TpcaConfig::default(), dim, &mut rng)?;
        Ok((attn, k, v))
    };
    let first = layer("tt0")?;
    let second = layer("tt1")?;
    let cfg = XlrConfig::default();

    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &store);
    let z = tape.constant(&Tensor::from_fn(vec![1, n, dim], |i| (i as f64 * 0.21).cos()));
    let a = xlr_attention(&ctx, &first.0, &cfg, z, None, &first.1, &first.2)?;
    let b = xlr_attention(&ctx, &second.0, &cfg, a.out, Some(a.carry_next), &second.1, &second.2)?;
    println!("first layer weights  {:?}", a.weights.shape());
    println!("second layer weights {:?} (n + pooled {})", b.weights.shape(), cfg.pool_target(n)?);

    let off = XlrConfig {
        enabled: false,
        ..cfg
    };
    let c = xlr_attention(&ctx, &second.0, &off, a.out, Some(a.carry_next), &second.1, &second.2)?;
    println!("link disabled        {:?}", c.weights.shape());
    Ok(())
}
