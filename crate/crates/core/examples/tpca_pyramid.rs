//! Traces the compression and amplification lengths of the key/value
//! pyramid for a few configurations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtpca::nn::{Ctx, ParamStore};
use rtpca::tensor::{Tape, Tensor};
use rtpca::tpca::{Amplification, Compression, TpcaConfig, TpcaState};

fn main() -> rtpca::Result<()> {
    let configs = [
        (27, TpcaConfig::default()),
        (
            8,
            TpcaConfig {
                stages: 2,
                ratio: 2,
                compression: Compression::Conv,
                amplification: Amplification::Linear,
            },
        ),
        (
            40,
            TpcaConfig {
                stages: 3,
                ratio: 3,
                compression: Compression::Pool,
                amplification: Amplification::TransConv,
            },
        ),
    ];
    for (n, cfg) in configs {
        let mut store = ParamStore::<f64>::new();
        let state = TpcaState::new(&mut store, "k", cfg, 16, &mut ChaCha8Rng::seed_from_u64(0))?;
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let z = tape.constant(&Tensor::from_fn(vec![n, 16], |i| (i as f64 * 0.05).sin()));
        let (out, trace) = state.transform_traced(&ctx, z)?;
        println!(
            "{:?}/{:?} r={} m={}: lengths {:?}, output {:?}, {} parameters",
            cfg.compression,
            cfg.amplification,
            cfg.ratio,
            cfg.stages,
            trace.lengths,
            out.shape(),
            store.total()
        );
    }
    Ok(())
}
