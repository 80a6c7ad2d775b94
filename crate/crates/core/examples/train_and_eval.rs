//! Trains the bundled smoke configuration, then evaluates its best
//! checkpoint with noisy 2D inputs.
//!
//! `cargo run --release --example train_and_eval -- [OUT_DIR]`

use std::path::{Path, PathBuf};

use rtpca::train::{run_eval, run_training, RunConfig, RunPaths};

fn main() -> rtpca::Result<()> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.json");
    let (run, base) = RunConfig::load(&config)?;
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("rtpca_smoke"), PathBuf::from);

    let outcome = run_training(&run, &base, &out, None)?;
    if let (Some(first), Some(last)) = (outcome.first, outcome.last) {
        println!("{} steps: loss {:.1} -> {:.1}", outcome.steps, first.total, last.total);
    }
    if let Some(best) = outcome.best_mpjpe {
        println!("best eval MPJPE {best:.2} mm");
    }

    let noisy = out.join("eval_noisy");
    let report = run_eval(&run, &base, &RunPaths::new(&out).best, &noisy, Some(0.01), false)?;
    println!("{}", serde_json::to_string_pretty(&report.summary())?);
    println!("artifacts in {}", out.display());
    Ok(())
}
