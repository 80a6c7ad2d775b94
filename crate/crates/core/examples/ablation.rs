//! Trains the four model variants on clean and noisy inputs and prints the
//! comparison table.
//!
//! `cargo run --release --example ablation -- [OUT_DIR]`

use std::path::{Path, PathBuf};

use rtpca::train::{run_ablation, RunConfig, ABLATION_HEADER};

fn main() -> rtpca::Result<()> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/ablation.json");
    let (run, base) = RunConfig::load(&config)?;
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("rtpca_ablation"), PathBuf::from);
    let rows = run_ablation(&run, &base, &out, None)?;
    println!("{ABLATION_HEADER}");
    for r in rows {
        println!(
            "{},{},{:.3},{:.3},{:.3},{:.1}",
            r.variant, r.sigma, r.mpjpe_mm, r.p_mpjpe_mm, r.mpjve_mm, r.accel_mm_s2
        );
    }
    Ok(())
}
