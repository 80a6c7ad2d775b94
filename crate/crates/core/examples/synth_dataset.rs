//! Generates a small synthetic dataset, corrupts its 2D inputs and writes
//! both versions as JSON Lines.
//!
//! `cargo run --example synth_dataset -- [OUT_DIR]`

use std::path::PathBuf;

use rtpca::data::{add_gaussian_noise, describe, save_dataset, synth_generate, SYNTH_CAMERA};

fn main() -> rtpca::Result<()> {
    let out = std::env::args().nth(1).map_or_else(std::env::temp_dir, PathBuf::from);
    std::fs::create_dir_all(&out).map_err(|e| rtpca::Error::io(&out, e))?;

    let clean = synth_generate(0, 3, 120, 17, 50.0);
    let noisy: Vec<_> = clean
        .iter()
        .enumerate()
        .map(|(i, s)| add_gaussian_noise(s, 0.005, i as u64))
        .collect::<rtpca::Result<_>>()?;
    print!("{}", describe(&clean));

    let wrist = clean[0].joints3d[60][16];
    let px = SYNTH_CAMERA.project(wrist);
    println!("wrist at frame 60: {wrist:.1?} mm -> {px:.4?} image units");

    save_dataset(&out.join("synth_clean.jsonl"), &clean)?;
    save_dataset(&out.join("synth_noisy.jsonl"), &noisy)?;
    println!("wrote {}/synth_{{clean,noisy}}.jsonl", out.display());
    Ok(())
}
