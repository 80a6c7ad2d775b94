//! Evaluation metrics on a rotated, scaled and jittered copy of a pose
//! sequence.

use nalgebra::{Rotation3, Vector3};
use rtpca::data::synth_generate;
use rtpca::metrics::{accel_error, mpjpe, p_mpjpe, pck_auc, DEFAULT_FPS};
use rtpca::tensor::Tensor;

fn main() -> rtpca::Result<()> {
    let seq = &synth_generate(7, 1, 30, 17, DEFAULT_FPS)[0];
    let (frames, joints) = (seq.frames(), seq.joints());
    let rot = Rotation3::new(Vector3::new(0.0, 0.3, 0.0));
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for j in 0..joints {
        for f in 0..frames {
            let g = Vector3::from(seq.joints3d[f][j]);
            let jitter = 4.0 * ((f * 7 + j * 3) as f64).sin();
            let p = 1.1 * (rot * g) + Vector3::new(20.0, 0.0, jitter);
            gt.extend(g.iter());
            pred.extend(p.iter());
        }
    }
    let g = Tensor::from_f64([1, joints, frames, 3], &gt)?;
    let p = Tensor::from_f64([1, joints, frames, 3], &pred)?;
    let (pck, auc) = pck_auc(&p, &g)?;
    println!("MPJPE   {:8.3} mm", mpjpe(&p, &g)?);
    println!("P-MPJPE {:8.3} mm (similarity removed)", p_mpjpe(&p, &g)?);
    println!("PCK     {pck:8.3} %, AUC {auc:.3} %");
    println!("Accel   {:8.1} mm/s^2", accel_error(&p, &g, DEFAULT_FPS)?);
    Ok(())
}
