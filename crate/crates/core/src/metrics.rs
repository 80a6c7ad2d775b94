//! Evaluation metrics over poses `[B, J, F, 3]` in millimeters, computed in
//! 64-bit outside the tape.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PCK_THRESHOLD_MM: f64 = 150.0;
pub const DEFAULT_FPS: f64 = 50.0;

/// AUC thresholds `5, 10, .., 150` mm.
pub fn auc_thresholds() -> Vec<f64> {
    (1..=30).map(|i| 5.0 * i as f64).collect()
}

/// Borrowed `[B, J, F, 3]` poses.
#[derive(Clone, Copy)]
pub struct Poses<'a> {
    data: &'a [f64],
    batch: usize,
    joints: usize,
    frames: usize,
}

impl<'a> Poses<'a> {
    pub fn new(t: &'a Tensor<f64>) -> Result<Self> {
        match *t.shape() {
            [batch, joints, frames, 3] => Ok(Self {
                data: t.data(),
                batch,
                joints,
                frames,
            }),
            _ => Err(Error::shape(format!("expected [B, J, F, 3], got {:?}", t.shape()))),
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn at(&self, b: usize, j: usize, f: usize) -> Vector3<f64> {
        let o = ((b * self.joints + j) * self.frames + f) * 3;
        Vector3::new(self.data[o], self.data[o + 1], self.data[o + 2])
    }
}

fn pair<'a>(p: &'a Tensor<f64>, g: &'a Tensor<f64>) -> Result<(Poses<'a>, Poses<'a>)> {
    if p.shape() != g.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            p.shape(),
            g.shape()
        )));
    }
    Ok((Poses::new(p)?, Poses::new(g)?))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Euclidean joint errors in `[B, J, F]` order.
pub fn joint_errors(p: &Tensor<f64>, g: &Tensor<f64>) -> Result<Vec<f64>> {
    let (p, g) = pair(p, g)?;
    let mut out = Vec::with_capacity(p.batch * p.joints * p.frames);
    for b in 0..p.batch {
        for j in 0..p.joints {
            for f in 0..p.frames {
                out.push((p.at(b, j, f) - g.at(b, j, f)).norm());
            }
        }
    }
    Ok(out)
}

pub fn mpjpe(p: &Tensor<f64>, g: &Tensor<f64>) -> Result<f64> {
    Ok(mean(&joint_errors(p, g)?))
}

/// Mean over joints for every `(b, f)`, in `[B, F]` order.
pub fn per_frame_mpjpe(p: &Tensor<f64>, g: &Tensor<f64>) -> Result<Vec<f64>> {
    let e = joint_errors(p, g)?;
    let s = p.shape();
    let (batch, joints, frames) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; batch * frames];
    for b in 0..batch {
        for j in 0..joints {
            for f in 0..frames {
                out[b * frames + f] += e[(b * joints + j) * frames + f] / joints as f64;
            }
        }
    }
    Ok(out)
}

/// Outcome of aligning one frame.
#[derive(Clone, Debug)]
pub struct Aligned {
    pub points: Vec<Vector3<f64>>,
    /// Rotation and scale were unidentifiable; only translation was removed.
    pub degenerate: bool,
}

/// Similarity transform `s·R·x + t` of `pred` minimizing the squared
/// distance to `gt`, with `det R = +1`.
pub fn procrustes_align(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Aligned {
    let n = pred.len() as f64;
    let mu_p = pred.iter().sum::<Vector3<f64>>() / n;
    let mu_g = gt.iter().sum::<Vector3<f64>>() / n;
    let p0: Vec<_> = pred.iter().map(|x| x - mu_p).collect();
    let g0: Vec<_> = gt.iter().map(|x| x - mu_g).collect();
    let norm_p = p0.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt();
    let norm_g = g0.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt();
    let translate_only = || Aligned {
        points: p0.iter().map(|x| x + mu_g).collect(),
        degenerate: true,
    };
    if norm_p < 1e-12 || norm_g < 1e-12 {
        return translate_only();
    }
    // Cross-covariance of the unit-normalized clouds: h = Σ g pᵀ.
    let mut h = Matrix3::zeros();
    for (a, b) in g0.iter().zip(&p0) {
        h += (a / norm_g) * (b / norm_p).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut s = svd.singular_values;
    let (imax, smax) = s.argmax();
    let (mut imin, _) = s.argmin();
    if imin == imax {
        imin = (imax + 1) % 3;
    }
    let mid = 3 - imax - imin;
    if s[mid] <= 1e-9 * smax {
        return translate_only();
    }
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(imin, imin)] = -1.0;
        s[imin] = -s[imin];
    }
    let r = u * d * v_t;
    let scale = s.sum() * norm_g / norm_p;
    Aligned {
        points: p0.iter().map(|x| scale * (r * x) + mu_g).collect(),
        degenerate: false,
    }
}

/// Per-joint errors after per-frame similarity alignment, plus the number of
/// degenerate frames.
pub fn aligned_errors(p: &Tensor<f64>, g: &Tensor<f64>) -> Result<(Vec<f64>, usize)> {
    let (pp, gp) = pair(p, g)?;
    let (batch, joints, frames) = (pp.batch, pp.joints, pp.frames);
    let mut out = vec![0.0; batch * joints * frames];
    let mut degenerate = 0;
    for b in 0..batch {
        for f in 0..frames {
            let pred: Vec<_> = (0..joints).map(|j| pp.at(b, j, f)).collect();
            let gt: Vec<_> = (0..joints).map(|j| gp.at(b, j, f)).collect();
            let a = procrustes_align(&pred, &gt);
            degenerate += a.degenerate as usize;
            for j in 0..joints {
                out[(b * joints + j) * frames + f] = (a.points[j] - gt[j]).norm();
            }
        }
    }
    Ok((out, degenerate))
}

pub fn p_mpjpe(p: &Tensor<f64>, g: &Tensor<f64>) -> Result<f64> {
    Ok(mean(&aligned_errors(p, g)?.0))
}

/// `(PCK@150, AUC)` in percent from raw joint errors; both use strict `<`.
pub fn pck_auc_from_errors(errors: &[f64]) -> (f64, f64) {
    if errors.is_empty() {
        return (0.0, 0.0);
    }
    let pck = |t: f64| 100.0 * errors.iter().filter(|&&e| e < t).count() as f64 / errors.len() as f64;
    let curve: Vec<f64> = auc_thresholds().into_iter().map(pck).collect();
    (pck(PCK_THRESHOLD_MM), mean(&curve))
}

pub fn pck_auc(p: &Tensor<f64>, g: &Tensor<f64>) -> Result<(f64, f64)> {
    Ok(pck_auc_from_errors(&joint_errors(p, g)?))
}

fn temporal_errors(p: &Tensor<f64>, g: &Tensor<f64>, order: usize) -> Result<Vec<f64>> {
    let (pp, gp) = pair(p, g)?;
    if pp.frames <= order {
        return Err(Error::Range(format!(
            "difference of order {order} needs more than {order} frames, got {}",
            pp.frames
        )));
    }
    let diff = |x: &Poses, b, j, f| match order {
        1 => x.at(b, j, f + 1) - x.at(b, j, f),
        _ => x.at(b, j, f + 2) - 2.0 * x.at(b, j, f + 1) + x.at(b, j, f),
    };
    let mut out = Vec::new();
    for b in 0..pp.batch {
        for j in 0..pp.joints {
            for f in 0..pp.frames - order {
                out.push((diff(&pp, b, j, f) - diff(&gp, b, j, f)).norm());
            }
        }
    }
    Ok(out)
}

/// Velocity errors in mm per frame.
pub fn velocity_errors(p: &Tensor<f64>, g: &Tensor<f64>) -> Result<Vec<f64>> {
    temporal_errors(p, g, 1)
}

/// Acceleration errors in mm/s².
pub fn accel_errors(p: &Tensor<f64>, g: &Tensor<f64>, fps: f64) -> Result<Vec<f64>> {
    if !(fps > 0.0) {
        return Err(Error::Range(format!("fps must be positive, got {fps}")));
    }
    let mut e = temporal_errors(p, g, 2)?;
    e.iter_mut().for_each(|x| *x *= fps * fps);
    Ok(e)
}

pub fn mpjve(p: &Tensor<f64>, g: &Tensor<f64>) -> Result<f64> {
    Ok(mean(&velocity_errors(p, g)?))
}

pub fn accel_error(p: &Tensor<f64>, g: &Tensor<f64>, fps: f64) -> Result<f64> {
    Ok(mean(&accel_errors(p, g, fps)?))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionMetrics {
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub frames: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub pck_pct: f64,
    pub auc_pct: f64,
    pub mpjve_mm: f64,
    pub accel_mm_s2: f64,
    pub frames: usize,
    pub degenerate_frames: usize,
    pub per_action: BTreeMap<String, ActionMetrics>,
    pub per_frame_mpjpe: Vec<f64>,
}

#[derive(Default)]
struct Sums {
    pos: Vec<f64>,
    aligned: Vec<f64>,
    frames: usize,
}

/// Collects whole sequences and pools their joint-level errors.
#[derive(Default)]
pub struct MetricsAccumulator {
    all: Sums,
    vel: Vec<f64>,
    accel: Vec<f64>,
    degenerate: usize,
    per_frame: Vec<f64>,
    actions: BTreeMap<String, Sums>,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one sequence, `[1, J, F, 3]` each. Velocity and acceleration
    /// terms are skipped for sequences too short to difference.
    pub fn add(&mut self, action: &str, p: &Tensor<f64>, g: &Tensor<f64>, fps: f64) -> Result<()> {
        let pos = joint_errors(p, g)?;
        let (aligned, degenerate) = aligned_errors(p, g)?;
        let frames = p.shape()[0] * p.shape()[2];
        if p.shape()[2] >= 2 {
            self.vel.extend(velocity_errors(p, g)?);
        }
        if p.shape()[2] >= 3 {
            self.accel.extend(accel_errors(p, g, fps)?);
        }
        self.per_frame.extend(per_frame_mpjpe(p, g)?);
        self.degenerate += degenerate;
        let act = self.actions.entry(action.to_string()).or_default();
        act.pos.extend_from_slice(&pos);
        act.aligned.extend_from_slice(&aligned);
        act.frames += frames;
        self.all.pos.extend(pos);
        self.all.aligned.extend(aligned);
        self.all.frames += frames;
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let (pck_pct, auc_pct) = pck_auc_from_errors(&self.all.pos);
        MetricsReport {
            mpjpe_mm: mean(&self.all.pos),
            p_mpjpe_mm: mean(&self.all.aligned),
            pck_pct,
            auc_pct,
            mpjve_mm: mean(&self.vel),
            accel_mm_s2: mean(&self.accel),
            frames: self.all.frames,
            degenerate_frames: self.degenerate,
            per_action: self
                .actions
                .iter()
                .map(|(k, s)| {
                    let m = ActionMetrics {
                        mpjpe_mm: mean(&s.pos),
                        p_mpjpe_mm: mean(&s.aligned),
                        frames: s.frames,
                    };
                    (k.clone(), m)
                })
                .collect(),
            per_frame_mpjpe: self.per_frame.clone(),
        }
    }
}

impl MetricsReport {
    /// The report without the per-frame series.
    pub fn summary(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("plain numbers serialize");
        if let Some(m) = v.as_object_mut() {
            m.remove("per_frame_mpjpe");
        }
        v
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// `frame_index,mpjpe_mm` rows.
    pub fn write_per_frame_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("frame_index,mpjpe_mm\n");
        for (i, e) in self.per_frame_mpjpe.iter().enumerate() {
            out.push_str(&format!("{i},{e}\n"));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}
