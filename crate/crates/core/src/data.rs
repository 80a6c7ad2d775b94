//! Pose sequences: JSON Lines storage, window sampling, a synthetic
//! generator and input corruption.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// One recorded clip. 2D joints are in normalized image units, 3D joints in
/// millimeters relative to the root joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSequence {
    pub subject: String,
    pub action: String,
    pub fps: f64,
    pub joints2d: Vec<Vec<[f64; 2]>>,
    pub joints3d: Vec<Vec<[f64; 3]>>,
}

impl PoseSequence {
    pub fn frames(&self) -> usize {
        self.joints2d.len()
    }

    pub fn joints(&self) -> usize {
        self.joints2d.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(format!("fps must be positive, got {}", self.fps));
        }
        if self.joints2d.len() != self.joints3d.len() {
            return Err(format!(
                "joints2d has {} frames but joints3d has {}",
                self.joints2d.len(),
                self.joints3d.len()
            ));
        }
        let j = self.joints();
        for (f, (a, b)) in self.joints2d.iter().zip(&self.joints3d).enumerate() {
            if a.len() != j || b.len() != j {
                return Err(format!(
                    "frame {f} has {} 2D and {} 3D joints, expected {j}",
                    a.len(),
                    b.len()
                ));
            }
            let finite = a.iter().flatten().chain(b.iter().flatten()).all(|v| v.is_finite());
            if !finite {
                return Err(format!("frame {f} contains a non-finite coordinate"));
            }
        }
        if !self.joints2d.is_empty() && j == 0 {
            return Err("frames have no joints".into());
        }
        Ok(())
    }
}

/// Reads one sequence per non-blank line.
pub fn load_dataset(path: &Path) -> Result<Vec<PoseSequence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Vec<PoseSequence>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let seq: PoseSequence = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        seq.validate().map_err(err)?;
        out.push(seq);
    }
    Ok(out)
}

pub fn dataset_to_string(seqs: &[PoseSequence]) -> Result<String> {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, seqs: &[PoseSequence]) -> Result<()> {
    std::fs::write(path, dataset_to_string(seqs)?).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval,
}

/// A run of `len` frames starting at `start`; only the first `valid` are
/// real, the rest repeat the last real frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub sequence: usize,
    pub start: usize,
    pub len: usize,
    pub valid: usize,
}

/// Non-overlapping windows at starts `0, F, 2F, ..`. Training drops a short
/// remainder; evaluation keeps it as a padded final window.
pub fn stride_sample(sequence: usize, total: usize, frames: usize, mode: SampleMode) -> Vec<Window> {
    assert!(frames >= 1, "window length must be positive");
    let mut out: Vec<Window> = (0..total / frames)
        .map(|k| Window {
            sequence,
            start: k * frames,
            len: frames,
            valid: frames,
        })
        .collect();
    let rem = total % frames;
    if mode == SampleMode::Eval && rem > 0 {
        out.push(Window {
            sequence,
            start: total - rem,
            len: frames,
            valid: rem,
        });
    }
    out
}

/// Windows over every sequence, in dataset order.
pub fn sample_all(seqs: &[PoseSequence], frames: usize, mode: SampleMode) -> Vec<Window> {
    seqs.iter()
        .enumerate()
        .flat_map(|(i, s)| stride_sample(i, s.frames(), frames, mode))
        .collect()
}

/// Model inputs and targets for a list of windows.
pub struct Batch<T> {
    /// `[B, J, F, 2]`
    pub x2d: Tensor<T>,
    /// `[B, J, F, 3]`
    pub y3d: Tensor<T>,
    pub windows: Vec<Window>,
}

pub fn make_batch<T: Float>(seqs: &[PoseSequence], windows: &[Window]) -> Result<Batch<T>> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Usage("cannot build an empty batch".into()))?;
    let (b, f) = (windows.len(), first.len);
    let j = seqs[first.sequence].joints();
    let mut x = Vec::with_capacity(b * j * f * 2);
    let mut y = Vec::with_capacity(b * j * f * 3);
    for w in windows {
        let s = &seqs[w.sequence];
        if w.len != f || s.joints() != j || w.valid == 0 || w.start + w.valid > s.frames() {
            return Err(Error::shape(format!(
                "window {w:?} does not fit a [{b}, {j}, {f}] batch"
            )));
        }
        for joint in 0..j {
            for t in 0..f {
                let frame = w.start + t.min(w.valid - 1);
                x.extend(s.joints2d[frame][joint].map(T::lit));
                y.extend(s.joints3d[frame][joint].map(T::lit));
            }
        }
    }
    Ok(Batch {
        x2d: Tensor::new([b, j, f, 2], x)?,
        y3d: Tensor::new([b, j, f, 3], y)?,
        windows: windows.to_vec(),
    })
}

/// Pinhole camera used by the synthetic generator. The root joint sits at
/// `root` in camera coordinates (mm); 2D output is normalized so that the
/// image width maps to `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthCamera {
    pub focal: f64,
    pub center: [f64; 2],
    pub width: f64,
    pub root: [f64; 3],
}

pub const SYNTH_CAMERA: SynthCamera = SynthCamera {
    focal: 1150.0,
    center: [500.0, 500.0],
    width: 1000.0,
    root: [0.0, 0.0, 5000.0],
};

impl SynthCamera {
    /// Projects a root-relative 3D joint.
    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        let x = p[0] + self.root[0];
        let y = p[1] + self.root[1];
        let z = p[2] + self.root[2];
        let u = self.focal * x / z + self.center[0];
        let v = self.focal * y / z + self.center[1];
        [2.0 * u / self.width - 1.0, 2.0 * v / self.width - 1.0]
    }
}

/// Parent index of every joint in the 17-joint skeleton; deeper skeletons
/// extend it as a chain.
const PARENTS_17: [usize; 17] = [0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15];

/// Rest-pose bone offsets (mm) from each joint's parent; y points down.
const BONES_17: [[f64; 3]; 17] = [
    [0.0, 0.0, 0.0],
    [-130.0, 0.0, 0.0],
    [0.0, 450.0, 0.0],
    [0.0, 440.0, 0.0],
    [130.0, 0.0, 0.0],
    [0.0, 450.0, 0.0],
    [0.0, 440.0, 0.0],
    [0.0, -230.0, 0.0],
    [0.0, -250.0, 0.0],
    [0.0, -110.0, 0.0],
    [0.0, -120.0, 0.0],
    [150.0, 20.0, 0.0],
    [0.0, 280.0, 0.0],
    [0.0, 250.0, 0.0],
    [-150.0, 20.0, 0.0],
    [0.0, 280.0, 0.0],
    [0.0, 250.0, 0.0],
];

/// Depth coefficients `(a, b)` of the sway plane: a joint displaced by
/// `(dx, dy)` from its rest position moves `a·dx + b·dy` in depth.
pub const SWAY_PLANE: (f64, f64) = (0.6, 0.3);

fn parent(j: usize) -> usize {
    if j < 17 {
        PARENTS_17[j]
    } else {
        j - 1
    }
}

fn bone(j: usize) -> [f64; 3] {
    if j < 17 {
        BONES_17[j]
    } else {
        [0.0, 100.0, 0.0]
    }
}

/// Deterministic synthetic clips. Each joint adds a sum of low-frequency
/// sinusoids to the image-plane sway it inherits from its parent; the
/// accumulated sway displaces the rest skeleton inside [`SWAY_PLANE`] and
/// the result is projected through [`SYNTH_CAMERA`].
pub fn synth_generate(seed: u64, n_sequences: usize, total: usize, joints: usize, fps: f64) -> Vec<PoseSequence> {
    use std::f64::consts::TAU;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actions = ["walk", "wave", "sway", "reach"];
    let mut rest = vec![[0.0; 3]; joints];
    for j in 1..joints {
        let (p, b) = (rest[parent(j)], bone(j));
        rest[j] = std::array::from_fn(|k| p[k] + b[k]);
    }
    let (a, b) = SWAY_PLANE;
    (0..n_sequences)
        .map(|s| {
            // Three (amplitude mm, Hz, phase) terms per joint and image-plane axis.
            let waves: Vec<[[(f64, f64, f64); 3]; 2]> = (0..joints)
                .map(|j| {
                    let amp = if j == 0 { 0.0 } else { SYNTH_AMPLITUDE_MM };
                    std::array::from_fn(|_| {
                        std::array::from_fn(|_| {
                            (
                                amp * rng.random_range(0.2..1.0),
                                rng.random_range(0.2..1.5),
                                rng.random_range(0.0..TAU),
                            )
                        })
                    })
                })
                .collect();
            let mut joints3d = Vec::with_capacity(total);
            let mut joints2d = Vec::with_capacity(total);
            let mut sway = vec![[0.0; 2]; joints];
            for f in 0..total {
                let t = f as f64 / fps;
                for j in 1..joints {
                    let d = waves[j].map(|axis| {
                        axis.iter()
                            .map(|&(amp, hz, ph)| amp * (TAU * hz * t + ph).sin())
                            .sum::<f64>()
                    });
                    let p = sway[parent(j)];
                    sway[j] = [p[0] + d[0], p[1] + d[1]];
                }
                let pos: Vec<[f64; 3]> = (0..joints)
                    .map(|j| {
                        let [dx, dy] = sway[j];
                        [rest[j][0] + dx, rest[j][1] + dy, rest[j][2] + a * dx + b * dy]
                    })
                    .collect();
                joints2d.push(pos.iter().map(|&p| SYNTH_CAMERA.project(p)).collect());
                joints3d.push(pos);
            }
            PoseSequence {
                subject: format!("S{}", s % 5 + 1),
                action: actions[s % actions.len()].to_string(),
                fps,
                joints2d,
                joints3d,
            }
        })
        .collect()
}

/// Upper bound (mm) of one sinusoid term's amplitude.
pub const SYNTH_AMPLITUDE_MM: f64 = 40.0;

/// i.i.d. zero-mean Gaussian noise on every 2D coordinate.
pub fn add_gaussian_noise(seq: &PoseSequence, sigma: f64, seed: u64) -> Result<PoseSequence> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Range(format!("noise sigma must be non-negative, got {sigma}")));
    }
    let mut out = seq.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let dist = Normal::new(0.0, sigma).expect("sigma is positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in out.joints2d.iter_mut().flatten().flatten() {
        *v += dist.sample(&mut rng);
    }
    Ok(out)
}

/// Human-readable summary line per sequence.
pub fn describe(seqs: &[PoseSequence]) -> String {
    let mut s = String::new();
    for (i, q) in seqs.iter().enumerate() {
        let _ = writeln!(
            s,
            "{i}: {}/{} {} frames x {} joints @ {} fps",
            q.subject,
            q.action,
            q.frames(),
            q.joints(),
            q.fps
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_examples() {
        assert_eq!(stride_sample(0, 486, 243, SampleMode::Train).len(), 2);
        assert_eq!(stride_sample(0, 500, 243, SampleMode::Train).len(), 2);
        let eval = stride_sample(0, 500, 243, SampleMode::Eval);
        assert_eq!(eval.len(), 3);
        assert_eq!((eval[2].start, eval[2].valid), (486, 14));
        assert!(stride_sample(0, 242, 243, SampleMode::Train).is_empty());
        assert_eq!(stride_sample(0, 242, 243, SampleMode::Eval)[0].valid, 242);
    }

    #[test]
    fn ragged_record_names_line() {
        let good = dataset_to_string(&synth_generate(1, 1, 3, 2, 50.0)).unwrap();
        let mut bad = synth_generate(1, 1, 3, 2, 50.0).remove(0);
        bad.joints3d.pop();
        let text = format!("{good}{}\n", serde_json::to_string(&bad).unwrap());
        let err = parse_dataset(&text, Path::new("d.jsonl")).unwrap_err().to_string();
        assert!(err.starts_with("d.jsonl:2:"), "{err}");
        assert!(parse_dataset("", Path::new("e")).unwrap().is_empty());
    }

    #[test]
    fn padded_batch_repeats_last_frame() {
        let seqs = synth_generate(2, 1, 5, 3, 50.0);
        let w = stride_sample(0, 5, 3, SampleMode::Eval);
        let b = make_batch::<f64>(&seqs, &w[1..]).unwrap();
        assert_eq!(b.y3d.shape(), &[1, 3, 3, 3]);
        let last = seqs[0].joints3d[4][1];
        assert_eq!(b.y3d.at(&[0, 1, 2, 0]), last[0]);
        assert_eq!(b.y3d.at(&[0, 1, 1, 2]), last[2]);
    }

    #[test]
    fn synth_is_seeded_and_projects() {
        let a = synth_generate(5, 2, 30, 17, 50.0);
        assert_eq!(a, synth_generate(5, 2, 30, 17, 50.0));
        assert_ne!(a, synth_generate(6, 2, 30, 17, 50.0));
        for s in &a {
            s.validate().unwrap();
            for (p2, p3) in s.joints2d.iter().flatten().zip(s.joints3d.iter().flatten()) {
                assert_eq!(SYNTH_CAMERA.project(*p3), *p2);
            }
            assert!(s.joints3d.iter().all(|f| f[0] == [0.0; 3]));
        }
    }

    #[test]
    fn synth_depth_stays_in_sway_plane() {
        let (a, b) = SWAY_PLANE;
        let s = &synth_generate(2, 1, 60, 17, 50.0)[0];
        for j in 0..17 {
            let off = |f: usize| {
                let p = s.joints3d[f][j];
                p[2] - a * p[0] - b * p[1]
            };
            let spread = (0..60).map(|f| (off(f) - off(0)).abs()).fold(0.0, f64::max);
            assert!(spread < 1e-9, "joint {j} leaves its plane by {spread}");
        }
        let depth = s.joints3d.iter().map(|f| f[13][2]).fold((f64::MAX, f64::MIN), |(lo, hi), z| (lo.min(z), hi.max(z)));
        assert!(depth.1 - depth.0 > 20.0, "extremities should move in depth");
    }
}
