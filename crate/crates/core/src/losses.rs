//! Differentiable training losses over poses `[B, J, F, 3]` in millimeters.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// The 17-joint body-region map shipped with the crate.
pub const DEFAULT_JOINT_MAP: &str = include_str!("../configs/joint_weights.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub group: String,
}

/// Per-region weights plus the joint → region assignment, in joint order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointMap {
    pub groups: BTreeMap<String, f64>,
    pub joints: Vec<JointSpec>,
}

impl JointMap {
    pub fn parse(text: &str) -> Result<Self> {
        let map: Self = serde_json::from_str(text)?;
        map.weights()?;
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn default_17() -> Self {
        Self::parse(DEFAULT_JOINT_MAP).expect("bundled joint map is valid")
    }

    pub fn weights(&self) -> Result<JointWeights> {
        let w = self
            .joints
            .iter()
            .map(|j| {
                self.groups
                    .get(&j.group)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("joint {} names unknown group {}", j.name, j.group)))
            })
            .collect::<Result<Vec<_>>>()?;
        JointWeights::new(w)
    }
}

/// Positive per-joint loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointWeights(Vec<f64>);

impl JointWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
            return Err(Error::Config(format!(
                "joint weights must be positive and finite: {w:?}"
            )));
        }
        Ok(Self(w))
    }

    pub fn uniform(joints: usize) -> Self {
        Self(vec![1.0; joints.max(1)])
    }

    /// The bundled region weights when `joints == 17`, uniform otherwise.
    pub fn default_for(joints: usize) -> Self {
        if joints == 17 {
            JointMap::default_17().weights().expect("bundled joint map is valid")
        } else {
            Self::uniform(joints)
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn row<'t, T: Float>(&self, tape: &'t Tape<T>) -> Var<'t, T> {
        tape.constant(&Tensor::from_fn([self.0.len()], |i| T::lit(self.0[i])))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_t: f64,
    pub lambda_m: f64,
    /// Squared (default) or plain Euclidean norm inside the weighted term.
    pub squared: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_t: 0.5,
            lambda_m: 0.5,
            squared: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_t >= 0.0 && self.lambda_m >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative: lambda_t {}, lambda_m {}",
                self.lambda_t, self.lambda_m
            )));
        }
        Ok(())
    }
}

fn check_pair<T: Float>(p: &Var<'_, T>, g: &Var<'_, T>) -> Result<(usize, usize)> {
    let (ps, gs) = (p.shape(), g.shape());
    if ps != gs || ps.len() != 4 || ps[3] != 3 {
        return Err(Error::shape(format!(
            "poses must both be [B, J, F, 3]: {ps:?} vs {gs:?}"
        )));
    }
    Ok((ps[1], ps[2]))
}

/// First temporal difference along the frame axis.
fn diff_frames<'t, T: Float>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let f = x.shape()[2];
    x.narrow(2, 1, f - 1)?.sub(x.narrow(2, 0, f - 1)?)
}

/// Joint-weighted position loss: batch mean of the joint mean of
/// `w_j · mean_f ||p − g||²` (or `||p − g||` when `squared` is off).
pub fn wmpjpe<'t, T: Float>(p: Var<'t, T>, g: Var<'t, T>, w: &JointWeights, squared: bool) -> Result<Var<'t, T>> {
    let (joints, _) = check_pair(&p, &g)?;
    if w.len() != joints {
        return Err(Error::shape(format!("{} joint weights for {joints} joints", w.len())));
    }
    let d = p.sub(g)?;
    let per = if squared {
        d.square().sum_axis(3)?
    } else {
        d.norm_last()?
    };
    Ok(per.mean_axis(2)?.mul(w.row(p.tape))?.mean())
}

/// Mean per-joint velocity error.
pub fn mpjve<'t, T: Float>(p: Var<'t, T>, g: Var<'t, T>) -> Result<Var<'t, T>> {
    let (_, frames) = check_pair(&p, &g)?;
    if frames < 2 {
        return Err(Error::Range(format!(
            "velocity error needs at least 2 frames, got {frames}"
        )));
    }
    Ok(diff_frames(p.sub(g)?)?.norm_last()?.mean())
}

/// Temporal coherence: mean norm of the acceleration mismatch.
pub fn tc_loss<'t, T: Float>(p: Var<'t, T>, g: Var<'t, T>) -> Result<Var<'t, T>> {
    let (_, frames) = check_pair(&p, &g)?;
    if frames < 3 {
        return Err(Error::Range(format!(
            "acceleration loss needs at least 3 frames, got {frames}"
        )));
    }
    Ok(diff_frames(diff_frames(p.sub(g)?)?)?.norm_last()?.mean())
}

pub struct LossParts<'t, T: Float> {
    pub total: Var<'t, T>,
    pub wmpjpe: Var<'t, T>,
    pub tc: Var<'t, T>,
    pub mpjve: Var<'t, T>,
}

/// `wmpjpe + λ_t·tc + λ_m·mpjve`.
pub fn total_loss<'t, T: Float>(
    p: Var<'t, T>,
    g: Var<'t, T>,
    w: &JointWeights,
    lw: &LossWeights,
) -> Result<LossParts<'t, T>> {
    lw.validate()?;
    let wm = wmpjpe(p, g, w, lw.squared)?;
    let tc = tc_loss(p, g)?;
    let mv = mpjve(p, g)?;
    let total = wm.add(tc.scale(lw.lambda_t))?.add(mv.scale(lw.lambda_m))?;
    Ok(LossParts {
        total,
        wmpjpe: wm,
        tc,
        mpjve: mv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(v: &[f64], b: usize, j: usize, f: usize) -> Tensor<f64> {
        Tensor::from_f64([b, j, f, 3], v).unwrap()
    }

    #[test]
    fn bundled_map_covers_17_joints() {
        let w = JointWeights::default_for(17);
        assert_eq!(w.len(), 17);
        assert_eq!(w.as_slice()[0], 1.0);
        assert_eq!(w.as_slice()[10], 1.5);
        assert_eq!(w.as_slice()[12], 2.5);
        assert_eq!(w.as_slice()[16], 4.0);
    }

    #[test]
    fn hand_weighted_error() {
        let tape = Tape::new();
        let p = tape.constant(&pose(&[3., 4., 0.], 1, 1, 1));
        let g = tape.constant(&pose(&[0., 0., 0.], 1, 1, 1));
        let one = JointWeights::uniform(1);
        assert_eq!(wmpjpe(p, g, &one, true).unwrap().item(), 25.0);
        assert_eq!(wmpjpe(p, g, &one, false).unwrap().item(), 5.0);
        let four = JointWeights::new(vec![4.0]).unwrap();
        assert_eq!(wmpjpe(p, g, &four, true).unwrap().item(), 100.0);
    }

    #[test]
    fn short_sequences_are_range_errors() {
        let tape = Tape::new();
        let p = tape.constant(&Tensor::<f64>::zeros([1, 1, 2, 3]));
        assert!(mpjve(p, p).is_ok());
        assert!(matches!(tc_loss(p, p), Err(Error::Range(_))));
        let q = tape.constant(&Tensor::<f64>::zeros([1, 1, 1, 3]));
        assert!(matches!(mpjve(q, q), Err(Error::Range(_))));
    }
}
