//! Central finite-difference checks of every backward rule, of the attention
//! modules and losses, and of a small end-to-end model, all in `f64`.
//!
//! Each problem reduces its output to a scalar through a fixed random
//! projection `Σ out·R`, so every output coordinate contributes to the check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionParams;
use crate::error::Result;
use crate::losses::{mpjve, tc_loss, total_loss, wmpjpe, JointWeights, LossWeights};
use crate::model::{ModelConfig, Rtpca};
use crate::nn::{normal, Ctx, ParamStore};
use crate::tensor::{OpKind, Tape, Tensor, Var};
use crate::tpca::{tpca_attention, Amplification, Compression, TpcaConfig, TpcaState};
use crate::xlr::{xlr_attention, XlrConfig};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Relative tolerance for single operations and modules.
pub const OP_TOL: f64 = 1e-4;
/// Relative tolerance for the end-to-end model.
pub const MODEL_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

type Forward<'a> = Box<dyn for<'t> Fn(&Ctx<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'a>;

/// One differentiable function of some input tensors and store parameters.
pub struct Problem<'a> {
    pub name: String,
    /// Operation whose corrupted rule this problem must expose.
    pub op: Option<OpKind>,
    pub tol: f64,
    pub store: ParamStore<f64>,
    pub inputs: Vec<Tensor<f64>>,
    /// Checked coordinates per tensor; `None` checks all of them.
    pub sample: Option<usize>,
    f: Forward<'a>,
}

impl<'a> Problem<'a> {
    pub fn new(
        name: &str,
        op: Option<OpKind>,
        inputs: Vec<Tensor<f64>>,
        f: impl for<'t> Fn(&Ctx<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'a,
    ) -> Self {
        Self {
            name: name.to_string(),
            op,
            tol: OP_TOL,
            store: ParamStore::new(),
            inputs,
            sample: None,
            f: Box::new(f),
        }
    }

    fn with_store(mut self, store: ParamStore<f64>) -> Self {
        self.store = store;
        self
    }

    fn objective(&self, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, store);
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t)).collect();
        let out = (self.f)(&ctx, &vars)?;
        Ok(projection(&out.shape())
            .data()
            .iter()
            .zip(out.data().iter())
            .map(|(r, o)| r * o)
            .sum())
    }

    /// Worst relative error between analytic and numeric gradients, with
    /// the backward rule of `corrupt` perturbed.
    pub fn check(&self, corrupt: Option<OpKind>) -> Result<CheckResult> {
        let tape = Tape::new();
        tape.corrupt_backward(corrupt);
        let ctx = Ctx::eval(&tape, &self.store);
        let vars: Vec<_> = self.inputs.iter().map(|t| tape.param(t)).collect();
        let out = (self.f)(&ctx, &vars)?;
        let r = tape.constant(&projection(&out.shape()));
        let grads = tape.backward(out.mul(r)?.sum())?;

        let mut worst = 0.0f64;
        let mut checked = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(0x6AD);
        let mut compare = |analytic: &Tensor<f64>, bump: &mut dyn FnMut(usize, f64) -> Result<f64>| -> Result<()> {
            for i in pick(analytic.numel(), self.sample, &mut rng) {
                let numeric = (bump(i, STEP)? - bump(i, -STEP)?) / (2.0 * STEP);
                let a = analytic.data()[i];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR));
                checked += 1;
            }
            Ok(())
        };
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).expect("inputs track gradients");
            compare(&analytic, &mut |i, h| {
                let mut inputs = self.inputs.clone();
                inputs[k].data_mut()[i] += h;
                self.objective(&self.store, &inputs)
            })?;
        }
        for id in self.store.ids() {
            let analytic = grads.get(ctx.bound().var(id)).expect("parameters track gradients");
            compare(&analytic, &mut |i, h| {
                let mut store = self.store.clone();
                store.get_mut(id).data_mut()[i] += h;
                self.objective(&store, &self.inputs)
            })?;
        }
        Ok(CheckResult {
            name: self.name.clone(),
            op: self.op,
            worst_rel: worst,
            tol: self.tol,
            checked,
        })
    }
}

fn projection(shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED ^ shape.iter().fold(0, |a, &d| a * 31 + d as u64));
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn pick(n: usize, sample: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match sample {
        Some(s) if s < n => rand::seq::index::sample(rng, n, s).into_vec(),
        _ => (0..n).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub op: Option<OpKind>,
    pub worst_rel: f64,
    pub tol: f64,
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst_rel <= self.tol
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failing(&self) -> Vec<&CheckResult> {
        self.results.iter().filter(|r| !r.passed()).collect()
    }

    /// Largest error among problems held to `tol`.
    pub fn worst_at(&self, tol: f64) -> f64 {
        self.results
            .iter()
            .filter(|r| r.tol == tol)
            .map(|r| r.worst_rel)
            .fold(0.0, f64::max)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            s.push_str(&format!(
                "{} {:<28} worst rel {:.3e} (tol {:.0e}, {} coords)\n",
                if r.passed() { "ok  " } else { "FAIL" },
                r.name,
                r.worst_rel,
                r.tol,
                r.checked
            ));
        }
        s.push_str(&format!(
            "worst op/module error {:.3e}, worst model error {:.3e}\n",
            self.worst_at(OP_TOL),
            self.worst_at(MODEL_TOL)
        ));
        s
    }
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Every problem of the suite.
pub fn problems() -> Vec<Problem<'static>> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut r = |s: &[usize]| rand_t(s, &mut rng);
    use OpKind as K;
    let mut v = vec![
        Problem::new("add", Some(K::Add), vec![r(&[2, 3]), r(&[2, 3])], |_, x| x[0].add(x[1])),
        Problem::new(
            "add (row broadcast)",
            Some(K::Add),
            vec![r(&[2, 3, 4]), r(&[4])],
            |_, x| x[0].add(x[1]),
        ),
        Problem::new(
            "add (general broadcast)",
            Some(K::Add),
            vec![r(&[2, 3, 4]), r(&[3, 1])],
            |_, x| x[0].add(x[1]),
        ),
        Problem::new("sub", Some(K::Sub), vec![r(&[4]), r(&[3, 4])], |_, x| x[0].sub(x[1])),
        Problem::new("mul", Some(K::Mul), vec![r(&[2, 3]), r(&[2, 3])], |_, x| x[0].mul(x[1])),
        Problem::new(
            "mul (broadcast)",
            Some(K::Mul),
            vec![r(&[2, 1, 3]), r(&[4, 3])],
            |_, x| x[0].mul(x[1]),
        ),
        Problem::new("scale", Some(K::Scale), vec![r(&[5])], |_, x| Ok(x[0].scale(-2.5))),
        Problem::new("add_scalar", Some(K::AddScalar), vec![r(&[5])], |_, x| {
            Ok(x[0].add_scalar(0.7).mul(x[0])?)
        }),
        Problem::new("matmul", Some(K::Matmul), vec![r(&[3, 4]), r(&[4, 2])], |_, x| {
            x[0].matmul(x[1])
        }),
        Problem::new(
            "matmul (batched)",
            Some(K::Matmul),
            vec![r(&[2, 3, 4]), r(&[2, 4, 5])],
            |_, x| x[0].matmul(x[1]),
        ),
        Problem::new(
            "matmul (shared rhs)",
            Some(K::Matmul),
            vec![r(&[2, 3, 4]), r(&[4, 5])],
            |_, x| x[0].matmul(x[1]),
        ),
        Problem::new("reshape", Some(K::Reshape), vec![r(&[2, 6])], |_, x| {
            x[0].reshape([3, 4])?.mul(x[0].reshape([3, 4])?)
        }),
        Problem::new("permute", Some(K::Permute), vec![r(&[2, 3, 4])], |_, x| {
            x[0].permute(&[2, 0, 1])
        }),
        Problem::new("concat", Some(K::Concat), vec![r(&[2, 3, 2]), r(&[2, 1, 2])], |_, x| {
            Var::concat(&[x[0], x[1], x[0]], 1)
        }),
        Problem::new("narrow", Some(K::Narrow), vec![r(&[2, 5, 3])], |_, x| {
            x[0].narrow(1, 1, 3)
        }),
        Problem::new("softmax", Some(K::Softmax), vec![r(&[3, 5])], |_, x| x[0].softmax(1)),
        Problem::new("softmax (inner axis)", Some(K::Softmax), vec![r(&[3, 4, 2])], |_, x| {
            x[0].softmax(1)
        }),
        Problem::new(
            "layer_norm",
            Some(K::LayerNorm),
            vec![r(&[2, 3, 6]), r(&[6]), r(&[6])],
            |_, x| x[0].layer_norm(x[1], x[2], 1e-5),
        ),
        Problem::new("gelu", Some(K::Gelu), vec![r(&[3, 4]).scale_by(3.0)], |_, x| {
            Ok(x[0].gelu())
        }),
        Problem::new(
            "adaptive_avg_pool_seq",
            Some(K::AdaptivePool),
            vec![r(&[2, 7, 3])],
            |_, x| x[0].adaptive_avg_pool_seq(3),
        ),
        Problem::new(
            "strided_conv_seq",
            Some(K::Conv),
            vec![r(&[2, 8, 3]), r(&[2, 3, 4]), r(&[4])],
            |_, x| x[0].strided_conv_seq(x[1], x[2], 2),
        ),
        Problem::new(
            "transposed_conv_seq",
            Some(K::ConvTranspose),
            vec![r(&[2, 3, 3]), r(&[2, 3, 4]), r(&[4])],
            |_, x| x[0].transposed_conv_seq(x[1], x[2], 2),
        ),
        Problem::new("repeat_seq", Some(K::Repeat), vec![r(&[2, 3, 2])], |_, x| {
            x[0].repeat_seq(3)
        }),
        Problem::new("dropout", Some(K::Dropout), vec![r(&[4, 6])], |_, x| {
            Ok(x[0].dropout(0.3, Some(&mut ChaCha8Rng::seed_from_u64(3))))
        }),
        Problem::new("sum", Some(K::Sum), vec![r(&[3, 2])], |_, x| {
            Ok(x[0].sum().mul(x[0])?)
        }),
        Problem::new("sum_axis", Some(K::SumAxis), vec![r(&[2, 3, 4])], |_, x| {
            x[0].sum_axis(1)
        }),
        Problem::new("norm", Some(K::Norm), vec![r(&[4, 3])], |_, x| x[0].norm_last()),
    ];
    v.extend(module_problems(&mut rng));
    v.push(end_to_end_problem());
    v
}

trait ScaleBy {
    fn scale_by(self, c: f64) -> Self;
}

impl ScaleBy for Tensor<f64> {
    fn scale_by(mut self, c: f64) -> Self {
        self.data_mut().iter_mut().for_each(|v| *v *= c);
        self
    }
}

fn module_problems(rng: &mut ChaCha8Rng) -> Vec<Problem<'static>> {
    let mut out = Vec::new();
    let (n, c, heads) = (8, 4, 2);

    let mut store = ParamStore::new();
    let attn = AttentionParams::new(&mut store, "attn", c, heads, rng).expect("valid heads");
    out.push(
        Problem::new(
            "multi_head_attention",
            None,
            vec![rand_t(&[2, n, c], rng), rand_t(&[2, 5, c], rng)],
            move |ctx, x| Ok(attn.forward(ctx, x[0], x[1], x[1])?.out),
        )
        .with_store(store),
    );

    for (label, n, cfg) in [
        ("tpca (pool, transposed conv)", 9, TpcaConfig::default()),
        (
            "tpca (conv, linear)",
            8,
            TpcaConfig {
                compression: Compression::Conv,
                amplification: Amplification::Linear,
                ..TpcaConfig::default()
            },
        ),
    ] {
        let mut store = ParamStore::new();
        let attn = AttentionParams::new(&mut store, "attn", c, heads, rng).expect("valid heads");
        let tk = TpcaState::new(&mut store, "tk", cfg, c, rng).expect("valid pyramid");
        let tv = TpcaState::new(&mut store, "tv", cfg, c, rng).expect("valid pyramid");
        perturb_biases(&mut store, rng);
        out.push(
            Problem::new(label, None, vec![rand_t(&[2, n, c], rng)], move |ctx, x| {
                Ok(tpca_attention(ctx, &attn, &tk, &tv, x[0])?.out)
            })
            .with_store(store),
        );
    }

    let mut store = ParamStore::new();
    let a0 = AttentionParams::new(&mut store, "a0", c, heads, rng).expect("valid heads");
    let a1 = AttentionParams::new(&mut store, "a1", c, heads, rng).expect("valid heads");
    let tks: Vec<_> = (0..4)
        .map(|i| TpcaState::new(&mut store, &format!("t{i}"), TpcaConfig::default(), c, rng).expect("valid pyramid"))
        .collect();
    perturb_biases(&mut store, rng);
    out.push(
        Problem::new(
            "xlr (two layers)",
            None,
            vec![rand_t(&[2, n, c], rng)],
            move |ctx, x| {
                let cfg = XlrConfig::default();
                let first = xlr_attention(ctx, &a0, &cfg, x[0], None, &tks[0], &tks[1])?;
                let z = x[0].add(first.out)?;
                Ok(xlr_attention(ctx, &a1, &cfg, z, Some(first.carry_next), &tks[2], &tks[3])?.out)
            },
        )
        .with_store(store),
    );

    let shape = [2, 3, 5, 3];
    let w = JointWeights::new(vec![1.0, 2.5, 4.0]).expect("positive weights");
    for squared in [true, false] {
        let w = w.clone();
        let name = if squared { "wmpjpe (squared)" } else { "wmpjpe" };
        out.push(Problem::new(
            name,
            None,
            vec![rand_t(&shape, rng), rand_t(&shape, rng)],
            move |_, x| wmpjpe(x[0], x[1], &w, squared),
        ));
    }
    out.push(Problem::new(
        "mpjve",
        None,
        vec![rand_t(&shape, rng), rand_t(&shape, rng)],
        |_, x| mpjve(x[0], x[1]),
    ));
    out.push(Problem::new(
        "tc_loss",
        None,
        vec![rand_t(&shape, rng), rand_t(&shape, rng)],
        |_, x| tc_loss(x[0], x[1]),
    ));
    out.push(Problem::new(
        "total_loss",
        None,
        vec![rand_t(&shape, rng), rand_t(&shape, rng)],
        move |_, x| Ok(total_loss(x[0], x[1], &w, &LossWeights::default())?.total),
    ));
    out
}

/// Zero-initialized biases would hide errors in their gradients' spread.
fn perturb_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).ends_with(".bias") {
            let t = store.get_mut(id);
            let shape = t.shape().to_vec();
            *t = normal(&shape, 0.3, rng);
        }
    }
}

/// Micro configuration of the full network.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        frames: 9,
        joints: 3,
        channels: 8,
        blocks: 2,
        heads: 2,
        mlp_ratio: 2,
        dropout: 0.0,
        output_scale: 1.0,
        ..ModelConfig::default()
    }
}

fn end_to_end_problem() -> Problem<'static> {
    let cfg = micro_config();
    let (net, mut store) = Rtpca::new::<f64>(cfg.clone(), 5).expect("valid micro config");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    perturb_biases(&mut store, &mut rng);
    let x = rand_t(&[1, cfg.joints, cfg.frames, 2], &mut rng);
    let y = rand_t(&[1, cfg.joints, cfg.frames, 3], &mut rng).scale_by(0.5);
    let w = JointWeights::uniform(cfg.joints);
    let mut p = Problem::new("end-to-end model", None, vec![x], move |ctx, v| {
        let out = net.forward(ctx, v[0])?.out;
        Ok(total_loss(out, ctx.tape.constant(&y), &w, &LossWeights::default())?.total)
    })
    .with_store(store);
    p.tol = MODEL_TOL;
    p.sample = Some(6);
    p
}

/// Runs every problem, optionally with one backward rule corrupted.
pub fn run(corrupt: Option<OpKind>) -> Result<GradcheckReport> {
    let results = problems()
        .iter()
        .map(|p| p.check(corrupt))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_kind_has_a_dedicated_problem() {
        let covered: Vec<_> = problems().iter().filter_map(|p| p.op).collect();
        for k in OpKind::ALL.iter().filter(|k| **k != OpKind::Leaf) {
            assert!(covered.contains(k), "{} has no gradient problem", k.name());
        }
    }

    #[test]
    fn corrupted_matmul_is_caught() {
        let p = problems().into_iter().find(|p| p.name == "matmul").unwrap();
        assert!(p.check(None).unwrap().passed());
        assert!(!p.check(Some(OpKind::Matmul)).unwrap().passed());
    }
}
