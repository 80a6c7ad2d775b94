//! Run configuration, the training loop, evaluation and the ablation grid.
//!
//! Every random draw derives from `RunConfig::seed`: window order from
//! `(seed, epoch)`, dropout masks from `(seed, step)`, input noise from
//! `(seed, sequence)`. A run resumed from a checkpoint therefore replays the
//! same batches and masks as an uninterrupted one.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::data::{self, make_batch, sample_all, PoseSequence, SampleMode};
use crate::error::{Error, Result};
use crate::losses::{total_loss, JointMap, JointWeights, LossWeights};
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::model::{ModelConfig, Rtpca};
use crate::nn::{Ctx, ParamStore};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Float, Tape, Tensor};
use crate::tpca::TpcaConfig;
use crate::xlr::XlrConfig;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    seed ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ index.wrapping_mul(GOLDEN)
}

/// Synthetic dataset recipe, see [`data::synth_generate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub sequences: usize,
    pub frames: usize,
    pub joints: usize,
    #[serde(default = "default_fps")]
    pub fps: f64,
}

fn default_fps() -> f64 {
    crate::metrics::DEFAULT_FPS
}

/// A JSON Lines file or a synthetic recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    File(PathBuf),
    Synth { synth: SynthSpec },
}

impl DataSource {
    /// Relative file paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Vec<PoseSequence>> {
        match self {
            DataSource::File(p) => data::load_dataset(&base.join(p)),
            DataSource::Synth { synth: s } => Ok(data::synth_generate(s.seed, s.sequences, s.frames, s.joints, s.fps)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// The four rows of the robustness table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "STE")]
    Ste,
    #[serde(rename = "STE+TPCA")]
    SteTpca,
    #[serde(rename = "STE+XLR")]
    SteXlr,
    #[serde(rename = "RTPCA")]
    Rtpca,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ste, Variant::SteTpca, Variant::SteXlr, Variant::Rtpca];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ste => "STE",
            Variant::SteTpca => "STE+TPCA",
            Variant::SteXlr => "STE+XLR",
            Variant::Rtpca => "RTPCA",
        }
    }

    /// `base` with the pyramid and the cross-layer link switched per variant.
    /// Enabled pyramids keep `base`'s settings, or the defaults if `base` has
    /// none.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let tpca_on = matches!(self, Variant::SteTpca | Variant::Rtpca);
        let xlr_on = matches!(self, Variant::SteXlr | Variant::Rtpca);
        let mut cfg = base.clone();
        cfg.tpca = match (tpca_on, base.tpca.stages) {
            (false, _) => TpcaConfig { stages: 0, ..base.tpca },
            (true, 0) => TpcaConfig::default(),
            (true, _) => base.tpca,
        };
        cfg.xlr = XlrConfig {
            enabled: xlr_on,
            ..base.xlr
        };
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub sigmas: Vec<f64>,
    #[serde(default = "all_variants")]
    pub variants: Vec<Variant>,
}

fn all_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    /// Joint → region weight file; `None` uses the bundled map for 17 joints
    /// and uniform weights otherwise.
    pub joint_map: Option<PathBuf>,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have been taken in total.
    pub max_steps: Option<usize>,
    /// Evaluate (and possibly checkpoint) every this many epochs.
    pub eval_every: usize,
    pub seed: u64,
    pub precision: Precision,
    pub train_data: DataSource,
    /// Defaults to the training sequences.
    pub eval_data: Option<DataSource>,
    /// Standard deviation of Gaussian noise on 2D inputs, in normalized units.
    pub noise_sigma: Option<f64>,
    pub out_dir: PathBuf,
    pub ablation: Option<AblationConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            joint_map: None,
            optimizer: AdamConfig::default(),
            batch_size: 32,
            epochs: 10,
            max_steps: None,
            eval_every: 1,
            seed: 0,
            precision: Precision::F32,
            train_data: DataSource::Synth {
                synth: SynthSpec {
                    seed: 0,
                    sequences: 4,
                    frames: 270,
                    joints: 17,
                    fps: default_fps(),
                },
            },
            eval_data: None,
            noise_sigma: None,
            out_dir: PathBuf::from("runs/default"),
            ablation: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::parse(&text)?, base))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be at least 1".into()));
        }
        if let Some(s) = self.noise_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("noise_sigma must be non-negative, got {s}")));
            }
        }
        Ok(())
    }

    pub fn joint_weights(&self, base: &Path) -> Result<JointWeights> {
        let w = match &self.joint_map {
            Some(p) => JointMap::load(&base.join(p))?.weights()?,
            None => JointWeights::default_for(self.model.joints),
        };
        if w.len() != self.model.joints {
            return Err(Error::Config(format!(
                "joint map has {} joints, model expects {}",
                w.len(),
                self.model.joints
            )));
        }
        Ok(w)
    }
}

/// Applies input noise deterministically per sequence.
pub fn corrupt(seqs: &[PoseSequence], sigma: Option<f64>, seed: u64, stream: u64) -> Result<Vec<PoseSequence>> {
    match sigma {
        None => Ok(seqs.to_vec()),
        Some(s) => seqs
            .iter()
            .enumerate()
            .map(|(i, q)| data::add_gaussian_noise(q, s, mix(seed, stream, i as u64)))
            .collect(),
    }
}

fn check_joints(seqs: &[PoseSequence], cfg: &ModelConfig) -> Result<()> {
    match seqs.iter().find(|s| s.joints() != cfg.joints) {
        Some(s) => Err(Error::Config(format!(
            "sequence {}/{} has {} joints, model expects {}",
            s.subject,
            s.action,
            s.joints(),
            cfg.joints
        ))),
        None => Ok(()),
    }
}

/// Parameters, optimizer moments and progress counters.
pub struct TrainState<T: Float> {
    pub net: Rtpca,
    pub params: ParamStore<T>,
    pub adam: AdamState<T>,
    pub best_mpjpe: Option<f64>,
}

impl<T: Float> TrainState<T> {
    pub fn new(model: ModelConfig, seed: u64) -> Result<Self> {
        let (net, params) = Rtpca::new(model, seed)?;
        let adam = AdamState::new(&params);
        Ok(Self {
            net,
            params,
            adam,
            best_mpjpe: None,
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Parameters and, with `with_moments`, Adam moments as a checkpoint.
    pub fn to_checkpoint(&self, run: &RunConfig, with_moments: bool) -> Result<Checkpoint> {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            self.params.iter().map(|(n, t)| (n.to_string(), t.cast())).collect();
        if with_moments {
            for ((n, _), (m, v)) in self.params.iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
                tensors.push((format!("adam.m.{n}"), m.cast()));
                tensors.push((format!("adam.v.{n}"), v.cast()));
            }
        }
        Ok(Checkpoint {
            config: serde_json::to_value(run)?,
            meta: json!({ "step": self.adam.step, "best_mpjpe": self.best_mpjpe }),
            tensors,
        })
    }

    /// Rebuilds the state for `model` and overwrites it from `ck`. The
    /// checkpoint's model configuration must equal `model`.
    pub fn from_checkpoint(model: &ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let saved: ModelConfig = serde_json::from_value(ck.config.get("model").cloned().unwrap_or_default())
            .map_err(|e| Error::Config(format!("checkpoint has no usable model config: {e}")))?;
        if &saved != model {
            return Err(Error::Config(format!(
                "checkpoint model {} does not match config model {}",
                serde_json::to_string(&saved)?,
                serde_json::to_string(model)?
            )));
        }
        let mut st = Self::new(model.clone(), 0)?;
        let ids: Vec<_> = st.params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let name = st.params.name(id).to_string();
            let load = |key: &str, target: &mut Tensor<T>| -> Result<()> {
                let src = ck
                    .get(key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                if src.shape() != target.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {key} has shape {:?}, expected {:?}",
                        src.shape(),
                        target.shape()
                    )));
                }
                let grad_flag = target.requires_grad();
                *target = src.cast::<T>().with_requires_grad(grad_flag);
                Ok(())
            };
            load(&name, st.params.get_mut(id))?;
            if ck.get(&format!("adam.m.{name}")).is_some() {
                load(&format!("adam.m.{name}"), &mut st.adam.m[k])?;
                load(&format!("adam.v.{name}"), &mut st.adam.v[k])?;
            }
        }
        st.adam.step = ck.meta.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
        st.best_mpjpe = ck.meta.get("best_mpjpe").and_then(|v| v.as_f64());
        Ok(st)
    }
}

/// Per-step losses as logged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub wmpjpe: f64,
    pub tc: f64,
    pub mpjve: f64,
}

pub const LOG_HEADER: &str = "step,epoch,lr,total,wmpjpe,tc,mpjve";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, self.total, self.wmpjpe, self.tc, self.mpjve
        )
    }
}

/// One optimizer step on `windows`; returns the losses before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Float>(
    st: &mut TrainState<T>,
    seqs: &[PoseSequence],
    windows: &[data::Window],
    weights: &JointWeights,
    run: &RunConfig,
    epoch: usize,
) -> Result<StepLog> {
    let batch = make_batch::<T>(seqs, windows)?;
    let step = st.adam.step;
    let tape = Tape::new();
    let rng = ChaCha8Rng::seed_from_u64(mix(run.seed, 1, step));
    let ctx = Ctx::train(&tape, &st.params, run.model.dropout, rng);
    let pred = st.net.forward(&ctx, tape.constant(&batch.x2d))?.out;
    let parts = total_loss(pred, tape.constant(&batch.y3d), weights, &run.loss)?;
    let lr = run.optimizer.lr_at(epoch);
    let log = StepLog {
        step: step + 1,
        epoch,
        lr,
        total: parts.total.item().as_f64(),
        wmpjpe: parts.wmpjpe.item().as_f64(),
        tc: parts.tc.item().as_f64(),
        mpjve: parts.mpjve.item().as_f64(),
    };
    if !log.total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss {} at step {}",
            log.total, log.step
        )));
    }
    let grads = tape.backward(parts.total)?;
    st.params.zero_grad();
    st.params.accumulate_grads(ctx.bound(), &grads)?;
    st.adam.step(&mut st.params, &run.optimizer, lr)?;
    Ok(log)
}

/// Evaluation output: metrics plus the final temporal block's attention on
/// the first evaluation window.
pub struct Evaluation {
    pub report: MetricsReport,
    /// `[J, h, F, F + n_p]`
    pub attention: Option<Tensor<f64>>,
}

/// Runs the network over eval windows, stitches the real frames of each
/// sequence back together and scores them. With `gt_as_prediction` the
/// network is bypassed and the targets are scored against themselves.
pub fn evaluate<T: Float>(
    net: &Rtpca,
    params: &ParamStore<T>,
    seqs: &[PoseSequence],
    batch_size: usize,
    gt_as_prediction: bool,
) -> Result<Evaluation> {
    let cfg = &net.config;
    check_joints(seqs, cfg)?;
    let windows = sample_all(seqs, cfg.frames, SampleMode::Eval);
    let j = cfg.joints;
    // Stitched predictions, [J][F_total][3] per sequence.
    let mut preds: Vec<Vec<f64>> = seqs.iter().map(|s| vec![0.0; j * s.frames() * 3]).collect();
    let mut attention = None;
    for chunk in windows.chunks(batch_size.max(1)) {
        let batch = make_batch::<T>(seqs, chunk)?;
        let out: Vec<f64> = if gt_as_prediction {
            batch.y3d.to_f64_vec()
        } else {
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape, params);
            let fwd = net.forward(&ctx, tape.constant(&batch.x2d))?;
            if attention.is_none() {
                let w = fwd.last_weights.value();
                let s = w.shape().to_vec();
                let per = s[1] * s[2] * s[3];
                attention = Some(Tensor::new([j, s[1], s[2], s[3]], w.to_f64_vec()[..j * per].to_vec())?);
            }
            fwd.out.value().to_f64_vec()
        };
        let f = cfg.frames;
        for (b, w) in chunk.iter().enumerate() {
            let total = seqs[w.sequence].frames();
            let dst = &mut preds[w.sequence];
            for joint in 0..j {
                for t in 0..w.valid {
                    let src = ((b * j + joint) * f + t) * 3;
                    let d = (joint * total + w.start + t) * 3;
                    dst[d..d + 3].copy_from_slice(&out[src..src + 3]);
                }
            }
        }
    }
    let mut acc = MetricsAccumulator::new();
    for (s, p) in seqs.iter().zip(preds) {
        let n = s.frames();
        if n == 0 {
            continue;
        }
        let g = Tensor::from_fn([1, j, n, 3], |i| {
            let (joint, rest) = (i / (n * 3), i % (n * 3));
            s.joints3d[rest / 3][joint][rest % 3]
        });
        acc.add(&s.action, &Tensor::new([1, j, n, 3], p)?, &g, s.fps)?;
    }
    Ok(Evaluation {
        report: acc.report(),
        attention,
    })
}

/// Writes `joint,head,query,key,weight` rows.
pub fn write_attention_csv(path: &Path, att: &Tensor<f64>) -> Result<()> {
    let s = att.shape();
    let mut out = String::from("joint,head,query,key,weight\n");
    for (i, w) in att.data().iter().enumerate() {
        let key = i % s[3];
        let query = (i / s[3]) % s[2];
        let head = (i / (s[3] * s[2])) % s[1];
        let joint = i / (s[3] * s[2] * s[1]);
        out.push_str(&format!("{joint},{head},{query},{key},{w}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Summary of a finished training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub first: Option<StepLog>,
    pub last: Option<StepLog>,
    pub best_mpjpe: Option<f64>,
    pub final_report: MetricsReport,
}

/// Training files inside the output directory.
pub struct RunPaths {
    pub log: PathBuf,
    pub best: PathBuf,
    pub last: PathBuf,
    pub report: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            log: dir.join("train_log.csv"),
            best: dir.join("best.ckpt"),
            last: dir.join("last.ckpt"),
            report: dir.join("train_report.json"),
        }
    }
}

/// Trains from scratch, or from `resume` when given, writing the step log,
/// the best and last checkpoints and a final report into `out_dir`.
pub fn run_training(run: &RunConfig, base: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    match run.precision {
        Precision::F32 => run_training_as::<f32>(run, base, out_dir, resume),
        Precision::F64 => run_training_as::<f64>(run, base, out_dir, resume),
    }
}

fn run_training_as<T: Float>(
    run: &RunConfig,
    base: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    run.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths = RunPaths::new(out_dir);
    let weights = run.joint_weights(base)?;
    let train_clean = run.train_data.load(base)?;
    check_joints(&train_clean, &run.model)?;
    let train = corrupt(&train_clean, run.noise_sigma, run.seed, 2)?;
    let eval_seqs = match &run.eval_data {
        Some(src) => corrupt(&src.load(base)?, run.noise_sigma, run.seed, 3)?,
        None => train.clone(),
    };
    let windows = sample_all(&train, run.model.frames, SampleMode::Train);
    if windows.is_empty() {
        return Err(Error::Config(format!(
            "no training window of {} frames fits the training data",
            run.model.frames
        )));
    }
    let per_epoch = windows.len().div_ceil(run.batch_size);
    let mut total_steps = (run.epochs * per_epoch) as u64;
    if let Some(m) = run.max_steps {
        total_steps = total_steps.min(m as u64);
    }

    let mut st = match resume {
        Some(p) => TrainState::<T>::from_checkpoint(&run.model, &Checkpoint::load(p)?)?,
        None => TrainState::<T>::new(run.model.clone(), run.seed)?,
    };
    let fresh_log = resume.is_none() || !paths.log.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh_log)
        .truncate(fresh_log)
        .open(&paths.log)
        .map_err(|e| Error::io(&paths.log, e))?;
    if fresh_log {
        writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&paths.log, e))?;
    }

    let mut first = None;
    let mut last = None;
    let mut order: Option<(usize, Vec<usize>)> = None;
    while st.step() < total_steps {
        let step = st.step() as usize;
        let (epoch, slot) = (step / per_epoch, step % per_epoch);
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut idx: Vec<usize> = (0..windows.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(run.seed, 4, epoch as u64)));
            order = Some((epoch, idx));
        }
        let idx = &order.as_ref().expect("set above").1;
        let picked: Vec<_> = idx[slot * run.batch_size..((slot + 1) * run.batch_size).min(idx.len())]
            .iter()
            .map(|&i| windows[i])
            .collect();
        let row = train_step(&mut st, &train, &picked, &weights, run, epoch)?;
        writeln!(log, "{}", row.csv_row()).map_err(|e| Error::io(&paths.log, e))?;
        first.get_or_insert(row);
        last = Some(row);

        let epoch_done = slot + 1 == per_epoch;
        let finished = st.step() == total_steps;
        if (epoch_done && (epoch + 1) % run.eval_every == 0) || finished {
            let ev = evaluate(&st.net, &st.params, &eval_seqs, run.batch_size, false)?;
            let m = ev.report.mpjpe_mm;
            if !m.is_finite() {
                return Err(Error::Numerical(format!("non-finite eval MPJPE at step {}", st.step())));
            }
            if st.best_mpjpe.is_none_or(|b| m < b) {
                st.best_mpjpe = Some(m);
                st.to_checkpoint(run, false)?.save(&paths.best)?;
            }
        }
    }
    log.flush().map_err(|e| Error::io(&paths.log, e))?;
    st.to_checkpoint(run, true)?.save(&paths.last)?;
    let final_report = evaluate(&st.net, &st.params, &eval_seqs, run.batch_size, false)?.report;
    final_report.write_json(&paths.report)?;
    Ok(TrainOutcome {
        steps: st.step(),
        first,
        last,
        best_mpjpe: st.best_mpjpe,
        final_report,
    })
}

/// Evaluates a checkpoint, writing `report.json`, `per_frame_mpjpe.csv` and
/// `attention.csv` into `out_dir`.
pub fn run_eval(
    run: &RunConfig,
    base: &Path,
    checkpoint: &Path,
    out_dir: &Path,
    sigma: Option<f64>,
    gt_as_prediction: bool,
) -> Result<MetricsReport> {
    run.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let st = TrainState::<f64>::from_checkpoint(&run.model, &Checkpoint::load(checkpoint)?)?;
    let src = run.eval_data.as_ref().unwrap_or(&run.train_data);
    let stream = if run.eval_data.is_some() { 3 } else { 2 };
    let seqs = corrupt(&src.load(base)?, sigma.or(run.noise_sigma), run.seed, stream)?;
    let ev = evaluate(&st.net, &st.params, &seqs, run.batch_size, gt_as_prediction)?;
    ev.report.write_json(&out_dir.join("report.json"))?;
    ev.report.write_per_frame_csv(&out_dir.join("per_frame_mpjpe.csv"))?;
    if let Some(att) = &ev.attention {
        write_attention_csv(&out_dir.join("attention.csv"), att)?;
    }
    Ok(ev.report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: &'static str,
    pub sigma: f64,
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub mpjve_mm: f64,
    pub accel_mm_s2: f64,
}

pub const ABLATION_HEADER: &str = "variant,sigma,mpjpe_mm,p_mpjpe_mm,mpjve_mm,accel_mm_s2";

/// Trains and evaluates every (variant, sigma) cell with shared seeds and
/// writes `ablation.csv`. Each cell keeps its own run directory.
pub fn run_ablation(run: &RunConfig, base: &Path, out_dir: &Path, sigma: Option<f64>) -> Result<Vec<AblationRow>> {
    let (sigmas, variants) = match (&run.ablation, sigma) {
        (_, Some(s)) => (
            vec![s],
            run.ablation.as_ref().map_or_else(all_variants, |a| a.variants.clone()),
        ),
        (Some(a), None) => (a.sigmas.clone(), a.variants.clone()),
        (None, None) => {
            return Err(Error::Config(
                "ablation needs a sigma list in the config or --sigma".into(),
            ));
        }
    };
    if sigmas.is_empty() || variants.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::new();
    let mut csv = format!("{ABLATION_HEADER}\n");
    for &v in &variants {
        for &s in &sigmas {
            let cell = RunConfig {
                model: v.apply(&run.model),
                noise_sigma: Some(s),
                ablation: None,
                ..run.clone()
            };
            let dir = out_dir.join(format!("{}_sigma{s}", v.name().replace('+', "_")));
            run_training(&cell, base, &dir, None)?;
            let report = run_eval(&cell, base, &RunPaths::new(&dir).last, &dir, None, false)?;
            let row = AblationRow {
                variant: v.name(),
                sigma: s,
                mpjpe_mm: report.mpjpe_mm,
                p_mpjpe_mm: report.p_mpjpe_mm,
                mpjve_mm: report.mpjve_mm,
                accel_mm_s2: report.accel_mm_s2,
            };
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.variant, row.sigma, row.mpjpe_mm, row.p_mpjpe_mm, row.mpjve_mm, row.accel_mm_s2
            ));
            rows.push(row);
        }
    }
    let path = out_dir.join("ablation.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_toggle_pyramid_and_link() {
        let base = ModelConfig::default();
        let ste = Variant::Ste.apply(&base);
        assert_eq!((ste.tpca.stages, ste.xlr.enabled), (0, false));
        let full = Variant::Rtpca.apply(&ste);
        assert_eq!((full.tpca.stages, full.xlr.enabled), (2, true));
        assert_eq!(Variant::SteXlr.apply(&base).tpca.stages, 0);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert!(RunConfig::parse(r#"{"batch_size": 0}"#).is_err());
        assert!(RunConfig::parse(r#"{"bogus": 1}"#).is_err());
    }
}
