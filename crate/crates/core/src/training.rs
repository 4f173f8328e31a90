//! Pose loss, AMSGrad, learning-rate schedules, evaluation metrics and the
//! training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data_io::{flip_pose, stack, PoseSample};
use crate::error::{Error, Result};
use crate::model::RsNet;

/// `(1/N)[(1−α)Σ‖e_i‖² + αΣ‖e_i‖₁]` over the rows of `target − prediction`.
pub fn pose_loss(tape: &mut Tape, target: Var, prediction: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let diff = tape.sub(target, prediction)?;
    let n = tape.shape(diff).0.max(1) as f64;
    let sq = tape.square(diff);
    let sq = tape.sum(sq);
    let ab = tape.abs(diff);
    let ab = tape.sum(ab);
    let sq = tape.scale(sq, (1.0 - alpha) / n);
    let ab = tape.scale(ab, alpha / n);
    tape.add(sq, ab)
}

/// Value of [`pose_loss`] without a tape.
pub fn loss(target: &Tensor, prediction: &Tensor, alpha: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let t = tape.constant(target.clone());
    let p = tape.constant(prediction.clone());
    let l = pose_loss(&mut tape, t, p, alpha)?;
    Ok(tape.value(l)[(0, 0)])
}

/// Adam variant that divides by the running maximum of the second-moment
/// estimate.
#[derive(Clone, Debug)]
pub struct AmsGrad {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub v_max: Vec<Tensor>,
}

impl AmsGrad {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let zeros: Vec<Tensor> = shapes
            .into_iter()
            .map(|(r, c)| Tensor::zeros(r, c))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros.clone(),
            v_max: zeros,
        }
    }

    pub fn for_params(params: &[Tensor]) -> Self {
        Self::new(params.iter().map(Tensor::shape))
    }

    /// One update:
    /// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`, `v̂ ← max(v̂, v)`,
    /// `p ← p − lr·(m/(1−β₁ᵗ)) / (√(v̂/(1−β₂ᵗ)) + ε)`.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer holds {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "amsgrad",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
            let m = self.m[k].as_mut_slice();
            let v = self.v[k].as_mut_slice();
            let vmax = self.v_max[k].as_mut_slice();
            for (i, (pi, &gi)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                vmax[i] = vmax[i].max(v[i]);
                let denom = (vmax[i] / bc2).sqrt() + self.eps;
                *pi -= lr * (m[i] / bc1) / denom;
            }
        }
        Ok(())
    }
}

/// Multiply the rate by `factor` once every `every` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub factor: f64,
    pub every: usize,
}

/// `lr₀ · Π factor^⌊epoch/every⌋`.
pub fn lr_schedule(epoch: usize, lr0: f64, decays: &[StepDecay]) -> f64 {
    decays
        .iter()
        .filter(|d| d.every > 0)
        .fold(lr0, |lr, d| lr * d.factor.powi((epoch / d.every) as i32))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub decay: Vec<StepDecay>,
    pub seed: u64,
    pub flip_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::detector()
    }
}

impl TrainConfig {
    /// Preset for detected 2D inputs (filter size 96).
    pub fn detector() -> Self {
        Self {
            alpha: 0.1,
            batch_size: 512,
            epochs: 30,
            lr0: 0.005,
            decay: vec![StepDecay {
                factor: 0.9,
                every: 4,
            }],
            seed: 42,
            flip_augment: true,
        }
    }

    /// Preset for ground-truth 2D inputs (filter size 64).
    pub fn ground_truth() -> Self {
        Self {
            batch_size: 128,
            lr0: 0.001,
            decay: vec![
                StepDecay {
                    factor: 0.95,
                    every: 1,
                },
                StepDecay {
                    factor: 0.5,
                    every: 5,
                },
            ],
            ..Self::detector()
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, self.lr0, &self.decay)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lr0 must be non-negative, got {}",
                self.lr0
            )));
        }
        Ok(())
    }
}

fn joint_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Per-joint distances after subtracting each pose's root joint.
pub fn root_aligned_errors(truth: &Tensor, pred: &Tensor, root: usize) -> Result<Vec<f64>> {
    if truth.shape() != pred.shape() || truth.cols() != 3 || root >= truth.rows() {
        return Err(Error::Shape {
            op: "mpjpe",
            lhs: truth.shape(),
            rhs: pred.shape(),
        });
    }
    let (tr, pr) = (truth.row(root), pred.row(root));
    Ok((0..truth.rows())
        .map(|i| {
            let a: Vec<f64> = truth.row(i).iter().zip(tr).map(|(x, r)| x - r).collect();
            let b: Vec<f64> = pred.row(i).iter().zip(pr).map(|(x, r)| x - r).collect();
            joint_dist(&a, &b)
        })
        .collect())
}

/// Mean per-joint position error after root alignment.
pub fn mpjpe(truth: &Tensor, pred: &Tensor, root: usize) -> Result<f64> {
    let e = root_aligned_errors(truth, pred, root)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Similarity alignment of `pred` onto `truth`.
#[derive(Clone, Debug)]
pub struct Alignment {
    pub aligned: Tensor,
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
    /// The prediction had no spread; only translation was fitted.
    pub degenerate: bool,
}

/// Least-squares similarity transform `s·R·p + t` (proper rotation) mapping
/// `pred` onto `truth`.
pub fn procrustes_align(truth: &Tensor, pred: &Tensor) -> Result<Alignment> {
    if truth.shape() != pred.shape() || truth.cols() != 3 || truth.rows() == 0 {
        return Err(Error::Shape {
            op: "pa_mpjpe",
            lhs: truth.shape(),
            rhs: pred.shape(),
        });
    }
    let n = truth.rows();
    let point = |m: &Tensor, i: usize| Vector3::new(m[(i, 0)], m[(i, 1)], m[(i, 2)]);
    let mu_t = (0..n).map(|i| point(truth, i)).sum::<Vector3<f64>>() / n as f64;
    let mu_p = (0..n).map(|i| point(pred, i)).sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    let mut spread = 0.0;
    for i in 0..n {
        let y = point(truth, i) - mu_t;
        let x = point(pred, i) - mu_p;
        cov += y * x.transpose();
        spread += x.norm_squared();
    }
    let scale_ref = (0..n)
        .map(|i| (point(truth, i) - mu_t).norm_squared())
        .sum::<f64>()
        .max(1.0);
    let (rotation, scale, degenerate) = if spread <= 1e-24 * scale_ref {
        (Matrix3::identity(), 1.0, true)
    } else {
        let svd = cov.svd(true, true);
        let u = svd
            .u
            .ok_or_else(|| Error::Numerical("procrustes SVD failed".into()))?;
        let v_t = svd
            .v_t
            .ok_or_else(|| Error::Numerical("procrustes SVD failed".into()))?;
        let d = if (u * v_t).determinant() < 0.0 {
            -1.0
        } else {
            1.0
        };
        let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
        let rotation = u * fix * v_t;
        let s = svd.singular_values;
        let scale = (s[0] + s[1] + d * s[2]) / spread;
        (rotation, scale, false)
    };
    let translation = mu_t - scale * rotation * mu_p;
    let mut aligned = Tensor::zeros(n, 3);
    for i in 0..n {
        let q = scale * rotation * point(pred, i) + translation;
        aligned.row_mut(i).copy_from_slice(q.as_slice());
    }
    Ok(Alignment {
        aligned,
        rotation,
        scale,
        translation,
        degenerate,
    })
}

/// Mean per-joint error after similarity (Procrustes) alignment.
pub fn pa_mpjpe(truth: &Tensor, pred: &Tensor) -> Result<f64> {
    let aligned = procrustes_align(truth, pred)?.aligned;
    let n = truth.rows();
    Ok((0..n)
        .map(|i| joint_dist(truth.row(i), aligned.row(i)))
        .sum::<f64>()
        / n as f64)
}

pub const PCK_THRESHOLD_MM: f64 = 150.0;

/// AUC thresholds `0, 5, …, 150` mm.
pub fn auc_thresholds() -> Vec<f64> {
    (0..=30).map(|k| 5.0 * k as f64).collect()
}

/// PCK (fraction of joint errors strictly below `threshold`) and AUC (mean
/// over [`auc_thresholds`] of the fraction of errors at or below each
/// threshold) from root-aligned per-joint errors.
pub fn pck_auc_from_errors(errors: &[f64], threshold: f64) -> Result<(f64, f64)> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument(
            "pck of an empty evaluation set".into(),
        ));
    }
    let count = errors.len() as f64;
    let pck = errors.iter().filter(|&&e| e < threshold).count() as f64 / count;
    let grid = auc_thresholds();
    let auc = grid
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / count)
        .sum::<f64>()
        / grid.len() as f64;
    Ok((pck, auc))
}

pub fn pck_auc(
    truths: &[Tensor],
    preds: &[Tensor],
    root: usize,
    threshold: f64,
) -> Result<(f64, f64)> {
    if truths.len() != preds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ground-truth poses but {} predictions",
            truths.len(),
            preds.len()
        )));
    }
    let mut errors = Vec::new();
    for (t, p) in truths.iter().zip(preds) {
        errors.extend(root_aligned_errors(t, p, root)?);
    }
    pck_auc_from_errors(&errors, threshold)
}

/// Aggregate evaluation metrics in millimeters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub pck_150: f64,
    pub auc: f64,
}

/// Per-sample metrics averaged over `samples`, given predictions in mm.
pub fn metrics(truths: &[Tensor], preds: &[Tensor], root: usize) -> Result<EvalMetrics> {
    let count = truths.len().max(1) as f64;
    let mut mp = 0.0;
    let mut pa = 0.0;
    for (t, p) in truths.iter().zip(preds) {
        mp += mpjpe(t, p, root)?;
        pa += pa_mpjpe(t, p)?;
    }
    let (pck_150, auc) = pck_auc(truths, preds, root, PCK_THRESHOLD_MM)?;
    Ok(EvalMetrics {
        mpjpe_mm: mp / count,
        pa_mpjpe_mm: pa / count,
        pck_150,
        auc,
    })
}

const EVAL_CHUNK: usize = 256;

/// Evaluation-mode predictions (mm), one `N × 3` tensor per sample.
pub fn predict_all(model: &RsNet, samples: &[PoseSample]) -> Result<Vec<Tensor>> {
    let n = model.num_joints();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&PoseSample> = chunk.iter().collect();
        let (x, _) = stack(&refs);
        let y = model.predict(&x)?;
        for b in 0..chunk.len() {
            out.push(Tensor::from_vec(
                n,
                3,
                y.as_slice()[b * n * 3..(b + 1) * n * 3].to_vec(),
            )?);
        }
    }
    Ok(out)
}

pub fn evaluate(model: &RsNet, samples: &[PoseSample]) -> Result<EvalMetrics> {
    let preds = predict_all(model, samples)?;
    let truths: Vec<Tensor> = samples.iter().map(PoseSample::target_tensor).collect();
    metrics(&truths, &preds, model.skeleton.root)
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub pck_150: f64,
    pub auc: f64,
}

/// Output of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub best_epoch: Option<usize>,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

impl TrainOutcome {
    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    pub fn best(&self) -> Option<&MetricsRecord> {
        self.best_epoch
            .and_then(|e| self.records.iter().find(|r| r.epoch == e))
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "best.json";
pub const LAST_GOOD_FILE: &str = "last_good.json";

/// Trains `model` in place. With `out_dir`, appends one [`MetricsRecord`]
/// per epoch to `metrics.jsonl` and keeps the best-PA-MPJPE checkpoint in
/// `best.json`. A non-finite loss aborts with [`Error::Numerical`]; the
/// model is reset to the last weights that gave a finite batch loss, which
/// are also written to `last_good.json`.
pub fn train(
    model: &mut RsNet,
    train_set: &[PoseSample],
    eval_set: &[PoseSample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::InvalidArgument(
            "training and evaluation sets must be nonempty".into(),
        ));
    }
    let n = model.num_joints();
    let root = model.skeleton.root;
    for s in train_set.iter().chain(eval_set) {
        if s.num_joints() != n {
            return Err(Error::InvalidArgument(format!(
                "sample {} has {} joints, model expects {n}",
                s.id,
                s.num_joints()
            )));
        }
        s.validate(root)?;
    }
    let scale = model.config.target_scale;
    let flip_pairs = model.skeleton.flip_pairs.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = AmsGrad::for_params(model.params.tensors());

    let (metrics_path, checkpoint_path) = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            (
                Some(dir.join(METRICS_FILE)),
                Some(dir.join(CHECKPOINT_FILE)),
            )
        }
        None => (None, None),
    };
    let mut log = match &metrics_path {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };

    let mut last_good: Option<Vec<Tensor>> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize)> = None;
    for epoch in 0..config.epochs {
        let lr = config.lr(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(config.batch_size) {
            let flipped: Vec<PoseSample>;
            let batch: Vec<&PoseSample> = if config.flip_augment {
                flipped = idx
                    .iter()
                    .map(|&i| {
                        if rng.random_bool(0.5) {
                            flip_pose(&train_set[i], &flip_pairs)
                        } else {
                            train_set[i].clone()
                        }
                    })
                    .collect();
                flipped.iter().collect()
            } else {
                idx.iter().map(|&i| &train_set[i]).collect()
            };
            let (x, y) = stack(&batch);
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let fwd = model.forward(&mut tape, &bound, &x, true, &mut rng)?;
            let target = tape.constant(y.scale(1.0 / scale));
            let l = pose_loss(&mut tape, target, fwd.output, config.alpha)?;
            let value = tape.value(l)[(0, 0)];
            if !value.is_finite() {
                if let Some(good) = last_good {
                    model.params.tensors_mut().clone_from_slice(&good);
                    if let Some(dir) = out_dir {
                        model.save(dir.join(LAST_GOOD_FILE))?;
                    }
                }
                return Err(Error::Numerical(format!(
                    "non-finite loss {value} at epoch {epoch}"
                )));
            }
            loss_sum += value * batch.len() as f64;
            tape.backward(l);
            let grads = bound.grads(&tape);
            match &mut last_good {
                Some(good) => good.clone_from_slice(model.params.tensors()),
                None => last_good = Some(model.params.tensors().to_vec()),
            }
            optimizer.update(model.params.tensors_mut(), &grads, lr)?;
        }
        let eval = evaluate(model, eval_set)?;
        let record = MetricsRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            mpjpe_mm: eval.mpjpe_mm,
            pa_mpjpe_mm: eval.pa_mpjpe_mm,
            pck_150: eval.pck_150,
            auc: eval.auc,
        };
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        if best.is_none_or(|(b, _)| record.pa_mpjpe_mm < b) {
            best = Some((record.pa_mpjpe_mm, epoch));
            if let Some(p) = &checkpoint_path {
                model.save(p)?;
            }
        }
        records.push(record);
    }
    Ok(TrainOutcome {
        records,
        best_epoch: best.map(|(_, e)| e),
        metrics_path,
        checkpoint_path,
    })
}

/// Root-relative mean and per-coordinate median poses of a training set,
/// the constant predictors a trained model should beat.
pub fn constant_pose_baselines(train_set: &[PoseSample]) -> Result<(Tensor, Tensor)> {
    let first = train_set
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;
    let n = first.num_joints();
    let mut mean = Tensor::zeros(n, 3);
    let mut median = Tensor::zeros(n, 3);
    for j in 0..n {
        for c in 0..3 {
            let mut vals: Vec<f64> = train_set.iter().map(|s| s.pose3d[j][c]).collect();
            mean[(j, c)] = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.sort_by(f64::total_cmp);
            let mid = vals.len() / 2;
            median[(j, c)] = if vals.len() % 2 == 0 {
                0.5 * (vals[mid - 1] + vals[mid])
            } else {
                vals[mid]
            };
        }
    }
    Ok((mean, median))
}

/// MPJPE of the better of the two constant baselines on `eval_set`.
pub fn best_constant_baseline(
    train_set: &[PoseSample],
    eval_set: &[PoseSample],
    root: usize,
) -> Result<f64> {
    let (mean, median) = constant_pose_baselines(train_set)?;
    let score = |pose: &Tensor| -> Result<f64> {
        let mut total = 0.0;
        for s in eval_set {
            total += mpjpe(&s.target_tensor(), pose, root)?;
        }
        Ok(total / eval_set.len().max(1) as f64)
    };
    Ok(score(&mean)?.min(score(&median)?))
}
