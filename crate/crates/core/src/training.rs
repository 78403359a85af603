//! Losses, scheduled-sampling rollouts and the AdamW training loop.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore, Tape, Var};
use crate::dataset::{Dataset, Sequence, Split};
use crate::error::{Error, Result};
use crate::network::{stack_global, stack_local, Batch, HistoryGrouping, MovinModel, TrainVars};
use crate::scaling::FeatureScaling;
use crate::seed;
use crate::skeleton::{PoseFeatures, Skeleton};
use crate::tensor::Tensor;

/// Epoch fractions bounding the teacher-forcing ramp: ground truth is always
/// fed before `hold`, never after `release`, linearly in between.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingRamp {
    pub hold: f64,
    pub release: f64,
}

impl Default for SamplingRamp {
    fn default() -> Self {
        Self { hold: 0.2, release: 0.8 }
    }
}

impl SamplingRamp {
    /// Probability of feeding ground truth at `epoch` of `epochs`.
    pub fn teacher_probability(&self, epoch: usize, epochs: usize) -> f64 {
        let frac = epoch as f64 / epochs.max(1) as f64;
        if frac < self.hold {
            1.0
        } else if frac >= self.release {
            0.0
        } else {
            1.0 - (frac - self.hold) / (self.release - self.hold)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub w_kl: f64,
    pub rollout_len: usize,
    pub scheduled_sampling: SamplingRamp,
    /// Rollout segments averaged per optimizer update.
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 120,
            w_kl: 1.0,
            rollout_len: 8,
            scheduled_sampling: SamplingRamp::default(),
            batch_size: 1,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(alloc::format!("train: {m}")));
        if self.rollout_len == 0 || self.batch_size == 0 {
            return bad("rollout length and batch size must be at least 1");
        }
        if !(self.w_kl >= 0.0) || !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("w_kl and weight decay must be non-negative, lr positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        let r = self.scheduled_sampling;
        if !(0.0 <= r.hold && r.hold <= r.release && r.release <= 1.0) {
            return bad("sampling ramp needs 0 <= hold <= release <= 1");
        }
        Ok(())
    }
}

/// Loss components, each summed over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub local: f64,
    pub fk: f64,
    pub global: f64,
    pub kl: f64,
}

impl LossTerms {
    pub fn reconstruction(&self) -> f64 {
        self.local + self.fk + self.global
    }

    pub fn total(&self, w_kl: f64) -> f64 {
        self.reconstruction() + w_kl * self.kl
    }

    fn add(&mut self, o: &LossTerms) {
        self.local += o.local;
        self.fk += o.fk;
        self.global += o.global;
        self.kl += o.kl;
    }

    fn scaled(&self, s: f64) -> Self {
        Self { local: self.local * s, fk: self.fk * s, global: self.global * s, kl: self.kl * s }
    }

    pub fn is_finite(&self) -> bool {
        self.local.is_finite() && self.fk.is_finite() && self.global.is_finite() && self.kl.is_finite()
    }
}

/// Tape handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub local: Var,
    pub fk: Var,
    pub global: Var,
    pub kl: Var,
    pub reconstruction: Var,
    pub total: Var,
}

impl LossVars {
    pub fn terms(&self, tape: &Tape<'_>) -> LossTerms {
        LossTerms {
            local: tape.value(self.local).scalar_value(),
            fk: tape.value(self.fk).scalar_value(),
            global: tape.value(self.global).scalar_value(),
            kl: tape.value(self.kl).scalar_value(),
        }
    }
}

/// Root-relative joint positions of stacked local features.
fn fk_positions(tape: &mut Tape<'_>, local: Var, parents: &Arc<[isize]>) -> Var {
    let offsets = tape.slice_cols(local, 0, 3);
    let rot6 = tape.slice_cols(local, 3, 6);
    let rot = tape.rot6d_to_matrix(rot6);
    tape.forward_kinematics(rot, offsets, parents.clone())
}

/// Reconstruction terms of predicted against target features.
pub fn reconstruction_tape(
    tape: &mut Tape<'_>,
    pred_local: Var,
    pred_global: Var,
    target_local: Var,
    target_global: Var,
    parents: &Arc<[isize]>,
) -> (Var, Var, Var) {
    let local = tape.l1(pred_local, target_local);
    let fk_pred = fk_positions(tape, pred_local, parents);
    let fk_target = fk_positions(tape, target_local, parents);
    let fk = tape.l1(fk_pred, fk_target);
    let global = tape.l1(pred_global, target_global);
    (local, fk, global)
}

/// `L_rec + w_kl * L_kl` for one forward pass.
pub fn loss_tape(tape: &mut Tape<'_>, out: &TrainVars, batch: &Batch, parents: &Arc<[isize]>, w_kl: f64) -> LossVars {
    let tl = tape.constant(batch.cur_local.clone());
    let tg = tape.constant(batch.cur_global.clone());
    let (local, fk, global) = reconstruction_tape(tape, out.local, out.global, tl, tg, parents);
    let kl = tape.kl_divergence(out.mu, out.log_sigma);
    let rl = tape.add(local, fk);
    let reconstruction = tape.add(rl, global);
    let weighted = tape.scale(kl, w_kl);
    let total = tape.add(reconstruction, weighted);
    LossVars { local, fk, global, kl, reconstruction, total }
}

fn parents_of(skeleton: &Skeleton) -> Arc<[isize]> {
    skeleton.parent_indices().into()
}

/// Reconstruction loss between two poses: local L1, root-relative FK L1 and
/// global L1, in that order.
pub fn reconstruction_loss(pred: &PoseFeatures, target: &PoseFeatures, skeleton: &Skeleton) -> Result<LossTerms> {
    for p in [pred, target] {
        if p.local.len() != skeleton.len() {
            return Err(Error::Dimension { what: "local pose joints", expected: skeleton.len(), got: p.local.len() });
        }
    }
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let parents = parents_of(skeleton);
    let pl = tape.constant(stack_local(&[&pred.local]));
    let pg = tape.constant(stack_global(&[&pred.global]));
    let tl = tape.constant(stack_local(&[&target.local]));
    let tg = tape.constant(stack_global(&[&target.global]));
    let (l, f, g) = reconstruction_tape(&mut tape, pl, pg, tl, tg, &parents);
    Ok(LossTerms { local: tape.value(l).scalar_value(), fk: tape.value(f).scalar_value(), global: tape.value(g).scalar_value(), kl: 0.0 })
}

/// KL divergence of `N(mu, exp(log_sigma)^2)` from `N(0, I)`.
pub fn kl_loss(mu: &[f64], log_sigma: &[f64]) -> Result<f64> {
    if mu.len() != log_sigma.len() {
        return Err(Error::Dimension { what: "log_sigma", expected: mu.len(), got: log_sigma.len() });
    }
    Ok(mu.iter().zip(log_sigma).map(|(m, l)| 0.5 * (m * m + (2.0 * l).exp() - 1.0 - 2.0 * l)).sum())
}

/// Supplies grouped clouds and ground-truth poses of one sequence.
pub trait FrameSource {
    fn frame_count(&self) -> usize;
    fn pose(&self, t: usize) -> Result<PoseFeatures>;
    fn grouping(&self, model: &MovinModel, t: usize) -> Result<Arc<HistoryGrouping>>;
}

/// A stored sequence seen through a model's point count.
pub struct SequenceSource<'a> {
    pub sequence: &'a Sequence,
    pub n_joints: usize,
    pub points: usize,
}

impl FrameSource for SequenceSource<'_> {
    fn frame_count(&self) -> usize {
        self.sequence.len()
    }

    fn pose(&self, t: usize) -> Result<PoseFeatures> {
        self.sequence.pose(t, self.n_joints)
    }

    fn grouping(&self, model: &MovinModel, t: usize) -> Result<Arc<HistoryGrouping>> {
        Ok(Arc::new(model.group_history(&self.sequence.history(t, self.points)?)?))
    }
}

/// Result of one rollout: averaged loss, gradients and the per-step predictions.
pub struct Rollout {
    pub terms: LossTerms,
    pub total: f64,
    pub gradients: Gradients,
    pub predictions: Vec<PoseFeatures>,
    /// Which steps were conditioned on ground truth.
    pub teacher_forced: Vec<bool>,
}

/// Runs `rollout_len` steps over frames `start..=start + rollout_len`.
///
/// Step `k` predicts frame `start + k`. Its condition is the ground truth of
/// the previous frame with probability `teacher_p`; otherwise the model's own
/// previous prediction is fed as a constant, so no gradient crosses steps.
/// The first step always sees ground truth.
#[allow(clippy::too_many_arguments)]
pub fn rollout_step(
    model: &MovinModel,
    source: &dyn FrameSource,
    start: usize,
    rollout_len: usize,
    teacher_p: f64,
    w_kl: f64,
    rng: &mut seed::Rng,
) -> Result<Rollout> {
    let needed = rollout_len + 1;
    if start + needed > source.frame_count() {
        return Err(Error::SegmentTooShort { needed, got: source.frame_count().saturating_sub(start) });
    }
    let c = model.config().channels;
    let parents = parents_of(model.skeleton());
    let poses = (start..start + needed).map(|t| source.pose(t)).collect::<Result<Vec<_>>>()?;
    let groups = (1..needed).map(|k| source.grouping(model, start + k)).collect::<Result<Vec<_>>>()?;

    // one coin and one noise draw per step, in step order
    let mut teacher = Vec::with_capacity(rollout_len);
    let mut noise = Vec::with_capacity(rollout_len);
    for k in 0..rollout_len {
        let gt = if k == 0 || teacher_p >= 1.0 {
            true
        } else if teacher_p <= 0.0 {
            false
        } else {
            rng.random::<f64>() < teacher_p
        };
        teacher.push(gt);
        noise.push((0..c).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>());
    }

    let mut tape = Tape::new(model.params());
    let mut total: Option<Var> = None;
    let mut terms = LossTerms::default();
    let mut predictions = Vec::with_capacity(rollout_len);
    let scale = 1.0 / rollout_len as f64;

    if teacher.iter().all(|&t| t) {
        let batch = Batch {
            groups: groups.clone(),
            prev_local: stack_local(&poses[..rollout_len].iter().map(|p| &p.local).collect::<Vec<_>>()),
            prev_global: stack_global(&poses[..rollout_len].iter().map(|p| &p.global).collect::<Vec<_>>()),
            cur_local: stack_local(&poses[1..].iter().map(|p| &p.local).collect::<Vec<_>>()),
            cur_global: stack_global(&poses[1..].iter().map(|p| &p.global).collect::<Vec<_>>()),
        };
        let eps = Tensor::from_vec(rollout_len, c, noise.concat());
        let out = model.forward_train_tape(&mut tape, &batch, &eps);
        let loss = loss_tape(&mut tape, &out, &batch, &parents, w_kl);
        terms = loss.terms(&tape);
        total = Some(loss.total);
        for s in 0..rollout_len {
            predictions.push(model.unstack(tape.value(out.local), tape.value(out.global), s)?);
        }
    } else {
        let group_refs: Vec<&HistoryGrouping> = groups.iter().map(|g| g.as_ref()).collect();
        let points = model.embed_pointcloud_tape(&mut tape, &group_refs);
        let p = model.config().clouds();
        for k in 0..rollout_len {
            let prev = if teacher[k] { poses[k].clone() } else { predictions[k - 1].clone() };
            let batch = Batch {
                groups: vec![groups[k].clone()],
                prev_local: stack_local(&[&prev.local]),
                prev_global: stack_global(&[&prev.global]),
                cur_local: stack_local(&[&poses[k + 1].local]),
                cur_global: stack_global(&[&poses[k + 1].global]),
            };
            let rows = tape.gather_rows(points, (k * p..(k + 1) * p).collect());
            let eps = Tensor::row_vector(noise[k].clone());
            let out = model.forward_train_with_points(&mut tape, rows, &batch, &eps);
            let loss = loss_tape(&mut tape, &out, &batch, &parents, w_kl);
            terms.add(&loss.terms(&tape));
            total = Some(match total {
                None => loss.total,
                Some(t) => tape.add(t, loss.total),
            });
            predictions.push(model.unstack(tape.value(out.local), tape.value(out.global), 0)?);
        }
    }
    let total = total.expect("rollout_len >= 1");
    let mean = tape.scale(total, scale);
    let value = tape.value(mean).scalar_value();
    let gradients = tape.backward(mean).params;
    Ok(Rollout { terms: terms.scaled(scale), total: value, gradients, predictions, teacher_forced: teacher })
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads.iter()).zip(&mut self.first).zip(&mut self.second) {
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * self.weight_decay * *w;
                *w -= self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Mean per-step losses of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "L_rec_local")]
    pub rec_local: f64,
    #[serde(rename = "L_rec_fk")]
    pub rec_fk: f64,
    #[serde(rename = "L_rec_global")]
    pub rec_global: f64,
    #[serde(rename = "L_kl")]
    pub kl: f64,
    /// Seconds since training started; filled by the caller's clock.
    pub wallclock: f64,
}

impl EpochLog {
    pub fn reconstruction(&self) -> f64 {
        self.rec_local + self.rec_fk + self.rec_global
    }

    /// Same record ignoring the wallclock.
    pub fn same_losses(&self, other: &EpochLog) -> bool {
        self.epoch == other.epoch
            && self.rec_local.to_bits() == other.rec_local.to_bits()
            && self.rec_fk.to_bits() == other.rec_fk.to_bits()
            && self.rec_global.to_bits() == other.rec_global.to_bits()
            && self.kl.to_bits() == other.kl.to_bits()
    }
}

/// A rollout window: sequence index and first frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub sequence: usize,
    pub start: usize,
}

/// Non-overlapping windows of one epoch, in shuffled order. Consecutive
/// windows of a sequence share their boundary frame, so every frame after the
/// seeded phase offset is predicted once.
pub fn epoch_segments(dataset: &Dataset, rollout_len: usize, seed: u64, epoch: usize) -> Vec<Segment> {
    let mut rng = seed::rng(seed, &[0x5e9, epoch as u64]);
    let mut out = Vec::new();
    for (i, s) in dataset.sequences.iter().enumerate() {
        if s.info.split != Split::Train || s.len() < rollout_len + 1 {
            continue;
        }
        let phase = rng.random_range(0..rollout_len);
        let phase = if phase + rollout_len < s.len() { phase } else { 0 };
        let mut start = phase;
        while start + rollout_len < s.len() {
            out.push(Segment { sequence: i, start });
            start += rollout_len;
        }
    }
    out.shuffle(&mut rng);
    out
}

/// Trains `model` in place, first fitting its feature statistics to the
/// training split unless it already carries some. `clock` returns seconds for the log and
/// `on_epoch` runs after every epoch (checkpointing, logging); its error
/// aborts training.
pub fn train(
    model: &mut MovinModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    clock: &mut dyn FnMut() -> f64,
    on_epoch: &mut dyn FnMut(&EpochLog, &MovinModel) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if model.skeleton().len() != dataset.skeleton.len() {
        return Err(Error::Dimension { what: "dataset joints", expected: model.skeleton().len(), got: dataset.skeleton.len() });
    }
    if dataset.split(Split::Train).all(|s| s.len() < cfg.rollout_len + 1) {
        return Err(Error::EmptyTrainSplit);
    }
    if model.scaling().is_identity() {
        model.set_scaling(FeatureScaling::fit(dataset)?)?;
    }
    let mut optimizer = AdamW::new(model.params(), cfg);
    let started = clock();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let teacher_p = cfg.scheduled_sampling.teacher_probability(epoch, cfg.epochs);
        let segments = epoch_segments(dataset, cfg.rollout_len, cfg.seed, epoch);
        let mut rng = seed::rng(cfg.seed, &[0x7a1, epoch as u64]);
        let mut sum = LossTerms::default();
        let mut pending: Option<Gradients> = None;
        let mut in_batch = 0;
        for (b, seg) in segments.iter().enumerate() {
            let sequence = &dataset.sequences[seg.sequence];
            let source = SequenceSource { sequence, n_joints: model.config().n_joints, points: model.config().points };
            let r = rollout_step(model, &source, seg.start, cfg.rollout_len, teacher_p, cfg.w_kl, &mut rng)?;
            if !r.total.is_finite() || !r.terms.is_finite() || !r.gradients.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b / cfg.batch_size,
                    sequence: String::from(sequence.info.id.as_str()),
                    frame: seg.start,
                });
            }
            sum.add(&r.terms);
            match pending.as_mut() {
                None => pending = Some(r.gradients),
                Some(g) => g.accumulate(&r.gradients),
            }
            in_batch += 1;
            if in_batch == cfg.batch_size || b + 1 == segments.len() {
                let mut g = pending.take().expect("accumulated");
                g.scale(1.0 / in_batch as f64);
                optimizer.update(model.params_mut(), &g);
                in_batch = 0;
                if !model.params().all_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b / cfg.batch_size,
                        sequence: String::from(sequence.info.id.as_str()),
                        frame: seg.start,
                    });
                }
            }
        }
        let mean = sum.scaled(1.0 / segments.len().max(1) as f64);
        let log =
            EpochLog { epoch, rec_local: mean.local, rec_fk: mean.fk, rec_global: mean.global, kl: mean.kl, wallclock: clock() - started };
        on_epoch(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Analytic against central-difference gradient of one parameter scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientProbe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradientProbe {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Random but valid model inputs: clouds in a 2 m box in front of the sensor
/// and poses with random rotations around the skeleton's offsets.
pub fn probe_batch(model: &MovinModel, size: usize, seed: u64) -> Result<Batch> {
    use crate::lidar::{PointCloudHistory, HISTORY_OFFSETS};
    use crate::rotation::{axis_angle, rot6d_from_matrix};
    use crate::skeleton::{GlobalPoseFeature, JointFeature, LocalPoseFeature};
    use nalgebra::Vector3;

    let mut rng = seed::rng(seed, &[0x9b0be]);
    let unit = |rng: &mut seed::Rng| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let pose = |rng: &mut seed::Rng| -> Result<PoseFeatures> {
        let joints = model
            .skeleton()
            .joints()
            .iter()
            .map(|j| {
                let axis = unit(rng);
                let angle = rng.random_range(0.0..1.5);
                Ok(JointFeature {
                    pos: j.offset() + unit(rng) * 0.01,
                    rot: rot6d_from_matrix(&axis_angle(axis, angle))?,
                    linvel: unit(rng) * 0.1,
                    angvel: unit(rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let axis = unit(rng);
        let angle = rng.random_range(0.0..3.0);
        Ok(PoseFeatures {
            global: GlobalPoseFeature {
                root_pos: Vector3::new(0.0, 0.9, 3.0) + unit(rng) * 0.5,
                root_rot: rot6d_from_matrix(&axis_angle(axis, angle))?,
                root_linvel: unit(rng),
                root_angvel: unit(rng),
                contacts: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
            },
            local: LocalPoseFeature { joints },
        })
    };
    let cfg = model.config();
    let mut groups = Vec::with_capacity(size);
    let mut prev = Vec::with_capacity(size);
    let mut cur = Vec::with_capacity(size);
    for _ in 0..size {
        let clouds = (0..HISTORY_OFFSETS.len())
            .map(|_| {
                (0..cfg.points)
                    .map(|_| [rng.random_range(-0.5f32..0.5), rng.random_range(0.0f32..1.8), rng.random_range(2.5f32..3.5)])
                    .collect()
            })
            .collect();
        groups.push(Arc::new(model.group_history(&PointCloudHistory::from_clouds(clouds)?)?));
        prev.push(pose(&mut rng)?);
        cur.push(pose(&mut rng)?);
    }
    Ok(Batch {
        groups,
        prev_local: stack_local(&prev.iter().map(|p| &p.local).collect::<Vec<_>>()),
        prev_global: stack_global(&prev.iter().map(|p| &p.global).collect::<Vec<_>>()),
        cur_local: stack_local(&cur.iter().map(|p| &p.local).collect::<Vec<_>>()),
        cur_global: stack_global(&cur.iter().map(|p| &p.global).collect::<Vec<_>>()),
    })
}

/// Total training loss of `batch` under fixed noise `eps`.
pub fn batch_loss(model: &MovinModel, batch: &Batch, eps: &Tensor, w_kl: f64) -> (f64, Gradients) {
    let parents = parents_of(model.skeleton());
    let mut tape = Tape::new(model.params());
    let out = model.forward_train_tape(&mut tape, batch, eps);
    let loss = loss_tape(&mut tape, &out, batch, &parents, w_kl);
    (tape.value(loss.total).scalar_value(), tape.backward(loss.total).params)
}

/// Compares analytic gradients of the total loss with central differences
/// (step `h`) on `probes` parameter scalars drawn uniformly at random.
pub fn check_gradients(model: &mut MovinModel, batch: &Batch, w_kl: f64, probes: usize, h: f64, seed: u64) -> Vec<GradientProbe> {
    let c = model.config().channels;
    let mut rng = seed::rng(seed, &[0x6c]);
    let eps = Tensor::from_vec(batch.len(), c, (0..batch.len() * c).map(|_| StandardNormal.sample(&mut rng)).collect());
    let (_, grads) = batch_loss(model, batch, &eps, w_kl);
    let sizes: Vec<usize> = model.params().iter().map(|p| p.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut out = Vec::with_capacity(probes);
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let id = crate::autodiff::ParamId(which);
        let analytic = grads.get(id).data()[flat];
        let original = model.params().get(id).data()[flat];
        model.params_mut().get_mut(id).data_mut()[flat] = original + h;
        let (up, _) = batch_loss(model, batch, &eps, w_kl);
        model.params_mut().get_mut(id).data_mut()[flat] = original - h;
        let (down, _) = batch_loss(model, batch, &eps, w_kl);
        model.params_mut().get_mut(id).data_mut()[flat] = original;
        let name = model.params().iter().nth(which).map(|p| p.name.clone()).unwrap_or_default();
        out.push(GradientProbe { param: name, index: flat, analytic, numeric: (up - down) / (2.0 * h) });
    }
    out
}
