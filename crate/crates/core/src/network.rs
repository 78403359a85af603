//! The conditional VAE: point-cloud, local-pose and global-pose embeddings, a
//! transformer posterior encoder, a gated mixture-of-experts decoder and the
//! expanding heads that map the decoder output back to pose features.
//!
//! Every module works on batches: `B` samples stacked row-wise, with per-joint
//! and per-cloud blocks kept sample-major.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::lidar::{PointCloudHistory, HISTORY_OFFSETS, POINTS_PER_FRAME};
use crate::scaling::FeatureScaling;
use crate::seed;
use crate::skeleton::{GlobalPoseFeature, LocalPoseFeature, PoseFeatures, Skeleton, CONTACT_START, GLOBAL_WIDTH, JOINT_WIDTH};
use crate::tensor::Tensor;

/// Range `log_sigma` is clamped to.
pub const LOG_SIGMA_MIN: f64 = -10.0;
pub const LOG_SIGMA_MAX: f64 = 4.0;
const GATING_LAYERS: usize = 3;
const EXPERT_LAYERS: usize = 3;

/// One set-abstraction stage. `centroids = None` groups the whole cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetAbstraction {
    pub centroids: Option<usize>,
    pub radius: f64,
    pub group: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    /// Hidden width of the embedding, expanding, transformer and expert MLPs.
    pub mlp_hidden: usize,
    pub n_experts: usize,
    pub gating_hidden: usize,
    pub n_joints: usize,
    /// Per-joint width inside the graph convolutions.
    pub joint_hidden: usize,
    /// Points per resampled cloud.
    pub points: usize,
    /// Feed the four older clouds; otherwise only the current one.
    pub past_clouds: bool,
    /// Condition on the previous pose.
    pub autoregressive: bool,
    pub set_abstraction: Vec<SetAbstraction>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            transformer_layers: 2,
            transformer_heads: 4,
            mlp_hidden: 256,
            n_experts: 8,
            gating_hidden: 256,
            n_joints: 21,
            joint_hidden: 32,
            points: POINTS_PER_FRAME,
            past_clouds: true,
            autoregressive: true,
            set_abstraction: vec![
                SetAbstraction { centroids: Some(64), radius: 0.2, group: 16 },
                SetAbstraction { centroids: Some(16), radius: 0.6, group: 16 },
                SetAbstraction { centroids: None, radius: f64::INFINITY, group: 0 },
            ],
        }
    }
}

impl ModelConfig {
    /// Smaller model for quick experiments on a desk machine.
    pub fn desk() -> Self {
        Self { channels: 32, mlp_hidden: 128, gating_hidden: 128, joint_hidden: 16, ..Self::default() }
    }

    /// Smallest configuration exercising every module, for numerical checks.
    pub fn reduced(n_joints: usize) -> Self {
        Self {
            channels: 8,
            transformer_layers: 2,
            transformer_heads: 2,
            mlp_hidden: 16,
            n_experts: 4,
            gating_hidden: 16,
            n_joints,
            joint_hidden: 4,
            points: 16,
            past_clouds: true,
            autoregressive: true,
            set_abstraction: vec![SetAbstraction { centroids: None, radius: f64::INFINITY, group: 0 }],
        }
    }

    /// Cloud rows fed per sample.
    pub fn clouds(&self) -> usize {
        if self.past_clouds {
            HISTORY_OFFSETS.len()
        } else {
            1
        }
    }

    /// Rows of the posterior encoder's input sequence.
    pub fn sequence_len(&self) -> usize {
        2 + self.clouds() + if self.autoregressive { 4 } else { 2 }
    }

    /// Width of the decoder and gating input.
    pub fn decoder_input(&self) -> usize {
        self.channels * (1 + self.clouds() + if self.autoregressive { 2 } else { 0 })
    }

    /// Hidden widths of stage `i`; the last stage always ends at `channels`.
    pub fn stage_widths(&self, i: usize) -> [usize; 2] {
        let c = self.channels;
        let n = self.set_abstraction.len();
        if i + 1 == n {
            [2 * c, c]
        } else if i == 0 {
            [c / 2, c / 2]
        } else {
            [c, c]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("model: {m}")));
        if self.channels < 2 || self.channels % 2 != 0 {
            return bad("channels must be even and at least 2");
        }
        if self.transformer_heads == 0 || self.channels % self.transformer_heads != 0 {
            return bad("channels must divide evenly into heads");
        }
        if self.mlp_hidden == 0 || self.gating_hidden == 0 || self.joint_hidden == 0 || self.n_experts == 0 {
            return bad("hidden widths and expert count must be positive");
        }
        if self.n_joints == 0 || self.points == 0 {
            return bad("joint and point counts must be positive");
        }
        let Some(last) = self.set_abstraction.last() else {
            return bad("at least one set-abstraction stage is required");
        };
        if last.centroids.is_some() {
            return bad("the last set-abstraction stage must group the whole cloud");
        }
        for s in &self.set_abstraction[..self.set_abstraction.len() - 1] {
            match s.centroids {
                Some(m) if m > 0 && s.group > 0 && s.radius > 0.0 => {}
                _ => return bad("intermediate stages need centroids, a group size and a radius"),
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    q: Dense,
    k: Dense,
    v: Dense,
    out: Dense,
    norm1: (ParamId, ParamId),
    ff1: Dense,
    ff2: Dense,
    norm2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Layout {
    stages: Vec<Vec<Dense>>,
    local_conv: Dense,
    local_proj: Dense,
    global: [Dense; 2],
    mu_token: ParamId,
    sigma_token: ParamId,
    positions: ParamId,
    encoder: Vec<EncoderLayer>,
    mu_head: Dense,
    sigma_head: Dense,
    gating: Vec<Dense>,
    experts: Vec<Dense>,
    expand_in: Dense,
    expand_joint: Dense,
    expand_conv: Dense,
    expand_out: Dense,
    expand_global: [Dense; 2],
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: seed::Rng,
}

impl Init<'_> {
    /// Uniform in `+-sqrt(scale / fan_in)`.
    fn uniform(&mut self, name: String, rows: usize, cols: usize, fan_in: usize, scale: f64) -> ParamId {
        let bound = (scale / fan_in as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store.add(name, Tensor::from_vec(rows, cols, data))
    }

    fn filled(&mut self, name: String, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.add(name, Tensor::from_vec(rows, cols, vec![value; rows * cols]))
    }

    /// Unit-variance-preserving weights; ReLU layers get twice the variance.
    fn layer(&mut self, name: &str, rows: usize, input: usize, output: usize, relu: bool) -> Dense {
        let gain = if relu { 6.0 } else { 3.0 };
        Dense {
            w: self.uniform(format!("{name}.weight"), rows * input, output, input, gain),
            b: self.uniform(format!("{name}.bias"), rows, output, input, 1.0),
        }
    }

    fn dense(&mut self, name: &str, input: usize, output: usize) -> Dense {
        self.layer(name, 1, input, output, false)
    }

    fn dense_relu(&mut self, name: &str, input: usize, output: usize) -> Dense {
        self.layer(name, 1, input, output, true)
    }

    /// `copies` independent maps stacked for gated or per-joint use.
    fn stacked(&mut self, name: &str, copies: usize, input: usize, output: usize, relu: bool) -> Dense {
        self.layer(name, copies, input, output, relu)
    }

    fn norm(&mut self, name: &str, width: usize) -> (ParamId, ParamId) {
        (self.filled(format!("{name}.gamma"), 1, width, 1.0), self.filled(format!("{name}.beta"), 1, width, 0.0))
    }
}

/// Grouping of one cloud through every set-abstraction stage. Depends only on
/// the point coordinates, so it is computed once per cloud outside the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudGrouping {
    stages: Vec<StageGrouping>,
}

#[derive(Clone, Debug, PartialEq)]
struct StageGrouping {
    /// Flattened `centroids x group` indices into the previous level.
    neighbors: Vec<usize>,
    /// Network coordinates of every grouped row.
    coords: Tensor,
    group: usize,
    centroids: usize,
}

/// Groupings of the clouds one sample feeds.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryGrouping {
    clouds: Vec<CloudGrouping>,
}

/// Index of the point farthest from the cloud mean, then iteratively the
/// point farthest from those chosen. Ties go to the lowest index.
pub fn farthest_point_sample(points: &[[f64; 3]], count: usize) -> Vec<usize> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let d2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum::<f64>();
    let mut mean = [0.0; 3];
    for p in points {
        for k in 0..3 {
            mean[k] += p[k] / n as f64;
        }
    }
    let argmax = |v: &[f64]| {
        let mut best = 0;
        for (i, x) in v.iter().enumerate() {
            if *x > v[best] {
                best = i;
            }
        }
        best
    };
    let from_mean: Vec<f64> = points.iter().map(|p| d2(p, &mean)).collect();
    let mut chosen = vec![argmax(&from_mean)];
    let mut nearest: Vec<f64> = points.iter().map(|p| d2(p, &points[chosen[0]])).collect();
    while chosen.len() < count {
        let next = argmax(&nearest);
        chosen.push(next);
        for (m, p) in nearest.iter_mut().zip(points) {
            *m = m.min(d2(p, &points[next]));
        }
    }
    chosen
}

/// Up to `group` nearest points within `radius` of `center`, nearest first,
/// padded by repeating the nearest one.
pub fn ball_query(points: &[[f64; 3]], center: &[f64; 3], radius: f64, group: usize) -> Vec<usize> {
    let mut near: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((0..3).map(|k| (p[k] - center[k]) * (p[k] - center[k])).sum::<f64>(), i))
        .filter(|(d, _)| *d <= radius * radius)
        .collect();
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if near.len() > group && group > 0 {
        near.select_nth_unstable_by(group - 1, order);
    }
    near.truncate(group);
    near.sort_unstable_by(order);
    let first = near.first().map_or(0, |x| x.1);
    let mut out: Vec<usize> = near.into_iter().map(|x| x.1).collect();
    out.resize(group, first);
    out
}

impl CloudGrouping {
    pub fn new(config: &ModelConfig, scaling: &FeatureScaling, cloud: &[[f32; 3]]) -> Self {
        let mut level: Vec<[f64; 3]> = cloud.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect();
        let mut stages = Vec::with_capacity(config.set_abstraction.len());
        for sa in &config.set_abstraction {
            match sa.centroids {
                Some(m) => {
                    let centers = farthest_point_sample(&level, m);
                    let mut neighbors = Vec::with_capacity(m * sa.group);
                    let mut coords = Tensor::zeros(m * sa.group, 3);
                    for (ci, &c) in centers.iter().enumerate() {
                        let center = level[c];
                        for (k, idx) in ball_query(&level, &center, sa.radius, sa.group).into_iter().enumerate() {
                            neighbors.push(idx);
                            let row = coords.row_mut(ci * sa.group + k);
                            for d in 0..3 {
                                row[d] = (level[idx][d] - center[d]) / sa.radius;
                            }
                        }
                    }
                    level = centers.iter().map(|&c| level[c]).collect();
                    stages.push(StageGrouping { neighbors, coords, group: sa.group, centroids: m });
                }
                None => {
                    let n = level.len();
                    let coords = Tensor::from_vec(n, 3, level.iter().flat_map(|p| scaling.normalize_point(p)).collect());
                    stages.push(StageGrouping { neighbors: (0..n).collect(), coords, group: n, centroids: 1 });
                }
            }
        }
        Self { stages }
    }
}

/// Latent draw with its noise.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
}

/// `z = mu + exp(log_sigma) * eps` with `eps ~ N(0, I)`; `log_sigma` is clamped.
pub fn sample_latent(mu: &[f64], log_sigma: &[f64], rng: &mut seed::Rng) -> LatentSample {
    let eps: Vec<f64> = (0..mu.len()).map(|_| StandardNormal.sample(rng)).collect();
    let log_sigma: Vec<f64> = log_sigma.iter().map(|l| l.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)).collect();
    let z = mu.iter().zip(&log_sigma).zip(&eps).map(|((m, l), e)| m + l.exp() * e).collect();
    LatentSample { mu: mu.to_vec(), log_sigma, z, eps }
}

/// Constant inputs of a batch of `B` samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub groups: Vec<Arc<HistoryGrouping>>,
    /// `B*J x 15`
    pub prev_local: Tensor,
    /// `B x 17`
    pub prev_global: Tensor,
    pub cur_local: Tensor,
    pub cur_global: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Stacks local features into `B*J x 15`.
pub fn stack_local(poses: &[&LocalPoseFeature]) -> Tensor {
    let j = poses.first().map_or(0, |p| p.len());
    Tensor::from_vec(poses.len() * j, JOINT_WIDTH, poses.iter().flat_map(|p| p.to_vec()).collect())
}

/// Stacks global features into `B x 17`.
pub fn stack_global(poses: &[&GlobalPoseFeature]) -> Tensor {
    Tensor::from_vec(poses.len(), GLOBAL_WIDTH, poses.iter().flat_map(|p| p.to_array()).collect())
}

/// Tape handles of a training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TrainVars {
    pub local: Var,
    pub global: Var,
    pub mu: Var,
    pub log_sigma: Var,
}

/// Decoded prediction of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutput {
    pub pose: PoseFeatures,
    pub latent: LatentSample,
}

#[derive(Clone, Debug)]
pub struct MovinModel {
    config: ModelConfig,
    skeleton: Skeleton,
    params: ParamStore,
    layout: Layout,
    graph: Arc<Tensor>,
    pool: Arc<Tensor>,
    unpool: Arc<Tensor>,
    parts: usize,
    scaling: FeatureScaling,
}

impl MovinModel {
    pub fn new(config: ModelConfig, skeleton: Skeleton, seed: u64) -> Result<Self> {
        config.validate()?;
        skeleton.validate()?;
        if skeleton.len() != config.n_joints {
            return Err(Error::Dimension { what: "skeleton joints", expected: config.n_joints, got: skeleton.len() });
        }
        let mut params = ParamStore::new();
        let parts = skeleton.part_count();
        let layout = Self::allocate(&config, parts, &mut Init { store: &mut params, rng: seed::rng(seed, &[0x1417]) });
        let (graph, pool, unpool) = graph_matrices(&skeleton);
        let scaling = FeatureScaling::identity(config.n_joints);
        Ok(Self { config, skeleton, params, layout, graph, pool, unpool, parts, scaling })
    }

    fn allocate(cfg: &ModelConfig, parts: usize, init: &mut Init<'_>) -> Layout {
        let c = cfg.channels;
        let h = cfg.mlp_hidden;
        let jh = cfg.joint_hidden;
        let mut stages = Vec::new();
        let mut feat = 0;
        for i in 0..cfg.set_abstraction.len() {
            let [w0, w1] = cfg.stage_widths(i);
            stages.push(vec![
                init.dense_relu(&format!("points.stage{i}.0"), 3 + feat, w0),
                init.dense_relu(&format!("points.stage{i}.1"), w0, w1),
            ]);
            feat = w1;
        }
        let local_conv = init.dense_relu("local.conv", JOINT_WIDTH, jh);
        let local_proj = init.dense("local.proj", parts * jh, c);
        let global = [init.dense_relu("global.0", GLOBAL_WIDTH, h), init.dense("global.1", h, c)];
        let mu_token = init.filled("posterior.mu_token".into(), 1, c, 0.0);
        let sigma_token = init.filled("posterior.sigma_token".into(), 1, c, 0.0);
        let positions = init.uniform("posterior.positions".into(), cfg.sequence_len(), c, c, 1.0);
        let encoder = (0..cfg.transformer_layers)
            .map(|l| {
                let n = |s: &str| format!("posterior.layer{l}.{s}");
                EncoderLayer {
                    q: init.dense(&n("query"), c, c),
                    k: init.dense(&n("key"), c, c),
                    v: init.dense(&n("value"), c, c),
                    out: init.dense(&n("out"), c, c),
                    norm1: init.norm(&n("norm1"), c),
                    ff1: init.dense_relu(&n("ff1"), c, h),
                    ff2: init.dense(&n("ff2"), h, c),
                    norm2: init.norm(&n("norm2"), c),
                }
            })
            .collect();
        let mu_head = init.dense("posterior.mu_head", c, c);
        let sigma_head = init.dense("posterior.sigma_head", c, c);
        let d = cfg.decoder_input();
        let g = cfg.gating_hidden;
        let gating = (0..GATING_LAYERS)
            .map(|l| {
                let input = if l == 0 { d } else { g };
                let output = if l + 1 == GATING_LAYERS { cfg.n_experts } else { g };
                let name = format!("gating.{l}");
                if l + 1 == GATING_LAYERS {
                    init.dense(&name, input, output)
                } else {
                    init.dense_relu(&name, input, output)
                }
            })
            .collect();
        let experts = (0..EXPERT_LAYERS)
            .map(|l| {
                let input = if l == 0 { d } else { h };
                let output = if l + 1 == EXPERT_LAYERS { 2 * c } else { h };
                init.stacked(&format!("experts.{l}"), cfg.n_experts, input, output, l + 1 < EXPERT_LAYERS)
            })
            .collect();
        let j = cfg.n_joints;
        Layout {
            stages,
            local_conv,
            local_proj,
            global,
            mu_token,
            sigma_token,
            positions,
            encoder,
            mu_head,
            sigma_head,
            gating,
            experts,
            expand_in: init.dense("expand.local.in", c, parts * jh),
            expand_joint: init.stacked("expand.local.joint", j, jh, jh, true),
            expand_conv: init.dense_relu("expand.local.conv", jh, jh),
            expand_out: init.stacked("expand.local.out", j, jh, JOINT_WIDTH, false),
            expand_global: [init.dense_relu("expand.global.0", c, h), init.dense("expand.global.1", h, GLOBAL_WIDTH)],
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn scaling(&self) -> &FeatureScaling {
        &self.scaling
    }

    /// Replaces the feature statistics. Groupings made before the change are stale.
    pub fn set_scaling(&mut self, scaling: FeatureScaling) -> Result<()> {
        scaling.validate(self.config.n_joints)?;
        self.scaling = scaling;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn dense(&self, tape: &mut Tape<'_>, x: Var, d: Dense) -> Var {
        tape.linear(x, d.w, Some(d.b))
    }

    fn affine(&self, tape: &mut Tape<'_>, x: Var, scale: Tensor, shift: Tensor) -> Var {
        let scale = tape.constant(scale);
        let shift = tape.constant(shift);
        let y = tape.mul(x, scale);
        tape.add(y, shift)
    }

    fn dense_relu(&self, tape: &mut Tape<'_>, x: Var, d: Dense) -> Var {
        let y = self.dense(tape, x, d);
        tape.relu(y)
    }

    /// Groups the clouds this model reads from `history`.
    pub fn group_history(&self, history: &PointCloudHistory) -> Result<HistoryGrouping> {
        if history.points_per_frame() != self.config.points {
            return Err(Error::Dimension { what: "points per cloud", expected: self.config.points, got: history.points_per_frame() });
        }
        let clouds = (0..self.config.clouds()).map(|k| CloudGrouping::new(&self.config, &self.scaling, history.cloud(k))).collect();
        Ok(HistoryGrouping { clouds })
    }

    /// Point embeddings, `B*P x C`, sample-major.
    pub fn embed_pointcloud_tape(&self, tape: &mut Tape<'_>, groups: &[&HistoryGrouping]) -> Var {
        let clouds: Vec<&CloudGrouping> = groups.iter().flat_map(|g| g.clouds.iter()).collect();
        let mut feats: Option<Var> = None;
        for (s, layers) in self.layout.stages.iter().enumerate() {
            let first = &clouds[0].stages[s];
            let prev_level = if s == 0 { 0 } else { clouds[0].stages[s - 1].centroids };
            let rows = first.neighbors.len();
            let mut coords = Vec::with_capacity(clouds.len() * rows * 3);
            let mut index = Vec::with_capacity(clouds.len() * rows);
            for (ci, c) in clouds.iter().enumerate() {
                let st = &c.stages[s];
                coords.extend_from_slice(st.coords.data());
                index.extend(st.neighbors.iter().map(|&n| ci * prev_level + n));
            }
            let coords = tape.constant(Tensor::from_vec(clouds.len() * rows, 3, coords));
            let input = match feats {
                None => coords,
                Some(f) => {
                    let gathered = tape.gather_rows(f, index);
                    tape.concat_cols(&[coords, gathered])
                }
            };
            let h = self.dense_relu(tape, input, layers[0]);
            let h = self.dense_relu(tape, h, layers[1]);
            feats = Some(tape.group_max(h, first.group));
        }
        feats.expect("at least one stage")
    }

    /// Local pose embedding `B x C` from `B*J x 15` rows.
    pub fn embed_local_tape(&self, tape: &mut Tape<'_>, local: Var) -> Var {
        let parts = self.local_parts_tape(tape, local);
        let b = tape.shape(local).0 / self.config.n_joints;
        let flat = tape.reshape(parts, b, self.parts * self.config.joint_hidden);
        self.dense(tape, flat, self.layout.local_proj)
    }

    /// Graph convolution then body-part pooling, `B*parts x joint_hidden`.
    pub fn local_parts_tape(&self, tape: &mut Tape<'_>, local: Var) -> Var {
        let mixed = tape.block_mix(local, self.graph.clone());
        let h = self.dense_relu(tape, mixed, self.layout.local_conv);
        tape.block_mix(h, self.pool.clone())
    }

    pub fn embed_global_tape(&self, tape: &mut Tape<'_>, global: Var) -> Var {
        let h = self.dense_relu(tape, global, self.layout.global[0]);
        self.dense(tape, h, self.layout.global[1])
    }

    /// Posterior parameters `(mu, log_sigma)`, each `B x C`. `prev` is ignored
    /// by non-autoregressive models.
    pub fn encode_posterior_tape(&self, tape: &mut Tape<'_>, points: Var, prev: Option<(Var, Var)>, cur: (Var, Var)) -> Var2 {
        let b = tape.shape(cur.0).0;
        let p = self.config.clouds();
        let mu_tok = tape.param(self.layout.mu_token);
        let sigma_tok = tape.param(self.layout.sigma_token);
        let mut blocks = vec![(mu_tok, 1usize, false), (sigma_tok, 1, false), (points, p, true)];
        if self.config.autoregressive {
            let (px, pg) = prev.expect("autoregressive model needs the previous pose");
            blocks.push((px, 1, true));
            blocks.push((pg, 1, true));
        }
        blocks.push((cur.0, 1, true));
        blocks.push((cur.1, 1, true));
        // stack every block, then permute into per-sample sequences
        let mut starts = Vec::with_capacity(blocks.len());
        let mut at = 0;
        for (_, rows, batched) in &blocks {
            starts.push(at);
            at += if *batched { rows * b } else { *rows };
        }
        let stacked = tape.concat_rows(&blocks.iter().map(|x| x.0).collect::<Vec<_>>());
        let mut index = Vec::with_capacity(b * self.config.sequence_len());
        for s in 0..b {
            for ((_, rows, batched), start) in blocks.iter().zip(&starts) {
                for r in 0..*rows {
                    index.push(if *batched { start + s * rows + r } else { start + r });
                }
            }
        }
        let seq = tape.gather_rows(stacked, index);
        let pos = tape.param(self.layout.positions);
        let mut x = tape.add_tiled(seq, pos);
        let len = self.config.sequence_len();
        for layer in &self.layout.encoder {
            let q = self.dense(tape, x, layer.q);
            let k = self.dense(tape, x, layer.k);
            let v = self.dense(tape, x, layer.v);
            let a = tape.attention(q, k, v, len, self.config.transformer_heads);
            let a = self.dense(tape, a, layer.out);
            let r = tape.add(x, a);
            let h = tape.layer_norm(r, layer.norm1.0, layer.norm1.1);
            let f = self.dense_relu(tape, h, layer.ff1);
            let f = self.dense(tape, f, layer.ff2);
            let r = tape.add(h, f);
            x = tape.layer_norm(r, layer.norm2.0, layer.norm2.1);
        }
        let mu = tape.gather_rows(x, (0..b).map(|s| s * len).collect());
        let mu = self.dense(tape, mu, self.layout.mu_head);
        let ls = tape.gather_rows(x, (0..b).map(|s| s * len + 1).collect());
        let ls = self.dense(tape, ls, self.layout.sigma_head);
        let ls = tape.clamp(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
        (mu, ls)
    }

    /// Decoder input `[z, points flattened, prev local, prev global]`, `B x D`.
    fn decoder_input_tape(&self, tape: &mut Tape<'_>, z: Var, points: Var, prev: Option<(Var, Var)>) -> Var {
        let b = tape.shape(z).0;
        let flat = tape.reshape(points, b, self.config.clouds() * self.config.channels);
        let mut parts = vec![z, flat];
        if self.config.autoregressive {
            let (px, pg) = prev.expect("autoregressive model needs the previous pose");
            parts.push(px);
            parts.push(pg);
        }
        tape.concat_cols(&parts)
    }

    pub fn gating_tape(&self, tape: &mut Tape<'_>, input: Var) -> Var {
        let mut h = input;
        for (l, d) in self.layout.gating.iter().enumerate() {
            h = if l + 1 == GATING_LAYERS { self.dense(tape, h, *d) } else { self.dense_relu(tape, h, *d) };
        }
        tape.softmax_rows(h)
    }

    /// Decoder output `B x 2C` and the gate weights `B x K`.
    pub fn decode_moe_tape(&self, tape: &mut Tape<'_>, z: Var, points: Var, prev: Option<(Var, Var)>) -> Var2 {
        let input = self.decoder_input_tape(tape, z, points, prev);
        let gate = self.gating_tape(tape, input);
        let mut h = input;
        for (l, d) in self.layout.experts.iter().enumerate() {
            h = tape.moe_linear(h, gate, d.w, d.b);
            if l + 1 < EXPERT_LAYERS {
                h = tape.relu(h);
            }
        }
        (h, gate)
    }

    /// Expanded `(local B*J x 15, global B x 17)`.
    pub fn expand_tape(&self, tape: &mut Tape<'_>, decoded: Var) -> Var2 {
        let c = self.config.channels;
        let j = self.config.n_joints;
        let jh = self.config.joint_hidden;
        let b = tape.shape(decoded).0;
        let head = tape.slice_cols(decoded, 0, c);
        let tail = tape.slice_cols(decoded, c, c);

        let parts = self.dense(tape, head, self.layout.expand_in);
        let parts = tape.reshape(parts, b * self.parts, jh);
        let joints = tape.block_mix(parts, self.unpool.clone());
        let joints = tape.joint_linear(joints, self.layout.expand_joint.w, self.layout.expand_joint.b, j);
        let joints = tape.relu(joints);
        let mixed = tape.block_mix(joints, self.graph.clone());
        let joints = self.dense_relu(tape, mixed, self.layout.expand_conv);
        let local = tape.joint_linear(joints, self.layout.expand_out.w, self.layout.expand_out.b, j);
        let (scale, mean) = self.scaling.local_affine(b * j);
        let local = self.affine(tape, local, scale, mean);

        let h = self.dense_relu(tape, tail, self.layout.expand_global[0]);
        let g = self.dense(tape, h, self.layout.expand_global[1]);
        let body = tape.slice_cols(g, 0, CONTACT_START);
        let (scale, mean) = self.scaling.global_affine(b);
        let body = self.affine(tape, body, scale, mean);
        let contacts = tape.slice_cols(g, CONTACT_START, GLOBAL_WIDTH - CONTACT_START);
        let contacts = tape.sigmoid(contacts);
        let global = tape.concat_cols(&[body, contacts]);
        (local, global)
    }

    /// Full training pass. `eps` is the `B x C` reparameterization noise.
    pub fn forward_train_tape(&self, tape: &mut Tape<'_>, batch: &Batch, eps: &Tensor) -> TrainVars {
        let groups: Vec<&HistoryGrouping> = batch.groups.iter().map(|g| g.as_ref()).collect();
        let points = self.embed_pointcloud_tape(tape, &groups);
        self.forward_train_with_points(tape, points, batch, eps)
    }

    /// [`Self::forward_train_tape`] with precomputed point embeddings.
    pub fn forward_train_with_points(&self, tape: &mut Tape<'_>, points: Var, batch: &Batch, eps: &Tensor) -> TrainVars {
        let prev = if self.config.autoregressive {
            let px = tape.constant(self.scaling.normalize_local(&batch.prev_local));
            let pg = tape.constant(self.scaling.normalize_global(&batch.prev_global));
            Some((self.embed_local_tape(tape, px), self.embed_global_tape(tape, pg)))
        } else {
            None
        };
        let cx = tape.constant(self.scaling.normalize_local(&batch.cur_local));
        let cg = tape.constant(self.scaling.normalize_global(&batch.cur_global));
        let cur = (self.embed_local_tape(tape, cx), self.embed_global_tape(tape, cg));
        let (mu, log_sigma) = self.encode_posterior_tape(tape, points, prev, cur);
        let eps = tape.constant(eps.clone());
        let sigma = tape.exp(log_sigma);
        let noise = tape.mul(sigma, eps);
        let z = tape.add(mu, noise);
        let (decoded, _) = self.decode_moe_tape(tape, z, points, prev);
        let (local, global) = self.expand_tape(tape, decoded);
        TrainVars { local, global, mu, log_sigma }
    }

    /// Generation pass from a given latent `z` (`B x C`).
    pub fn generate_tape(&self, tape: &mut Tape<'_>, groups: &[&HistoryGrouping], prev: &[&PoseFeatures], z: &Tensor) -> Var2 {
        let points = self.embed_pointcloud_tape(tape, groups);
        let prev = self.prev_embeddings(tape, prev);
        let z = tape.constant(z.clone());
        let (decoded, _) = self.decode_moe_tape(tape, z, points, prev);
        self.expand_tape(tape, decoded)
    }

    fn prev_embeddings(&self, tape: &mut Tape<'_>, prev: &[&PoseFeatures]) -> Option<(Var, Var)> {
        if !self.config.autoregressive {
            return None;
        }
        let px = self.scaling.normalize_local(&stack_local(&prev.iter().map(|p| &p.local).collect::<Vec<_>>()));
        let pg = self.scaling.normalize_global(&stack_global(&prev.iter().map(|p| &p.global).collect::<Vec<_>>()));
        let (px, pg) = (tape.constant(px), tape.constant(pg));
        Some((self.embed_local_tape(tape, px), self.embed_global_tape(tape, pg)))
    }

    fn check_local(&self, x: &LocalPoseFeature) -> Result<()> {
        if x.len() != self.config.n_joints {
            return Err(Error::Dimension { what: "local pose joints", expected: self.config.n_joints, got: x.len() });
        }
        Ok(())
    }

    fn check_width(&self, what: &'static str, v: &[f64], expected: usize) -> Result<()> {
        if v.len() != expected {
            return Err(Error::Dimension { what, expected, got: v.len() });
        }
        Ok(())
    }

    /// Point embedding of one history, `P x C`.
    pub fn embed_pointcloud(&self, history: &PointCloudHistory) -> Result<Tensor> {
        let g = self.group_history(history)?;
        let mut tape = Tape::new(&self.params);
        let v = self.embed_pointcloud_tape(&mut tape, &[&g]);
        Ok(tape.value(v).clone())
    }

    pub fn embed_local_pose(&self, x: &LocalPoseFeature) -> Result<Vec<f64>> {
        self.check_local(x)?;
        let mut tape = Tape::new(&self.params);
        let c = tape.constant(self.scaling.normalize_local(&stack_local(&[x])));
        let v = self.embed_local_tape(&mut tape, c);
        Ok(tape.value(v).data().to_vec())
    }

    pub fn embed_global_pose(&self, g: &GlobalPoseFeature) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let c = tape.constant(self.scaling.normalize_global(&stack_global(&[g])));
        let v = self.embed_global_tape(&mut tape, c);
        Ok(tape.value(v).data().to_vec())
    }

    /// Posterior from precomputed embeddings: `points` is `P x C`, the rest
    /// are C-vectors. `prev` is required by autoregressive models.
    pub fn encode_posterior(&self, points: &Tensor, prev: Option<(&[f64], &[f64])>, cur: (&[f64], &[f64])) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = self.config.channels;
        if points.shape() != (self.config.clouds(), c) {
            return Err(Error::Dimension { what: "point embedding rows", expected: self.config.clouds(), got: points.rows() });
        }
        self.check_width("current local embedding", cur.0, c)?;
        self.check_width("current global embedding", cur.1, c)?;
        let mut tape = Tape::new(&self.params);
        let pv = tape.constant(points.clone());
        let prev = match (self.config.autoregressive, prev) {
            (true, Some((x, g))) => {
                self.check_width("previous local embedding", x, c)?;
                self.check_width("previous global embedding", g, c)?;
                Some((tape.constant(Tensor::row_vector(x.to_vec())), tape.constant(Tensor::row_vector(g.to_vec()))))
            }
            (true, None) => return Err(Error::InvalidConfig("autoregressive model needs the previous pose".into())),
            (false, _) => None,
        };
        let cur = (tape.constant(Tensor::row_vector(cur.0.to_vec())), tape.constant(Tensor::row_vector(cur.1.to_vec())));
        let (mu, ls) = self.encode_posterior_tape(&mut tape, pv, prev, cur);
        Ok((tape.value(mu).data().to_vec(), tape.value(ls).data().to_vec()))
    }

    /// Decoder output (2C) and gate weights from precomputed embeddings.
    pub fn decode_moe(&self, z: &[f64], points: &Tensor, prev: Option<(&[f64], &[f64])>) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = self.config.channels;
        self.check_width("latent", z, c)?;
        if points.shape() != (self.config.clouds(), c) {
            return Err(Error::Dimension { what: "point embedding rows", expected: self.config.clouds(), got: points.rows() });
        }
        let mut tape = Tape::new(&self.params);
        let zv = tape.constant(Tensor::row_vector(z.to_vec()));
        let pv = tape.constant(points.clone());
        let prev = match (self.config.autoregressive, prev) {
            (true, Some((x, g))) => {
                self.check_width("previous local embedding", x, c)?;
                self.check_width("previous global embedding", g, c)?;
                Some((tape.constant(Tensor::row_vector(x.to_vec())), tape.constant(Tensor::row_vector(g.to_vec()))))
            }
            (true, None) => return Err(Error::InvalidConfig("autoregressive model needs the previous pose".into())),
            (false, _) => None,
        };
        let (d, gate) = self.decode_moe_tape(&mut tape, zv, pv, prev);
        Ok((tape.value(d).data().to_vec(), tape.value(gate).data().to_vec()))
    }

    pub fn expand_features(&self, decoded: &[f64]) -> Result<PoseFeatures> {
        self.check_width("decoder output", decoded, 2 * self.config.channels)?;
        let mut tape = Tape::new(&self.params);
        let d = tape.constant(Tensor::row_vector(decoded.to_vec()));
        let (l, g) = self.expand_tape(&mut tape, d);
        self.unstack(tape.value(l), tape.value(g), 0)
    }

    /// Sample `s` of stacked outputs as pose features.
    pub fn unstack(&self, local: &Tensor, global: &Tensor, s: usize) -> Result<PoseFeatures> {
        let j = self.config.n_joints;
        let l = &local.data()[s * j * JOINT_WIDTH..(s + 1) * j * JOINT_WIDTH];
        Ok(PoseFeatures { global: GlobalPoseFeature::from_slice(global.row(s))?, local: LocalPoseFeature::from_slice(l, j)? })
    }

    pub fn check_example(&self, history: &PointCloudHistory, prev: &PoseFeatures, cur: &PoseFeatures) -> Result<()> {
        if history.points_per_frame() != self.config.points {
            return Err(Error::Dimension { what: "points per cloud", expected: self.config.points, got: history.points_per_frame() });
        }
        self.check_local(&prev.local)?;
        self.check_local(&cur.local)
    }

    fn example_batch(&self, example: &crate::dataset::TrainingExample) -> Result<Batch> {
        self.check_example(&example.history, &example.prev, &example.cur)?;
        Ok(Batch {
            groups: vec![Arc::new(self.group_history(&example.history)?)],
            prev_local: stack_local(&[&example.prev.local]),
            prev_global: stack_global(&[&example.prev.global]),
            cur_local: stack_local(&[&example.cur.local]),
            cur_global: stack_global(&[&example.cur.global]),
        })
    }

    /// One posterior sample and reconstruction of `example`.
    pub fn forward_train(&self, example: &crate::dataset::TrainingExample, rng: &mut seed::Rng) -> Result<TrainOutput> {
        let batch = self.example_batch(example)?;
        let c = self.config.channels;
        let eps: Vec<f64> = (0..c).map(|_| StandardNormal.sample(rng)).collect();
        let mut tape = Tape::new(&self.params);
        let out = self.forward_train_tape(&mut tape, &batch, &Tensor::row_vector(eps.clone()));
        let mu = tape.value(out.mu).data().to_vec();
        let log_sigma = tape.value(out.log_sigma).data().to_vec();
        let z = mu.iter().zip(&log_sigma).zip(&eps).map(|((m, l), e)| m + l.exp() * e).collect();
        Ok(TrainOutput {
            pose: self.unstack(tape.value(out.local), tape.value(out.global), 0)?,
            latent: LatentSample { mu, log_sigma, z, eps },
        })
    }

    /// Reconstruction of `example` through the posterior mean (`z = mu`).
    pub fn reconstruct(&self, example: &crate::dataset::TrainingExample) -> Result<PoseFeatures> {
        let batch = self.example_batch(example)?;
        let mut tape = Tape::new(&self.params);
        let out = self.forward_train_tape(&mut tape, &batch, &Tensor::zeros(1, self.config.channels));
        self.unstack(tape.value(out.local), tape.value(out.global), 0)
    }

    /// Prediction for one history given the previous pose and a latent.
    pub fn predict(&self, history: &PointCloudHistory, prev: &PoseFeatures, z: &[f64]) -> Result<PoseFeatures> {
        self.check_local(&prev.local)?;
        self.check_width("latent", z, self.config.channels)?;
        let g = self.group_history(history)?;
        let mut tape = Tape::new(&self.params);
        let (l, gv) = self.generate_tape(&mut tape, &[&g], &[prev], &Tensor::row_vector(z.to_vec()));
        self.unstack(tape.value(l), tape.value(gv), 0)
    }
}

/// Pair of tape handles.
pub type Var2 = (Var, Var);

/// Normalized adjacency with self loops (`J x J`), part mean-pooling
/// (`parts x J`) and part-to-joint broadcast (`J x parts`).
fn graph_matrices(skeleton: &Skeleton) -> (Arc<Tensor>, Arc<Tensor>, Arc<Tensor>) {
    let j = skeleton.len();
    let mut adj = Tensor::zeros(j, j);
    for i in 0..j {
        adj.set(i, i, 1.0);
        if let Some(p) = skeleton.parent(i) {
            adj.set(i, p, 1.0);
            adj.set(p, i, 1.0);
        }
    }
    let deg: Vec<f64> = (0..j).map(|i| adj.row(i).iter().sum::<f64>()).collect();
    for r in 0..j {
        for c in 0..j {
            let v = adj.get(r, c) / (deg[r] * deg[c]).sqrt();
            adj.set(r, c, v);
        }
    }
    let parts = skeleton.part_count();
    let mut pool = Tensor::zeros(parts, j);
    let mut unpool = Tensor::zeros(j, parts);
    for (i, joint) in skeleton.joints().iter().enumerate() {
        let p = joint.body_part;
        pool.set(p, i, 1.0);
        unpool.set(i, p, 1.0);
    }
    for p in 0..parts {
        let n: f64 = pool.row(p).iter().sum();
        pool.row_mut(p).iter_mut().for_each(|v| *v /= n);
    }
    (Arc::new(adj), Arc::new(pool), Arc::new(unpool))
}
