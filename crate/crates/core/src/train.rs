//! Scene optimization: Adam updates, unseen-view sampling with a cached set
//! of forward warps, and the densify/prune schedule.
//!
//! Iteration `it` (counting from 1) is an unseen-view iteration iff
//! `it % unseen_interval == 0`; it renders a sampled pose and is supervised by
//! the forward-warped image only. All other iterations render a training view
//! and apply the photometric, MVS-depth and monocular rank losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{interpolate_pose, Camera, DepthMap, Intrinsics, Pose, View};
use crate::losses::{
    cs_loss, fwd_loss, mono_rank_loss, photometric_loss, total_loss, LossError, LossParts, LossRecord,
    LossWeights,
};
use crate::render::project::quat_to_rotation;
use crate::render::{render, render_backward, GaussianGrads, GaussianSet, RenderConfig, RenderError};
use crate::warp::{forward_warp, WarpResult};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("need at least {need} training views, got {got}")]
    TooFewViews { need: usize, got: usize },
    #[error("parameter and gradient shapes differ: {0}")]
    ShapeMismatch(&'static str),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at iteration {iter} ({gaussians} gaussians, view {view})")]
    NonFinite {
        what: &'static str,
        iter: usize,
        gaussians: usize,
        view: usize,
    },
    #[error("render failed at iteration {iter}: {source}")]
    Render {
        iter: usize,
        #[source]
        source: RenderError,
    },
    #[error("loss failed at iteration {iter}: {source}")]
    Loss {
        iter: usize,
        #[source]
        source: LossError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Position rates are multiplied by the scene extent.
    pub position_init: f64,
    pub position_final: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            sh_dc: 2.5e-3,
            sh_rest: 2.5e-3 / 20.0,
            opacity: 0.05,
            scale: 5e-3,
            rotation: 1e-3,
        }
    }
}

impl LearningRates {
    /// Log-linear decay from `position_init` to `position_final` over `num_iters`.
    pub fn position_at(&self, iter: usize, num_iters: usize) -> f64 {
        let t = if num_iters == 0 {
            1.0
        } else {
            (iter as f64 / num_iters as f64).clamp(0.0, 1.0)
        };
        (self.position_init.ln() * (1.0 - t) + self.position_final.ln() * t).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub num_iters: usize,
    pub unseen_interval: usize,
    pub densify_from: usize,
    pub densify_until_prune: usize,
    pub densify_until: usize,
    pub densify_every: usize,
    pub densify_grad_thresh: f64,
    /// Clone below, split at or above this fraction of the scene extent.
    pub densify_scale_frac: f64,
    pub split_factor: f64,
    pub prune_opacity: f64,
    /// Optional prune of splats wider than this many pixels.
    pub max_screen_radius: Option<f64>,
    pub weights: LossWeights,
    pub lr: LearningRates,
    pub seed: u64,
    pub num_unseen_poses: usize,
    pub unseen_t_range: [f64; 2],
    /// Translation jitter standard deviation as a fraction of the extent.
    pub unseen_jitter: f64,
    /// Supervise unseen views with forward warps. Off gives the no-warp ablation,
    /// where every iteration is a training-view iteration.
    pub use_fwd: bool,
    /// Warp with MVS depth restricted to the consistency mask.
    pub warp_filtered_depth: bool,
    pub sh_degree: usize,
    pub deterministic: bool,
    pub checkpoint_every: usize,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_iters: 20_000,
            unseen_interval: 3,
            densify_from: 500,
            densify_until_prune: 5_000,
            densify_until: 10_000,
            densify_every: 100,
            densify_grad_thresh: 2e-4,
            densify_scale_frac: 0.01,
            split_factor: 1.6,
            prune_opacity: 0.005,
            max_screen_radius: None,
            weights: LossWeights::default(),
            lr: LearningRates::default(),
            seed: 0,
            num_unseen_poses: 24,
            unseen_t_range: [0.2, 0.8],
            unseen_jitter: 0.01,
            use_fwd: true,
            warp_filtered_depth: true,
            sh_degree: 1,
            deterministic: true,
            checkpoint_every: 0,
            render: RenderConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The shorter schedule.
    pub fn fast() -> Self {
        Self {
            num_iters: 10_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.unseen_interval < 2 {
            return bad("unseen_interval must be at least 2");
        }
        if self.densify_every == 0 {
            return bad("densify_every must be positive");
        }
        if self.densify_from > self.densify_until_prune.max(self.densify_until) {
            return bad("densify_from must precede the densify windows");
        }
        let [t0, t1] = self.unseen_t_range;
        if !(0.0 <= t0 && t0 <= t1 && t1 <= 1.0) {
            return bad("unseen_t_range must be an ordered sub-range of [0, 1]");
        }
        if self.sh_degree > 3 {
            return bad("sh_degree must be at most 3");
        }
        if !(self.split_factor > 0.0) || !(self.unseen_jitter >= 0.0) {
            return bad("split_factor must be positive and unseen_jitter nonnegative");
        }
        self.weights.validate().map_err(TrainError::InvalidConfig)
    }

    /// SHA-256 of the canonical JSON encoding, as hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn is_unseen_iter(&self, iter: usize) -> bool {
        self.use_fwd && iter % self.unseen_interval == 0
    }
}

/// Adam moments for one flat parameter group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamGroup {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamGroup {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One Adam update at 1-based `step` with a per-element learning rate.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        step: u64,
        lr: impl Fn(usize) -> f64,
    ) -> Result<(), TrainError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(TrainError::ShapeMismatch("adam group"));
        }
        let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr(i) * mh / (vh.sqrt() + ADAM_EPS);
        }
        Ok(())
    }

    /// Rebuilds rows of width `stride`: `Some(i)` copies old row `i`, `None` starts at zero.
    fn remap(&mut self, rows: &[Option<usize>], stride: usize) {
        let mut m = Vec::with_capacity(rows.len() * stride);
        let mut v = Vec::with_capacity(rows.len() * stride);
        for r in rows {
            match r {
                Some(i) => {
                    m.extend_from_slice(&self.m[i * stride..(i + 1) * stride]);
                    v.extend_from_slice(&self.v[i * stride..(i + 1) * stride]);
                }
                None => {
                    m.extend(std::iter::repeat_n(0.0, stride));
                    v.extend(std::iter::repeat_n(0.0, stride));
                }
            }
        }
        self.m = m;
        self.v = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub positions: AdamGroup,
    pub log_scales: AdamGroup,
    pub rotations: AdamGroup,
    pub opacity: AdamGroup,
    pub sh: AdamGroup,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(g: &GaussianSet) -> Self {
        let n = g.len();
        Self {
            positions: AdamGroup::zeros(n * 3),
            log_scales: AdamGroup::zeros(n * 3),
            rotations: AdamGroup::zeros(n * 4),
            opacity: AdamGroup::zeros(n),
            sh: AdamGroup::zeros(g.sh_coeffs.len()),
            step: 0,
        }
    }

    /// Whether every moment array matches the parameter arrays of `g`.
    pub fn is_congruent(&self, g: &GaussianSet) -> bool {
        let n = g.len();
        [
            (&self.positions, n * 3),
            (&self.log_scales, n * 3),
            (&self.rotations, n * 4),
            (&self.opacity, n),
            (&self.sh, g.sh_coeffs.len()),
        ]
        .iter()
        .all(|(a, len)| a.m.len() == *len && a.v.len() == *len)
    }

    fn remap(&mut self, rows: &[Option<usize>], sh_stride: usize) {
        self.positions.remap(rows, 3);
        self.log_scales.remap(rows, 3);
        self.rotations.remap(rows, 4);
        self.opacity.remap(rows, 1);
        self.sh.remap(rows, sh_stride);
    }
}

/// Applies one Adam step to every parameter group, then renormalizes rotations.
pub fn adam_step(
    g: &mut GaussianSet,
    grads: &GaussianGrads,
    state: &mut OptimizerState,
    lr: &LearningRates,
    extent: f64,
    iter: usize,
    num_iters: usize,
) -> Result<(), TrainError> {
    if grads.positions.len() != g.len() || grads.sh_coeffs.len() != g.sh_coeffs.len() {
        return Err(TrainError::ShapeMismatch("gradients"));
    }
    if !state.is_congruent(g) {
        return Err(TrainError::ShapeMismatch("optimizer state"));
    }
    state.step += 1;
    let t = state.step;
    let pos_lr = lr.position_at(iter, num_iters) * extent;
    state
        .positions
        .step(g.positions.as_flattened_mut(), grads.positions.as_flattened(), t, |_| pos_lr)?;
    state
        .log_scales
        .step(g.log_scales.as_flattened_mut(), grads.log_scales.as_flattened(), t, |_| lr.scale)?;
    state
        .rotations
        .step(g.rotations.as_flattened_mut(), grads.rotations.as_flattened(), t, |_| lr.rotation)?;
    state
        .opacity
        .step(&mut g.opacity_logits, &grads.opacity_logits, t, |_| lr.opacity)?;
    let stride = g.sh_stride();
    state.sh.step(&mut g.sh_coeffs, &grads.sh_coeffs, t, |i| {
        if i % stride < 3 {
            lr.sh_dc
        } else {
            lr.sh_rest
        }
    })?;
    g.normalize_rotations();
    Ok(())
}

/// Per-Gaussian statistics gathered between densification events.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyStats {
    /// Sum of screen-gradient norms, in normalized device units.
    pub grad_accum: Vec<f64>,
    pub count: Vec<u32>,
    /// Sum of 3D position gradients, used to orient clones.
    pub pos_grad: Vec<[f64; 3]>,
    pub max_radius: Vec<f64>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_accum: vec![0.0; n],
            count: vec![0; n],
            pos_grad: vec![[0.0; 3]; n],
            max_radius: vec![0.0; n],
        }
    }

    pub fn accumulate(&mut self, grads: &GaussianGrads, radii: &[f64], width: usize, height: usize) {
        for i in 0..self.count.len() {
            if !grads.visible[i] {
                continue;
            }
            let [gx, gy] = grads.mean2d[i];
            let sx = gx * width as f64 * 0.5;
            let sy = gy * height as f64 * 0.5;
            self.grad_accum[i] += (sx * sx + sy * sy).sqrt();
            self.count[i] += 1;
            for a in 0..3 {
                self.pos_grad[i][a] += grads.positions[i][a];
            }
            self.max_radius[i] = self.max_radius[i].max(radii[i]);
        }
    }

    pub fn mean_grad(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_accum[i] / self.count[i] as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clones small and splits large Gaussians with large screen gradients, then
/// prunes nearly transparent ones while `iter < densify_until_prune`.
/// Returns the row map from new rows to old rows (`None` for new rows).
pub fn densify_and_prune<R: Rng + ?Sized>(
    g: &mut GaussianSet,
    stats: &DensifyStats,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    iter: usize,
    extent: f64,
    rng: &mut R,
) -> (DensifyReport, Vec<Option<usize>>) {
    let n = g.len();
    let mut report = DensifyReport::default();
    let mut out = GaussianSet::empty(g.sh_degree);
    let mut rows: Vec<Option<usize>> = Vec::with_capacity(n);
    let limit = cfg.densify_scale_frac * extent;
    let densify = iter < cfg.densify_until;
    let hot: Vec<bool> = (0..n)
        .map(|i| densify && stats.mean_grad(i) > cfg.densify_grad_thresh)
        .collect();
    let max_scale = |i: usize| g.scales(i).into_iter().fold(0.0, f64::max);
    let split: Vec<bool> = (0..n).map(|i| hot[i] && max_scale(i) >= limit).collect();
    for i in 0..n {
        if !split[i] {
            out.push_row_from(g, i);
            rows.push(Some(i));
        }
    }
    for i in (0..n).filter(|&i| hot[i] && !split[i]) {
        let mut p = g.positions[i];
        let d = stats.pos_grad[i];
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if norm > 0.0 {
            let s = max_scale(i);
            for a in 0..3 {
                p[a] -= d[a] / norm * s;
            }
        }
        out.push(p, g.log_scales[i], g.rotations[i], g.opacity_logits[i], g.sh(i));
        rows.push(None);
        report.cloned += 1;
    }
    let shrink = cfg.split_factor.ln();
    for i in (0..n).filter(|&i| split[i]) {
        let r = quat_to_rotation(crate::render::project::normalize_quat(g.rotations[i]).0);
        let s = g.scales(i);
        let ls = g.log_scales[i].map(|v| v - shrink);
        for _ in 0..2 {
            let e: [f64; 3] = std::array::from_fn(|a| {
                let z: f64 = StandardNormal.sample(rng);
                s[a] * z
            });
            let off = r * nalgebra::Vector3::from(e);
            let p = g.positions[i];
            out.push([p[0] + off.x, p[1] + off.y, p[2] + off.z], ls, g.rotations[i], g.opacity_logits[i], g.sh(i));
            rows.push(None);
        }
        report.split += 1;
    }
    if iter < cfg.densify_until_prune {
        let old_rows = rows.clone();
        let keep: Vec<bool> = (0..out.len())
            .map(|k| {
                let transparent = out.opacity(k) < cfg.prune_opacity;
                let huge = match (cfg.max_screen_radius, old_rows[k]) {
                    (Some(lim), Some(i)) => stats.max_radius[i] > lim,
                    _ => false,
                };
                !(transparent || huge)
            })
            .collect();
        if keep.iter().any(|&k| k) {
            report.pruned = keep.iter().filter(|&&k| !k).count();
            out.retain_rows(&keep);
            rows = old_rows
                .into_iter()
                .zip(&keep)
                .filter_map(|(r, &k)| k.then_some(r))
                .collect();
        }
    }
    state.remap(&rows, g.sh_stride());
    *g = out;
    (report, rows)
}

/// Pose interpolated between `a` and `b` with translation offset `jitter`.
pub fn interpolate_unseen(a: &Pose, b: &Pose, t: f64, jitter: [f64; 3]) -> Pose {
    let mut p = if t == 0.0 { *a } else { interpolate_pose(a, b, t) };
    for k in 0..3 {
        p.translation[k] += jitter[k];
    }
    p
}

/// Random poses between ordered pairs of distinct training poses.
pub fn sample_unseen_poses(
    train_poses: &[Pose],
    m: usize,
    extent: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<Pose>, TrainError> {
    let n = train_poses.len();
    if n < 2 {
        return Err(TrainError::TooFewViews { need: 2, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = cfg.unseen_jitter * extent;
    let normal = Normal::new(0.0, sigma.max(0.0)).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let [t0, t1] = cfg.unseen_t_range;
    Ok((0..m)
        .map(|_| {
            let i = rng.random_range(0..n);
            let j = (i + rng.random_range(1..n)) % n;
            let t = if t1 > t0 { rng.random_range(t0..t1) } else { t0 };
            let jitter = std::array::from_fn(|_| normal.sample(&mut rng));
            interpolate_unseen(&train_poses[i], &train_poses[j], t, jitter)
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct WarpEntry {
    pub unseen: usize,
    pub src: usize,
    /// `None` when the warp failed or covers no pixel.
    pub result: Option<WarpResult>,
}

/// All `M x N` forward warps from training views into unseen poses, unseen-major.
#[derive(Debug, Clone)]
pub struct WarpCache {
    pub poses: Vec<Pose>,
    pub intrinsics: Intrinsics,
    pub entries: Vec<WarpEntry>,
}

impl WarpCache {
    pub fn usable(&self) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].result.is_some())
            .collect()
    }
}

/// Depth used as the warp source for each view: MVS depth, optionally
/// restricted to `masks`.
pub fn warp_depths(views: &[View], masks: Option<&[Vec<bool>]>) -> Vec<Option<DepthMap>> {
    views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let d = v.mvs_depth.clone()?;
            Some(match masks {
                Some(m) => d.with_mask(&m[i]),
                None => d,
            })
        })
        .collect()
}

pub fn build_warp_cache(views: &[View], depths: &[Option<DepthMap>], unseen: &[Pose]) -> WarpCache {
    let n = views.len();
    let entries = (0..unseen.len() * n)
        .into_par_iter()
        .map(|e| {
            let (u, s) = (e / n, e % n);
            let v = &views[s];
            let result = depths[s].as_ref().and_then(|d| {
                forward_warp(&v.image, d, &v.pose, &unseen[u], &v.intrinsics)
                    .ok()
                    .filter(|r| r.coverage.iter().any(|&c| c))
            });
            WarpEntry { unseen: u, src: s, result }
        })
        .collect();
    WarpCache {
        poses: unseen.to_vec(),
        intrinsics: views.first().map_or_else(
            || Intrinsics::centered(1.0, 1, 1).expect("unit intrinsics"),
            |v| v.intrinsics,
        ),
        entries,
    }
}

/// Radius of the sphere around the bounding-box center of all camera
/// centers and points.
pub fn scene_extent(camera_centers: &[[f64; 3]], points: &[[f64; 3]]) -> f64 {
    let all: Vec<&[f64; 3]> = camera_centers.iter().chain(points).collect();
    if all.is_empty() {
        return 1.0;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &all {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let c: [f64; 3] = std::array::from_fn(|a| 0.5 * (lo[a] + hi[a]));
    let r = all
        .iter()
        .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt())
        .fold(0.0, f64::max);
    if r > 0.0 {
        r
    } else {
        1.0
    }
}

/// Everything the loop consumes.
#[derive(Debug, Clone)]
pub struct TrainInputs {
    /// Training views with image, MVS depth and (optionally) monocular depth.
    pub views: Vec<View>,
    /// Consistency masks, one per view.
    pub masks: Vec<Vec<bool>>,
    pub init: GaussianSet,
    pub warp_cache: Option<WarpCache>,
    pub extent: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub gaussians: GaussianSet,
    pub telemetry: Vec<LossRecord>,
    pub densify: Vec<(usize, DensifyReport)>,
    /// Set when the warp cache had no usable entry and unseen iterations fell back.
    pub fwd_disabled: bool,
}

pub fn train(inputs: &TrainInputs, cfg: &TrainConfig) -> Result<TrainResult, TrainError> {
    train_with_callback(inputs, cfg, |_, _| {})
}

/// [`train`] with a hook called every `cfg.checkpoint_every` iterations.
pub fn train_with_callback(
    inputs: &TrainInputs,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &GaussianSet),
) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    let views = &inputs.views;
    if views.is_empty() {
        return Err(TrainError::TooFewViews { need: 1, got: 0 });
    }
    if inputs.masks.len() != views.len() {
        return Err(TrainError::ShapeMismatch("one consistency mask per view"));
    }
    let mut g = inputs.init.clone();
    let mut state = OptimizerState::new(&g);
    let mut stats = DensifyStats::new(g.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let usable = inputs.warp_cache.as_ref().map(WarpCache::usable).unwrap_or_default();
    let fwd_disabled = cfg.use_fwd && usable.is_empty();
    if fwd_disabled {
        eprintln!("warning: no usable forward warp; training without unseen-view supervision");
    }
    let mut telemetry = Vec::with_capacity(cfg.num_iters);
    let mut densify_log = Vec::new();
    for it in 1..=cfg.num_iters {
        let unseen = cfg.is_unseen_iter(it) && !fwd_disabled;
        let (cam, view_id) = if unseen {
            let cache = inputs.warp_cache.as_ref().unwrap();
            let k = usable[rng.random_range(0..usable.len())];
            (
                Camera {
                    intrinsics: cache.intrinsics,
                    pose: cache.poses[cache.entries[k].unseen],
                },
                k,
            )
        } else {
            let i = rng.random_range(0..views.len());
            (views[i].camera(), i)
        };
        let out = render(&g, &cam, &cfg.render).map_err(|source| TrainError::Render { iter: it, source })?;
        let npix = out.width * out.height;
        let loss_err = |source| TrainError::Loss { iter: it, source };
        let (parts, dcolor, ddepth) = if unseen {
            let cache = inputs.warp_cache.as_ref().unwrap();
            let warp = cache.entries[view_id]
                .result
                .as_ref()
                .expect("usable entry");
            let l = fwd_loss(&out.color, warp, &cfg.weights).map_err(loss_err)?;
            (LossParts::Unseen { fwd: l.value }, l.grad, vec![0.0; npix])
        } else {
            let v = &views[view_id];
            let photo = photometric_loss(&out.color, &v.image, &cfg.weights).map_err(loss_err)?;
            let mut ddepth = vec![0.0; npix];
            let mut cs = 0.0;
            if let Some(mvs) = v.mvs_depth.as_ref().filter(|_| cfg.weights.beta1 > 0.0) {
                let l = cs_loss(&out.depth, mvs, &inputs.masks[view_id]).map_err(loss_err)?;
                cs = l.value;
                for (d, g) in ddepth.iter_mut().zip(&l.grad) {
                    *d += cfg.weights.beta1 * g;
                }
            }
            let mut mono = 0.0;
            if let Some(md) = v.mono_depth.as_ref().filter(|_| cfg.weights.beta2 > 0.0) {
                match mono_rank_loss(&out.depth, md, cfg.weights.rank_batch, cfg.weights.rank_margin, &mut rng) {
                    Ok(l) => {
                        mono = l.value;
                        for (d, g) in ddepth.iter_mut().zip(&l.grad) {
                            *d += cfg.weights.beta2 * g;
                        }
                    }
                    Err(LossError::TooFewValidPixels { .. }) => {}
                    Err(e) => return Err(loss_err(e)),
                }
            }
            (
                LossParts::Train {
                    photo: photo.value,
                    cs,
                    mono,
                },
                photo.grad,
                ddepth,
            )
        };
        let total = total_loss(&parts, &cfg.weights);
        let non_finite = |what, gaussians| TrainError::NonFinite {
            what,
            iter: it,
            gaussians,
            view: view_id,
        };
        if !total.is_finite() {
            return Err(non_finite("loss", g.len()));
        }
        telemetry.push(LossRecord { iter: it, parts, total });
        let mut grads = render_backward(&g, &cam, &out, &dcolor, &ddepth)
            .map_err(|source| TrainError::Render { iter: it, source })?;
        if !grads.is_finite() {
            return Err(non_finite("gradient", g.len()));
        }
        if it < cfg.densify_until.max(cfg.densify_until_prune) {
            stats.accumulate(&grads, &out.radii(g.len()), out.width, out.height);
        }
        let window = it < cfg.densify_until || it < cfg.densify_until_prune;
        if window && it >= cfg.densify_from && it % cfg.densify_every == 0 {
            let (report, rows) =
                densify_and_prune(&mut g, &stats, &mut state, cfg, it, inputs.extent, &mut rng);
            grads = remap_grads(&grads, &rows, g.sh_stride());
            stats = DensifyStats::new(g.len());
            densify_log.push((it, report));
        }
        adam_step(&mut g, &grads, &mut state, &cfg.lr, inputs.extent, it, cfg.num_iters)?;
        if !g.is_finite() {
            return Err(non_finite("parameter", g.len()));
        }
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 {
            on_checkpoint(it, &g);
        }
    }
    Ok(TrainResult {
        gaussians: g,
        telemetry,
        densify: densify_log,
        fwd_disabled,
    })
}

fn remap_grads(gr: &GaussianGrads, rows: &[Option<usize>], sh_stride: usize) -> GaussianGrads {
    let n = rows.len();
    let mut out = GaussianGrads {
        positions: vec![[0.0; 3]; n],
        log_scales: vec![[0.0; 3]; n],
        rotations: vec![[0.0; 4]; n],
        opacity_logits: vec![0.0; n],
        sh_coeffs: vec![0.0; n * sh_stride],
        mean2d: vec![[0.0; 2]; n],
        visible: vec![false; n],
    };
    for (k, r) in rows.iter().enumerate() {
        if let Some(i) = *r {
            out.positions[k] = gr.positions[i];
            out.log_scales[k] = gr.log_scales[i];
            out.rotations[k] = gr.rotations[i];
            out.opacity_logits[k] = gr.opacity_logits[i];
            out.sh_coeffs[k * sh_stride..(k + 1) * sh_stride]
                .copy_from_slice(&gr.sh_coeffs[i * sh_stride..(i + 1) * sh_stride]);
            out.mean2d[k] = gr.mean2d[i];
            out.visible[k] = gr.visible[i];
        }
    }
    out
}

/// Summary written next to a trained checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config_hash: String,
    pub git_describe: String,
    pub final_metrics: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::logit;
    use nalgebra::{UnitQuaternion, Vector3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn set(n: usize) -> GaussianSet {
        let mut g = GaussianSet::empty(1);
        for i in 0..n {
            g.push(
                [i as f64 * 0.1, 0.0, 2.0],
                [-3.0; 3],
                [1.0, 0.0, 0.0, 0.0],
                logit(0.8),
                &[0.1; 12],
            );
        }
        g
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut g = set(3);
        let before = g.clone();
        let mut st = OptimizerState::new(&g);
        st.positions.m[0] = 1.0;
        let grads = GaussianGrads::zeros(&g);
        adam_step(&mut g, &grads, &mut st, &LearningRates::default(), 1.0, 1, 10).unwrap();
        assert!((st.positions.m[0] - 0.9).abs() < 1e-15);
        st.positions.m[0] = 0.0;
        let mut g2 = before.clone();
        let mut st2 = OptimizerState::new(&g2);
        adam_step(&mut g2, &grads, &mut st2, &LearningRates::default(), 1.0, 1, 10).unwrap();
        assert_eq!(g2, before);
    }

    #[test]
    fn first_step_is_lr_sign() {
        let mut a = AdamGroup::zeros(2);
        let mut p = [1.0, 1.0];
        a.step(&mut p, &[3.0, -0.02], 1, |_| 0.01).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-12);
        assert!((p[1] - 1.01).abs() < 1e-12);
        assert!(matches!(a.step(&mut p, &[1.0], 2, |_| 0.1), Err(TrainError::ShapeMismatch(_))));
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut a = AdamGroup::zeros(2);
        let mut p = [4.0, -2.0];
        let target = [1.0, 0.5];
        for t in 1..=2000 {
            let g = [2.0 * (p[0] - target[0]), 6.0 * (p[1] - target[1])];
            a.step(&mut p, &g, t, |_| 0.05).unwrap();
        }
        assert!((p[0] - target[0]).abs() < 1e-6 && (p[1] - target[1]).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn position_schedule_endpoints() {
        let lr = LearningRates::default();
        assert!((lr.position_at(0, 100) - 1.6e-4).abs() < 1e-18);
        assert!((lr.position_at(100, 100) - 1.6e-6).abs() < 1e-18);
        assert!((lr.position_at(50, 100) - 1.6e-5).abs() < 1e-17);
    }

    #[test]
    fn densify_identity_when_quiet() {
        let mut g = set(4);
        let mut st = OptimizerState::new(&g);
        let stats = DensifyStats::new(4);
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let before = g.clone();
        let (r, rows) = densify_and_prune(&mut g, &stats, &mut st, &cfg, 600, 1.0, &mut rng);
        assert_eq!(r, DensifyReport::default());
        assert_eq!(g, before);
        assert_eq!(rows, vec![Some(0), Some(1), Some(2), Some(3)]);
    }

    #[test]
    fn clone_and_split() {
        let mut g = set(3);
        g.log_scales[2] = [0.0; 3];
        let mut st = OptimizerState::new(&g);
        st.positions.m.iter_mut().for_each(|m| *m = 1.0);
        let mut stats = DensifyStats::new(3);
        stats.grad_accum = vec![1.0, 0.0, 1.0];
        stats.count = vec![1, 1, 1];
        stats.pos_grad[0] = [0.0, 2.0, 0.0];
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (r, rows) = densify_and_prune(&mut g, &stats, &mut st, &cfg, 600, 10.0, &mut rng);
        assert_eq!((r.cloned, r.split, r.pruned), (1, 1, 0));
        assert_eq!(g.len(), 5);
        assert_eq!(rows, vec![Some(0), Some(1), None, None, None]);
        assert!(st.is_congruent(&g));
        // clone moved against the accumulated gradient by its scale
        let s = (-3.0f64).exp();
        assert!((g.positions[2][1] + s).abs() < 1e-12);
        assert!(st.positions.m[6..].iter().all(|&m| m == 0.0));
        for k in 3..5 {
            assert!((g.log_scales[k][0] + 1.6f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn prune_removes_transparent() {
        let mut g = set(5);
        g.opacity_logits[1] = logit(0.001);
        g.opacity_logits[3] = logit(0.004);
        let mut st = OptimizerState::new(&g);
        let stats = DensifyStats::new(5);
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (r, _) = densify_and_prune(&mut g, &stats, &mut st, &cfg, 600, 1.0, &mut rng);
        assert_eq!(r.pruned, 2);
        assert!((0..g.len()).all(|i| g.opacity(i) >= cfg.prune_opacity));
        assert!(st.is_congruent(&g));
        // pruning stops after its window
        let mut g2 = set(2);
        g2.opacity_logits[0] = logit(0.001);
        let mut st2 = OptimizerState::new(&g2);
        densify_and_prune(&mut g2, &DensifyStats::new(2), &mut st2, &cfg, 6000, 1.0, &mut rng);
        assert_eq!(g2.len(), 2);
    }

    #[test]
    fn unseen_pose_sampling() {
        let a = Pose::from_quaternion(&UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3), Vector3::new(1.0, 0.0, 0.0));
        let b = Pose::from_quaternion(&UnitQuaternion::from_euler_angles(-0.2, 0.4, 0.0), Vector3::new(0.0, 1.0, 0.0));
        assert_eq!(interpolate_unseen(&a, &b, 0.0, [0.0; 3]), a);
        let cfg = TrainConfig::default();
        let p1 = sample_unseen_poses(&[a, b], 1000, 2.0, &cfg, 9).unwrap();
        let p2 = sample_unseen_poses(&[a, b], 1000, 2.0, &cfg, 9).unwrap();
        assert_eq!(p1, p2);
        for p in &p1 {
            let r = p.rotation;
            assert!((r.transpose() * r - nalgebra::Matrix3::identity()).amax() < 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
        assert!(matches!(sample_unseen_poses(&[a], 3, 1.0, &cfg, 0), Err(TrainError::TooFewViews { .. })));
    }

    #[test]
    fn extent_of_points() {
        let e = scene_extent(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]], &[[1.0, 1.0, 0.0]]);
        assert!((e - 1.25f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn iteration_kinds() {
        let cfg = TrainConfig::default();
        let kinds: Vec<bool> = (1..=7).map(|i| cfg.is_unseen_iter(i)).collect();
        assert_eq!(kinds, vec![false, false, true, false, false, true, false]);
        let off = TrainConfig { use_fwd: false, ..cfg };
        assert!((1..=30).all(|i| !off.is_unseen_iter(i)));
        assert!(TrainConfig { unseen_interval: 1, ..cfg }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn densify_keeps_state_congruent(seed in 0u64..1000, n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = set(n);
            for i in 0..n {
                g.log_scales[i] = [rng.random_range(-6.0..0.5); 3];
                g.opacity_logits[i] = rng.random_range(-8.0..3.0);
            }
            let mut st = OptimizerState::new(&g);
            let mut stats = DensifyStats::new(n);
            for i in 0..n {
                stats.grad_accum[i] = rng.random_range(0.0..5e-4);
                stats.count[i] = 1;
            }
            let cfg = TrainConfig::default();
            densify_and_prune(&mut g, &stats, &mut st, &cfg, 600, 1.0, &mut rng);
            prop_assert!(st.is_congruent(&g));
            prop_assert!(g.is_consistent());
            // pruning is skipped only when it would empty the set
            let opaque = (0..g.len()).filter(|&i| g.opacity(i) >= cfg.prune_opacity).count();
            prop_assert!(opaque == g.len() || opaque == 0);
        }
    }
}
