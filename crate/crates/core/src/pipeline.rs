//! End-to-end single-scene run: filter, fuse, initialize, warp, train, render, evaluate.

use serde::{Deserialize, Serialize};

use crate::geometry::{Camera, Image, View};
use crate::metrics::{evaluate, EvalReport, MetricsError};
use crate::mvs::{consistency_masks, fuse_point_cloud, init_gaussians, ConsistencyConfig, Fusion, MvsError};
use crate::render::{render, GaussianSet, RenderConfig, RenderError};
use crate::train::{
    build_warp_cache, sample_unseen_poses, scene_extent, train_with_callback, warp_depths, TrainConfig,
    TrainError, TrainInputs, TrainResult, WarpCache,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("filter stage: {0}")]
    Filter(#[source] MvsError),
    #[error("fusion stage: {0}")]
    Fusion(#[source] MvsError),
    #[error("warp stage: {0}")]
    Warp(#[source] TrainError),
    #[error("train stage: {0}")]
    Train(#[source] TrainError),
    #[error("render stage, view {view}: {source}")]
    Render {
        view: usize,
        #[source]
        source: RenderError,
    },
    #[error("eval stage: {0}")]
    Eval(#[source] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// `None` picks [`ConsistencyConfig::for_view_count`].
    pub consistency: Option<ConsistencyConfig>,
    pub train: TrainConfig,
}

impl PipelineConfig {
    pub fn consistency_for(&self, n_views: usize) -> ConsistencyConfig {
        self.consistency
            .unwrap_or_else(|| ConsistencyConfig::for_view_count(n_views))
    }
}

/// A held-out camera, with its ground-truth image when known.
#[derive(Debug, Clone)]
pub struct TestView {
    pub id: usize,
    pub camera: Camera,
    pub image: Option<Image>,
}

/// Everything derived from the training views before optimization starts.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub masks: Vec<Vec<bool>>,
    pub fusion: Fusion,
    pub init: GaussianSet,
    pub extent: f64,
    pub warp_cache: WarpCache,
}

/// Seed offset for unseen-pose sampling, so it is independent of the loop stream.
const POSE_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn prepare(views: &[View], cfg: &PipelineConfig) -> Result<Prepared, PipelineError> {
    let cc = cfg.consistency_for(views.len());
    let masks = consistency_masks(views, &cc).map_err(PipelineError::Filter)?;
    let fusion = fuse_point_cloud(views, &masks, &cc, cfg.train.seed).map_err(PipelineError::Fusion)?;
    let init = init_gaussians(&fusion.cloud, cfg.train.sh_degree);
    let centers: Vec<[f64; 3]> = views.iter().map(|v| v.pose.center().into()).collect();
    let extent = scene_extent(&centers, &fusion.cloud.positions);
    let poses: Vec<_> = views.iter().map(|v| v.pose).collect();
    let unseen = sample_unseen_poses(
        &poses,
        cfg.train.num_unseen_poses,
        extent,
        &cfg.train,
        cfg.train.seed ^ POSE_SEED_SALT,
    )
    .map_err(PipelineError::Warp)?;
    let depths = warp_depths(views, cfg.train.warp_filtered_depth.then_some(&masks[..]));
    let warp_cache = build_warp_cache(views, &depths, &unseen);
    Ok(Prepared {
        masks,
        fusion,
        init,
        extent,
        warp_cache,
    })
}

pub fn render_views(g: &GaussianSet, cams: &[TestView], cfg: &RenderConfig) -> Result<Vec<Image>, PipelineError> {
    cams.iter()
        .map(|t| {
            render(g, &t.camera, cfg)
                .map(|o| o.color_image())
                .map_err(|source| PipelineError::Render { view: t.id, source })
        })
        .collect()
}

/// Metrics over the test views that carry ground truth; `None` if none do.
pub fn evaluate_views(renders: &[Image], tests: &[TestView]) -> Result<Option<EvalReport>, PipelineError> {
    let mut r = Vec::new();
    let mut gt = Vec::new();
    let mut ids = Vec::new();
    for (img, t) in renders.iter().zip(tests) {
        if let Some(g) = &t.image {
            r.push(img.clone());
            gt.push(g.clone());
            ids.push(t.id);
        }
    }
    if gt.is_empty() {
        return Ok(None);
    }
    evaluate(&r, &gt, &ids).map(Some).map_err(PipelineError::Eval)
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub prepared: Prepared,
    pub trained: TrainResult,
    pub init_renders: Vec<Image>,
    pub renders: Vec<Image>,
    pub init_report: Option<EvalReport>,
    pub report: Option<EvalReport>,
}

pub fn run_pipeline(train: &[View], tests: &[TestView], cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    run_pipeline_with(train, tests, cfg, |_, _| {})
}

pub fn run_pipeline_with(
    train: &[View],
    tests: &[TestView],
    cfg: &PipelineConfig,
    on_checkpoint: impl FnMut(usize, &GaussianSet),
) -> Result<PipelineOutput, PipelineError> {
    let prepared = prepare(train, cfg)?;
    let init_renders = render_views(&prepared.init, tests, &cfg.train.render)?;
    let init_report = evaluate_views(&init_renders, tests)?;
    let inputs = TrainInputs {
        views: train.to_vec(),
        masks: prepared.masks.clone(),
        init: prepared.init.clone(),
        warp_cache: Some(prepared.warp_cache.clone()),
        extent: prepared.extent,
    };
    let trained = train_with_callback(&inputs, &cfg.train, on_checkpoint).map_err(PipelineError::Train)?;
    let renders = render_views(&trained.gaussians, tests, &cfg.train.render)?;
    let report = evaluate_views(&renders, tests)?;
    Ok(PipelineOutput {
        prepared,
        trained,
        init_renders,
        renders,
        init_report,
        report,
    })
}
