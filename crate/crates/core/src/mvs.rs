//! Geometric consistency filtering of ingested MVS depth maps, fusion into a
//! colored point cloud and Gaussian initialization from that cloud.

use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Point2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{backproject, project, Camera, DepthMap, View};
use crate::render::sh::rgb_to_dc;
use crate::render::{logit, GaussianSet};

pub const INIT_OPACITY: f64 = 0.1;
pub const MIN_SCALE: f64 = 1e-7;
pub const SCALE_NEIGHBORS: usize = 3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MvsError {
    #[error("pixel ({0}, {1}) has no valid reference depth")]
    InvalidPixel(usize, usize),
    #[error("point leaves the image or falls behind a camera")]
    OutOfFrustum,
    #[error("source depth is invalid at the landing pixel")]
    Occluded,
    #[error("need at least {need} views, got {got}")]
    TooFewViews { need: usize, got: usize },
    #[error("view {0} has no MVS depth")]
    MissingDepth(usize),
    #[error("mask {view} has {got} entries, expected {expected}")]
    MaskShape {
        view: usize,
        expected: usize,
        got: usize,
    },
    #[error("no pixel survives masking")]
    EmptyCloud,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyConfig {
    pub pixel_thresh: f64,
    pub rel_depth_thresh: f64,
    pub min_consistent_views: usize,
    pub downsample_rate: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            pixel_thresh: 1.0,
            rel_depth_thresh: 0.01,
            min_consistent_views: 2,
            downsample_rate: 0.1,
        }
    }
}

impl ConsistencyConfig {
    /// Default config with `min_consistent_views = min(2, n_views - 1)`, so
    /// that two-view inputs can still be filtered.
    pub fn for_view_count(n_views: usize) -> Self {
        Self {
            min_consistent_views: 2.min(n_views.saturating_sub(1)).max(1),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), MvsError> {
        if !(self.pixel_thresh > 0.0) || !(self.rel_depth_thresh > 0.0) {
            return Err(MvsError::InvalidConfig("thresholds must be positive".into()));
        }
        if self.min_consistent_views < 1 {
            return Err(MvsError::InvalidConfig("min_consistent_views must be >= 1".into()));
        }
        if !(self.downsample_rate > 0.0 && self.downsample_rate <= 1.0) {
            return Err(MvsError::InvalidConfig("downsample_rate must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    /// RGB in `[0, 1]`.
    pub colors: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Round trip of a reference pixel through a source view.
///
/// The source depth is read at the nearest pixel to the landing point, and
/// the point is lifted from the fractional landing coordinate with that
/// depth. Returns the reprojected pixel and its depth in the reference camera.
pub fn reproject(
    ref_cam: &Camera,
    ref_depth: &DepthMap,
    src_cam: &Camera,
    src_depth: &DepthMap,
    pixel: (usize, usize),
) -> Result<(Point2<f64>, f64), MvsError> {
    let (x, y) = pixel;
    let d1 = ref_depth.get(x, y).ok_or(MvsError::InvalidPixel(x, y))?;
    let kr = &ref_cam.intrinsics;
    let ks = &src_cam.intrinsics;
    let p_cam = backproject(&Point2::new(x as f64, y as f64), d1, kr)
        .map_err(|_| MvsError::InvalidPixel(x, y))?;
    let world = ref_cam.pose.camera_to_world(&p_cam);
    let in_src = src_cam.pose.world_to_camera(&world);
    let p_src = project(&in_src, ks).map_err(|_| MvsError::OutOfFrustum)?;
    let (sx, sy) = ks.nearest_pixel(&p_src).ok_or(MvsError::OutOfFrustum)?;
    let d_src = src_depth.get(sx, sy).ok_or(MvsError::Occluded)?;
    let back = backproject(&p_src, d_src, ks).map_err(|_| MvsError::Occluded)?;
    let world2 = src_cam.pose.camera_to_world(&back);
    let in_ref = ref_cam.pose.world_to_camera(&world2);
    let p_reproj = project(&in_ref, kr).map_err(|_| MvsError::OutOfFrustum)?;
    if kr.nearest_pixel(&p_reproj).is_none() {
        return Err(MvsError::OutOfFrustum);
    }
    Ok((p_reproj, in_ref.z))
}

pub fn passes(cfg: &ConsistencyConfig, pixel: (usize, usize), d1: f64, p: &Point2<f64>, d: f64) -> bool {
    let dx = p.x - pixel.0 as f64;
    let dy = p.y - pixel.1 as f64;
    (dx * dx + dy * dy).sqrt() < cfg.pixel_thresh && (d - d1).abs() / d1 < cfg.rel_depth_thresh
}

fn mvs_depth(views: &[View], i: usize) -> Result<&DepthMap, MvsError> {
    views[i].mvs_depth.as_ref().ok_or(MvsError::MissingDepth(i))
}

/// Per-view masks of pixels that agree with at least
/// `cfg.min_consistent_views` other views.
pub fn consistency_masks(views: &[View], cfg: &ConsistencyConfig) -> Result<Vec<Vec<bool>>, MvsError> {
    cfg.validate()?;
    let need = cfg.min_consistent_views + 1;
    if views.len() < need {
        return Err(MvsError::TooFewViews {
            need,
            got: views.len(),
        });
    }
    for i in 0..views.len() {
        mvs_depth(views, i)?;
    }
    Ok((0..views.len())
        .into_par_iter()
        .map(|i| {
            let ref_cam = views[i].camera();
            let ref_depth = views[i].mvs_depth.as_ref().unwrap();
            let (w, h) = ref_depth.dims();
            let mut mask = vec![false; w * h];
            for y in 0..h {
                for x in 0..w {
                    let Some(d1) = ref_depth.get(x, y) else {
                        continue;
                    };
                    let agree = (0..views.len())
                        .filter(|&j| j != i)
                        .filter(|&j| {
                            let src = views[j].mvs_depth.as_ref().unwrap();
                            reproject(&ref_cam, ref_depth, &views[j].camera(), src, (x, y))
                                .is_ok_and(|(p, d)| passes(cfg, (x, y), d1, &p, d))
                        })
                        .count();
                    mask[y * w + x] = agree >= cfg.min_consistent_views;
                }
            }
            mask
        })
        .collect())
}

/// Fused cloud plus the `(view, pixel index)` each point came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    pub cloud: PointCloud,
    pub sources: Vec<(usize, usize)>,
}

/// Backprojects every masked pixel in view-major, row-major order, then keeps
/// `round(rate * n)` of them (at least one) chosen uniformly with `seed`.
pub fn fuse_point_cloud(
    views: &[View],
    masks: &[Vec<bool>],
    cfg: &ConsistencyConfig,
    seed: u64,
) -> Result<Fusion, MvsError> {
    cfg.validate()?;
    let mut all = Fusion {
        cloud: PointCloud::default(),
        sources: Vec::new(),
    };
    for (vi, (view, mask)) in views.iter().zip(masks).enumerate() {
        let depth = mvs_depth(views, vi)?;
        let (w, h) = depth.dims();
        if mask.len() != w * h {
            return Err(MvsError::MaskShape {
                view: vi,
                expected: w * h,
                got: mask.len(),
            });
        }
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                let Some(d) = depth.get(x, y).filter(|_| mask[idx]) else {
                    continue;
                };
                let Ok(pc) = backproject(&Point2::new(x as f64, y as f64), d, &view.intrinsics) else {
                    continue;
                };
                let pw = view.pose.camera_to_world(&pc);
                let c = view.image.pixel(x, y);
                all.cloud.positions.push(pw.into());
                all.cloud
                    .colors
                    .push(c.map(|v| (v as f64).clamp(0.0, 1.0)));
                all.sources.push((vi, idx));
            }
        }
    }
    let n = all.cloud.len();
    if n == 0 {
        return Err(MvsError::EmptyCloud);
    }
    let keep = ((cfg.downsample_rate * n as f64).round() as usize).clamp(1, n);
    if keep == n {
        return Ok(all);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    picked.sort_unstable();
    let mut out = Fusion {
        cloud: PointCloud::default(),
        sources: Vec::with_capacity(keep),
    };
    for i in picked {
        out.cloud.positions.push(all.cloud.positions[i]);
        out.cloud.colors.push(all.cloud.colors[i]);
        out.sources.push(all.sources[i]);
    }
    Ok(out)
}

/// Mean distance from each point to its (up to) three nearest neighbors.
pub fn mean_neighbor_distance(positions: &[[f64; 3]]) -> Vec<f64> {
    let n = positions.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let k = SCALE_NEIGHBORS.min(n - 1);
    let Ok(tree) = ImmutableKdTree::<f64, 3>::new_from_slice(positions) else {
        return brute_force_neighbor_distance(positions, k);
    };
    positions
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut nn = tree
                .query(p)
                .nearest_n::<SquaredEuclidean<f64>>(NonZero::new(k + 1).unwrap())
                .execute();
            match nn.iter().position(|m| m.item as usize == i) {
                Some(self_pos) => {
                    nn.remove(self_pos);
                }
                None => {
                    nn.remove(0);
                }
            }
            nn.iter().take(k).map(|m| m.distance.sqrt()).sum::<f64>() / k as f64
        })
        .collect()
}

fn brute_force_neighbor_distance(positions: &[[f64; 3]], k: usize) -> Vec<f64> {
    positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = positions
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>().sqrt())
                .collect();
            d.sort_by(f64::total_cmp);
            d[..k].iter().sum::<f64>() / k as f64
        })
        .collect()
}

/// One isotropic Gaussian per cloud point.
pub fn init_gaussians(cloud: &PointCloud, sh_degree: usize) -> GaussianSet {
    let mut g = GaussianSet::empty(sh_degree);
    let dists = mean_neighbor_distance(&cloud.positions);
    let mut sh = vec![0.0; g.sh_stride()];
    for ((p, c), d) in cloud.positions.iter().zip(&cloud.colors).zip(dists) {
        let s = d.max(MIN_SCALE).ln();
        sh[..3].copy_from_slice(&c.map(rgb_to_dc));
        g.push(*p, [s; 3], [1.0, 0.0, 0.0, 0.0], logit(INIT_OPACITY), &sh);
    }
    g
}
