//! Forward warping with reversed bilinear splatting and soft depth ordering,
//! plus the backward-warping baseline.
//!
//! Every valid source pixel is lifted with its depth, moved into the target
//! camera and scattered onto its four nearest target pixel centers. Closer
//! points dominate through the weight `(1 + d)^-gamma` with
//! `gamma = 50 / ln(1 + d_max)`, recomputed per call from the depths that
//! survive the frustum cull.

use nalgebra::Point2;

use crate::geometry::{
    backproject, bilinear_sample, project, relative_transform, transform_point, DepthMap, Image,
    Intrinsics, Pose,
};

/// Points at or in front of this camera depth are dropped.
pub const Z_NEAR: f64 = 1e-4;
/// A target pixel is covered when its summed bilinear weight exceeds this.
pub const COVERAGE_EPS: f64 = 1e-12;
pub const GAMMA_SCALE: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WarpError {
    #[error("depth {0} is not positive")]
    NonPositiveDepth(f64),
    #[error("gamma {0} is not positive")]
    NonPositiveGamma(f64),
    #[error("source depth map has no valid pixel")]
    EmptyDepth,
    #[error("no source pixel projects into the target frustum")]
    AllPointsCulled,
    #[error("image is {image:?} but depth map is {depth:?}")]
    DimensionMismatch {
        image: (usize, usize),
        depth: (usize, usize),
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub image: Image,
    pub coverage: Vec<bool>,
    /// Denominator of the weighted average per target pixel.
    pub accum_weight: Vec<f64>,
    /// Depth-ordering exponent used (0 for backward warps).
    pub gamma: f64,
}

impl WarpResult {
    pub fn covered_count(&self) -> usize {
        self.coverage.iter().filter(|&&c| c).count()
    }

    pub fn coverage_fraction(&self) -> f64 {
        self.covered_count() as f64 / self.coverage.len() as f64
    }
}

/// A source pixel after transfer into the target view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpedPoint {
    pub pixel: Point2<f64>,
    pub depth: f64,
    pub color: [f64; 3],
}

/// The (up to) four in-image pixel centers around `p` with weights
/// `(1 - |i - x|)(1 - |j - y|)`.
pub fn splat_weights(
    p: &Point2<f64>,
    width: usize,
    height: usize,
) -> impl Iterator<Item = ((usize, usize), f64)> {
    let x0 = p.x.floor();
    let y0 = p.y.floor();
    let (px, py) = (p.x, p.y);
    [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
        .into_iter()
        .filter_map(move |(ox, oy)| {
            let i = x0 + ox;
            let j = y0 + oy;
            if i < 0.0 || j < 0.0 || i >= width as f64 || j >= height as f64 {
                return None;
            }
            let w = (1.0 - (i - px).abs()) * (1.0 - (j - py).abs());
            Some(((i as usize, j as usize), w))
        })
}

pub fn depth_weight(depth: f64, gamma: f64) -> Result<f64, WarpError> {
    if !(depth > 0.0) {
        return Err(WarpError::NonPositiveDepth(depth));
    }
    if !(gamma > 0.0) {
        return Err(WarpError::NonPositiveGamma(gamma));
    }
    Ok((-gamma * depth.ln_1p()).exp())
}

pub fn gamma_for_max_depth(d_max: f64) -> f64 {
    GAMMA_SCALE / d_max.ln_1p()
}

/// Lifts every valid source pixel into the target view, in row-major order,
/// dropping points behind `Z_NEAR` or with no in-image neighbor.
pub fn transfer_points(
    src_image: &Image,
    src_depth: &DepthMap,
    src_pose: &Pose,
    tgt_pose: &Pose,
    k: &Intrinsics,
) -> Vec<WarpedPoint> {
    let rel = relative_transform(src_pose, tgt_pose);
    let (w, h) = (k.width as f64, k.height as f64);
    let mut out = Vec::with_capacity(src_depth.valid_count());
    for y in 0..src_depth.height {
        for x in 0..src_depth.width {
            let Some(d) = src_depth.get(x, y) else {
                continue;
            };
            let Ok(p_src) = backproject(&Point2::new(x as f64, y as f64), d, k) else {
                continue;
            };
            let p_tgt = transform_point(&rel, &p_src);
            if p_tgt.z <= Z_NEAR {
                continue;
            }
            let Ok(pt) = project(&p_tgt, k) else {
                continue;
            };
            if !(pt.x > -1.0 && pt.y > -1.0 && pt.x < w && pt.y < h) {
                continue;
            }
            let c = src_image.pixel(x, y);
            out.push(WarpedPoint {
                pixel: pt,
                depth: p_tgt.z,
                color: [c[0] as f64, c[1] as f64, c[2] as f64],
            });
        }
    }
    out
}

/// Accumulates transferred points into a `width x height` target with a fixed `gamma`.
pub fn splat_points(
    points: &[WarpedPoint],
    gamma: f64,
    width: usize,
    height: usize,
) -> Result<WarpResult, WarpError> {
    let n = width * height;
    let mut num = vec![0.0f64; n * 3];
    let mut den = vec![0.0f64; n];
    let mut mass = vec![0.0f64; n];
    for p in points {
        let wd = depth_weight(p.depth, gamma)?;
        for ((i, j), wb) in splat_weights(&p.pixel, width, height) {
            let idx = j * width + i;
            let wt = wb * wd;
            num[idx * 3] += wt * p.color[0];
            num[idx * 3 + 1] += wt * p.color[1];
            num[idx * 3 + 2] += wt * p.color[2];
            den[idx] += wt;
            mass[idx] += wb;
        }
    }
    let mut image = Image::new(width, height);
    let mut coverage = vec![false; n];
    for idx in 0..n {
        if mass[idx] > COVERAGE_EPS && den[idx] > 0.0 {
            coverage[idx] = true;
            for c in 0..3 {
                image.data[idx * 3 + c] = (num[idx * 3 + c] / den[idx]) as f32;
            }
        } else {
            den[idx] = 0.0;
        }
    }
    Ok(WarpResult {
        image,
        coverage,
        accum_weight: den,
        gamma,
    })
}

/// Synthesizes the appearance of `tgt_pose` from a source image and its depth.
pub fn forward_warp(
    src_image: &Image,
    src_depth: &DepthMap,
    src_pose: &Pose,
    tgt_pose: &Pose,
    k: &Intrinsics,
) -> Result<WarpResult, WarpError> {
    if src_image.dims() != src_depth.dims() {
        return Err(WarpError::DimensionMismatch {
            image: src_image.dims(),
            depth: src_depth.dims(),
        });
    }
    if src_depth.valid_count() == 0 {
        return Err(WarpError::EmptyDepth);
    }
    let points = transfer_points(src_image, src_depth, src_pose, tgt_pose, k);
    if points.is_empty() {
        return Err(WarpError::AllPointsCulled);
    }
    let d_max = points.iter().map(|p| p.depth).fold(0.0, f64::max);
    splat_points(&points, gamma_for_max_depth(d_max), k.width, k.height)
}

/// Fetches source colors using the target view's depth.
///
/// Where the target depth sees a background surface that is hidden behind a
/// foreground object in the source view, this copies the foreground color:
/// the ghosting forward warping avoids.
pub fn backward_warp(
    src_image: &Image,
    tgt_depth: &DepthMap,
    src_pose: &Pose,
    tgt_pose: &Pose,
    k: &Intrinsics,
) -> WarpResult {
    let rel = relative_transform(tgt_pose, src_pose);
    let (w, h) = tgt_depth.dims();
    let mut image = Image::new(w, h);
    let mut coverage = vec![false; w * h];
    let mut accum = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let Some(d) = tgt_depth.get(x, y) else {
                continue;
            };
            let Ok(p_tgt) = backproject(&Point2::new(x as f64, y as f64), d, k) else {
                continue;
            };
            let p_src = transform_point(&rel, &p_tgt);
            let Ok(uv) = project(&p_src, k) else {
                continue;
            };
            // absorb round-off on the border rows and columns
            let snap = |v: f64, hi: f64| {
                if v < 0.0 && v > -1e-9 {
                    0.0
                } else if v > hi && v < hi + 1e-9 {
                    hi
                } else {
                    v
                }
            };
            let uv = Point2::new(snap(uv.x, (w - 1) as f64), snap(uv.y, (h - 1) as f64));
            if let Ok(c) = bilinear_sample(src_image, &uv) {
                let idx = y * w + x;
                coverage[idx] = true;
                accum[idx] = 1.0;
                image.set_pixel(x, y, [c.x as f32, c.y as f32, c.z as f32]);
            }
        }
    }
    WarpResult {
        image,
        coverage,
        accum_weight: accum,
        gamma: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DepthRole;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    #[test]
    fn integer_landing() {
        let w: Vec<_> = splat_weights(&Point2::new(3.0, 7.0), 10, 10).collect();
        assert_eq!(w.len(), 4);
        assert_eq!(w[0], ((3, 7), 1.0));
        assert!(w[1..].iter().all(|(_, v)| *v == 0.0));
    }

    #[test]
    fn midpoint_landing() {
        let w: Vec<_> = splat_weights(&Point2::new(3.5, 7.5), 10, 10).collect();
        let px: Vec<_> = w.iter().map(|(p, _)| *p).collect();
        assert_eq!(px, vec![(3, 7), (4, 7), (3, 8), (4, 8)]);
        assert!(w.iter().all(|(_, v)| *v == 0.25));
    }

    #[test]
    fn out_of_image_neighbors_dropped() {
        let w: Vec<_> = splat_weights(&Point2::new(-0.5, 9.5), 10, 10).collect();
        assert_eq!(w, vec![((0, 9), 0.25)]);
    }

    #[test]
    fn depth_weight_values() {
        assert_eq!(depth_weight(1e-300, 3.0).unwrap(), 1.0);
        let g = gamma_for_max_depth(std::f64::consts::E - 1.0);
        assert!((g - 50.0).abs() < 1e-12);
        assert!(depth_weight(0.0, 1.0).is_err());
        assert!(depth_weight(1.0, 0.0).is_err());
    }

    #[test]
    fn two_contributors_near_wins() {
        // Both land exactly on pixel (2, 2); the near one is red.
        let pts = [
            WarpedPoint { pixel: Point2::new(2.0, 2.0), depth: 1.0, color: [1.0, 0.0, 0.0] },
            WarpedPoint { pixel: Point2::new(2.0, 2.0), depth: 10.0, color: [0.0, 0.0, 1.0] },
        ];
        let r = splat_points(&pts, 20.0, 5, 5).unwrap();
        let px = r.image.pixel(2, 2);
        // (11/2)^20 ≈ 6e14 relative weight
        let w_far = (2.0f64 / 11.0).powf(20.0);
        let want_red = 1.0 / (1.0 + w_far);
        assert!((px[0] as f64 - want_red).abs() < 1e-6);
        assert!((px[0] - 1.0).abs() < 1e-3 && px[2].abs() < 1e-3);
    }

    #[test]
    fn identity_warp_reproduces_source() {
        let (w, h) = (6, 5);
        let k = Intrinsics::centered(5.0, w, h).unwrap();
        let mut img = Image::new(w, h);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 37) % 101) as f32 / 100.0;
        }
        let depth: Vec<f64> = (0..w * h).map(|i| 1.0 + (i % 7) as f64 * 0.3).collect();
        let d = DepthMap::from_depths(w, h, depth, DepthRole::Mvs);
        let pose = Pose::from_translation(Vector3::new(0.3, -0.1, 2.0));
        let r = forward_warp(&img, &d, &pose, &pose, &k).unwrap();
        assert!(r.coverage.iter().all(|&c| c));
        assert_eq!(r.image, img);
        let b = backward_warp(&img, &d, &pose, &pose, &k);
        for (a, b) in b.image.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn all_culled_is_an_error() {
        let k = Intrinsics::centered(5.0, 4, 4).unwrap();
        let img = Image::new(4, 4);
        let d = DepthMap::from_depths(4, 4, vec![1.0; 16], DepthRole::Mvs);
        let behind = Pose::from_translation(Vector3::new(0.0, 0.0, 5.0));
        assert_eq!(
            forward_warp(&img, &d, &Pose::identity(), &behind, &k),
            Err(WarpError::AllPointsCulled)
        );
        let empty = DepthMap::empty(4, 4, DepthRole::Mvs);
        assert_eq!(forward_warp(&img, &empty, &Pose::identity(), &Pose::identity(), &k), Err(WarpError::EmptyDepth));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]
        #[test]
        fn interior_weights_sum_to_one(x in 0.0f64..9.0, y in 0.0f64..9.0) {
            let s: f64 = splat_weights(&Point2::new(x, y), 10, 10).map(|(_, w)| w).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(splat_weights(&Point2::new(x, y), 10, 10).all(|(_, w)| w >= 0.0));
        }

        #[test]
        fn depth_weight_decreasing(d1 in 0.01f64..50.0, dd in 1e-3f64..50.0, gamma in 0.5f64..60.0) {
            prop_assert!(depth_weight(d1, gamma).unwrap() > depth_weight(d1 + dd, gamma).unwrap());
        }
    }
}
