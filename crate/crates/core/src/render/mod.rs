//! Tile-based differentiable splatting of a [`GaussianSet`].
//!
//! The forward pass bins projected Gaussians into square tiles, sorts each
//! tile front-to-back by `(depth, index)` and alpha-composites color and
//! camera-space depth per pixel. The backward pass walks the same sorted
//! lists front-to-back a second time and chains pixel gradients down to all
//! five parameter arrays.
//!
//! A Gaussian only touches pixels inside its `extent_sigma` ellipse, so the
//! result does not depend on the tile size.

pub mod gaussians;
pub mod project;
pub mod sh;

use std::hash::{Hash, Hasher};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{Camera, DepthMap, DepthRole, Image};
pub use gaussians::{logit, sigmoid, GaussianSet};
use project::{normalize_quat, projection_jacobian, quat_rotation_jacobian, quat_to_rotation, COV2D_DILATION};
use sh::{basis_with_grad, num_coeffs};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RenderError {
    #[error("cannot render an empty gaussian set")]
    Empty,
    #[error("gaussian set arrays disagree on the row count")]
    Inconsistent,
    #[error("gradient buffer has {got} entries, expected {expected}")]
    GradientShape { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub tile_size: usize,
    pub z_near: f64,
    pub alpha_max: f64,
    pub alpha_min: f64,
    pub transmittance_min: f64,
    /// Footprint radius in standard deviations.
    pub extent_sigma: f64,
    /// Divide blended depth by the accumulated alpha.
    pub normalize_depth: bool,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            z_near: 0.01,
            alpha_max: 0.99,
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            extent_sigma: 3.0,
            normalize_depth: false,
            background: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub visible: usize,
    pub culled: usize,
    pub degenerate: usize,
}

/// Screen-space data for one Gaussian that survived projection.
#[derive(Debug, Clone, Copy)]
struct Splat {
    index: u32,
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
    radius: f64,
    /// Inclusive pixel box `[x0, y0, x1, y1]` of the 3-sigma support.
    bbox: [usize; 4],
    tiles: [usize; 4],
}

impl Splat {
    #[inline]
    fn covers_x(&self, px: usize) -> bool {
        self.bbox[0] <= px && px <= self.bbox[2]
    }
}

/// Positions in `list` of the splats whose pixel box spans row `py`.
fn row_positions(splats: &[Splat], list: &[u32], py: usize) -> Vec<u32> {
    list.iter()
        .enumerate()
        .filter(|&(_, &si)| {
            let b = splats[si as usize].bbox;
            b[1] <= py && py <= b[3]
        })
        .map(|(k, _)| k as u32)
        .collect()
}

#[derive(Debug, Clone)]
struct RenderCache {
    cfg: RenderConfig,
    splats: Vec<Splat>,
    tile_lists: Vec<Vec<u32>>,
    tiles_x: usize,
    final_t: Vec<f64>,
    last_contrib: Vec<u32>,
    depth_raw: Vec<f64>,
}

/// Color, depth and accumulated alpha of one render plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// `h x w x 3`, background included.
    pub color: Vec<f64>,
    /// Blended camera-space depth, `h x w`.
    pub depth: Vec<f64>,
    /// `sum_i T_i alpha_i` per pixel.
    pub alpha: Vec<f64>,
    pub stats: RenderStats,
    cache: RenderCache,
}

impl RenderOutput {
    pub fn color_image(&self) -> Image {
        Image::from_f64(self.width, self.height, &self.color)
    }

    /// Rendered depth; pixels nothing was blended into are invalid.
    pub fn depth_map(&self) -> DepthMap {
        let mut d = DepthMap::from_depths(self.width, self.height, self.depth.clone(), DepthRole::Rendered);
        for (v, &a) in d.valid.iter_mut().zip(&self.alpha) {
            *v &= a > 0.0;
        }
        d
    }

    /// Maximum screen radius per Gaussian (0 when not visible).
    pub fn radii(&self, n: usize) -> Vec<f64> {
        let mut r = vec![0.0; n];
        for s in &self.cache.splats {
            r[s.index as usize] = s.radius;
        }
        r
    }

    /// Hash of the active set: which Gaussians contribute to which pixel, in
    /// which order, and which clamps are engaged. Two renders with equal
    /// signatures lie on the same smooth branch of the image function.
    pub fn contribution_signature(&self) -> u64 {
        let c = &self.cache;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for s in &c.splats {
            s.index.hash(&mut h);
            for ch in s.color {
                (ch < 0.0).hash(&mut h);
            }
        }
        let ts = c.cfg.tile_size;
        for py in 0..self.height {
            for px in 0..self.width {
                let pix = py * self.width + px;
                let list = &c.tile_lists[(py / ts) * c.tiles_x + px / ts];
                let last = c.last_contrib[pix] as usize;
                for &si in &list[..last] {
                    let s = &c.splats[si as usize];
                    if !(s.covers_x(px) && s.bbox[1] <= py && py <= s.bbox[3]) {
                        continue;
                    }
                    if let Some(e) = eval_splat(s, px as f64, py as f64, &c.cfg) {
                        s.index.hash(&mut h);
                        e.clamped.hash(&mut h);
                    }
                }
                (last, list.len()).hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Per-parameter gradients, congruent with [`GaussianSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrads {
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    pub sh_coeffs: Vec<f64>,
    /// Gradient with respect to the projected pixel-space mean.
    pub mean2d: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl GaussianGrads {
    pub fn zeros(g: &GaussianSet) -> Self {
        let n = g.len();
        Self {
            positions: vec![[0.0; 3]; n],
            log_scales: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            opacity_logits: vec![0.0; n],
            sh_coeffs: vec![0.0; g.sh_coeffs.len()],
            mean2d: vec![[0.0; 2]; n],
            visible: vec![false; n],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().flatten().all(|v| v.is_finite())
            && self.log_scales.iter().flatten().all(|v| v.is_finite())
            && self.rotations.iter().flatten().all(|v| v.is_finite())
            && self.opacity_logits.iter().all(|v| v.is_finite())
            && self.sh_coeffs.iter().all(|v| v.is_finite())
    }
}

/// Everything about one Gaussian in one camera that forward and backward share.
struct Prepared {
    w2c: Matrix3<f64>,
    mean_cam: Vector3<f64>,
    jac: Matrix2x3<f64>,
    cov_cam: Matrix3<f64>,
    cov2d: Matrix2<f64>,
    rot: Matrix3<f64>,
    qn: [f64; 4],
    qnorm: f64,
    scales: [f64; 3],
    view: Vector3<f64>,
    color_raw: [f64; 3],
    opacity: f64,
    mean_px: [f64; 2],
}

enum Prep {
    Ok(Box<Prepared>),
    Culled,
    Degenerate,
}

fn prepare(g: &GaussianSet, i: usize, cam: &Camera, cfg: &RenderConfig) -> Prep {
    let k = &cam.intrinsics;
    let w2c = cam.pose.rotation.transpose();
    let mu = Vector3::from(g.positions[i]);
    let mean_cam = w2c * (mu - cam.pose.translation);
    if !(mean_cam.z > cfg.z_near) {
        return Prep::Culled;
    }
    let (qn, qnorm) = normalize_quat(g.rotations[i]);
    let rot = quat_to_rotation(qn);
    let scales = g.scales(i);
    let m = rot * Matrix3::from_diagonal(&Vector3::from(scales));
    let cov = m * m.transpose();
    let cov_cam = w2c * cov * w2c.transpose();
    let jac = projection_jacobian(&mean_cam, k);
    let cov2d = jac * cov_cam * jac.transpose() + Matrix2::identity() * COV2D_DILATION;
    let det = cov2d.determinant();
    if !(det > 0.0) || !det.is_finite() || !qnorm.is_finite() || qnorm == 0.0 {
        return Prep::Degenerate;
    }
    let view = mu - cam.pose.translation;
    let vn = view.norm();
    let dir = [view.x / vn, view.y / vn, view.z / vn];
    let color_raw = sh::eval_sh_unclamped(g.sh(i), g.sh_degree, dir);
    Prep::Ok(Box::new(Prepared {
        w2c,
        mean_cam,
        jac,
        cov_cam,
        cov2d,
        rot,
        qn,
        qnorm,
        scales,
        view,
        color_raw,
        opacity: g.opacity(i),
        mean_px: [
            k.fx * mean_cam.x / mean_cam.z + k.cx,
            k.fy * mean_cam.y / mean_cam.z + k.cy,
        ],
    }))
}

fn make_splat(i: usize, p: &Prepared, cam: &Camera, cfg: &RenderConfig) -> Option<Splat> {
    let (a, b, c) = (p.cov2d[(0, 0)], p.cov2d[(0, 1)], p.cov2d[(1, 1)]);
    let det = a * c - b * b;
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let radius = cfg.extent_sigma * lambda_max.sqrt();
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let [mx, my] = p.mean_px;
    let x0 = (mx - radius).ceil().max(0.0);
    let y0 = (my - radius).ceil().max(0.0);
    let x1 = (mx + radius).floor().min((w - 1) as f64);
    let y1 = (my + radius).floor().min((h - 1) as f64);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    let ts = cfg.tile_size;
    Some(Splat {
        index: i as u32,
        mean: p.mean_px,
        conic: [c / det, -b / det, a / det],
        opacity: p.opacity,
        color: p.color_raw.map(|v| v.max(0.0)),
        depth: p.mean_cam.z,
        radius,
        bbox: [x0 as usize, y0 as usize, x1 as usize, y1 as usize],
        tiles: [
            x0 as usize / ts,
            y0 as usize / ts,
            x1 as usize / ts,
            y1 as usize / ts,
        ],
    })
}

struct SplatEval {
    alpha: f64,
    gauss: f64,
    dx: f64,
    dy: f64,
    clamped: bool,
}

#[inline]
fn eval_splat(s: &Splat, px: f64, py: f64, cfg: &RenderConfig) -> Option<SplatEval> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let power = 0.5 * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) + s.conic[1] * dx * dy;
    if !(power <= 0.5 * cfg.extent_sigma * cfg.extent_sigma) {
        return None;
    }
    let gauss = (-power).exp();
    let raw = s.opacity * gauss;
    let clamped = raw > cfg.alpha_max;
    let alpha = if clamped { cfg.alpha_max } else { raw };
    if alpha < cfg.alpha_min {
        return None;
    }
    Some(SplatEval {
        alpha,
        gauss,
        dx,
        dy,
        clamped,
    })
}

struct PixelOut {
    color: [f64; 3],
    depth: f64,
    t: f64,
    last: u32,
}

/// Composites the splats of `list` at the positions in `row` that cover the pixel.
fn shade_pixel(splats: &[Splat], list: &[u32], row: &[u32], px: usize, py: usize, cfg: &RenderConfig) -> PixelOut {
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut last = 0;
    for &k in row {
        let s = &splats[list[k as usize] as usize];
        if !s.covers_x(px) {
            continue;
        }
        let Some(e) = eval_splat(s, px as f64, py as f64, cfg) else {
            last = k as u32 + 1;
            continue;
        };
        let next_t = t * (1.0 - e.alpha);
        if next_t < cfg.transmittance_min {
            break;
        }
        let w = e.alpha * t;
        for c in 0..3 {
            color[c] += s.color[c] * w;
        }
        depth += s.depth * w;
        t = next_t;
        last = k as u32 + 1;
    }
    for c in 0..3 {
        color[c] += t * cfg.background[c];
    }
    PixelOut { color, depth, t, last }
}

/// Forward pass: color (blend of SH radiance) and depth (blend of camera z).
pub fn render(g: &GaussianSet, cam: &Camera, cfg: &RenderConfig) -> Result<RenderOutput, RenderError> {
    if g.is_empty() {
        return Err(RenderError::Empty);
    }
    if !g.is_consistent() {
        return Err(RenderError::Inconsistent);
    }
    let (w, h) = cam.intrinsics.dims();
    let ts = cfg.tile_size.max(1);
    let cfg = RenderConfig { tile_size: ts, ..*cfg };
    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);

    let prepared: Vec<(Prep, Option<Splat>)> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let p = prepare(g, i, cam, &cfg);
            let s = match &p {
                Prep::Ok(pp) => make_splat(i, pp, cam, &cfg),
                _ => None,
            };
            (p, s)
        })
        .collect();
    let mut stats = RenderStats::default();
    let mut splats = Vec::new();
    for (p, s) in prepared {
        match p {
            Prep::Culled => stats.culled += 1,
            Prep::Degenerate => stats.degenerate += 1,
            Prep::Ok(_) => {}
        }
        if let Some(s) = s {
            splats.push(s);
        }
    }
    stats.visible = splats.len();

    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let [tx0, ty0, tx1, ty1] = s.tiles;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tile_lists[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    tile_lists.par_iter_mut().for_each(|list| {
        list.sort_by(|&a, &b| {
            let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
            sa.depth.total_cmp(&sb.depth).then(sa.index.cmp(&sb.index))
        })
    });

    let tile_out: Vec<Vec<PixelOut>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let list = &tile_lists[tile];
            let mut out = Vec::with_capacity(ts * ts);
            for py in ty * ts..((ty + 1) * ts).min(h) {
                let row = row_positions(&splats, list, py);
                for px in tx * ts..((tx + 1) * ts).min(w) {
                    out.push(shade_pixel(&splats, list, &row, px, py, &cfg));
                }
            }
            out
        })
        .collect();

    let n = w * h;
    let mut color = vec![0.0; n * 3];
    let mut depth_raw = vec![0.0; n];
    let mut final_t = vec![1.0; n];
    let mut last_contrib = vec![0u32; n];
    for (tile, outs) in tile_out.into_iter().enumerate() {
        let (tx, ty) = (tile % tiles_x, tile / tiles_x);
        let mut it = outs.into_iter();
        for py in ty * ts..((ty + 1) * ts).min(h) {
            for px in tx * ts..((tx + 1) * ts).min(w) {
                let o = it.next().expect("tile pixel count");
                let pix = py * w + px;
                color[pix * 3..pix * 3 + 3].copy_from_slice(&o.color);
                depth_raw[pix] = o.depth;
                final_t[pix] = o.t;
                last_contrib[pix] = o.last;
            }
        }
    }
    let alpha: Vec<f64> = final_t.iter().map(|t| 1.0 - t).collect();
    let depth = if cfg.normalize_depth {
        depth_raw
            .iter()
            .zip(&alpha)
            .map(|(&d, &a)| if a > 0.0 { d / a } else { 0.0 })
            .collect()
    } else {
        depth_raw.clone()
    };
    Ok(RenderOutput {
        width: w,
        height: h,
        color,
        depth,
        alpha,
        stats,
        cache: RenderCache {
            cfg,
            splats,
            tile_lists,
            tiles_x,
            final_t,
            last_contrib,
            depth_raw,
        },
    })
}

/// Per-splat screen-space gradient: mean(2), conic(3), opacity, color(3), depth.
type ScreenGrad = [f64; 10];

fn add_grad(acc: &mut ScreenGrad, g: &ScreenGrad) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Backward pass: gradients of a scalar loss `L` given `dL/dcolor` (`h x w x 3`)
/// and `dL/ddepth` (`h x w`) for the render in `out`.
pub fn render_backward(
    g: &GaussianSet,
    cam: &Camera,
    out: &RenderOutput,
    dl_dcolor: &[f64],
    dl_ddepth: &[f64],
) -> Result<GaussianGrads, RenderError> {
    let (w, h) = (out.width, out.height);
    if dl_dcolor.len() != w * h * 3 {
        return Err(RenderError::GradientShape {
            expected: w * h * 3,
            got: dl_dcolor.len(),
        });
    }
    if dl_ddepth.len() != w * h {
        return Err(RenderError::GradientShape {
            expected: w * h,
            got: dl_ddepth.len(),
        });
    }
    let c = &out.cache;
    let cfg = &c.cfg;
    let ts = cfg.tile_size;

    let tile_grads: Vec<Vec<ScreenGrad>> = c
        .tile_lists
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut acc = vec![[0.0; 10]; list.len()];
            if list.is_empty() {
                return acc;
            }
            let (tx, ty) = (tile % c.tiles_x, tile / c.tiles_x);
            for py in ty * ts..((ty + 1) * ts).min(h) {
                let row = row_positions(&c.splats, list, py);
                for px in tx * ts..((tx + 1) * ts).min(w) {
                    let pix = py * w + px;
                    backward_pixel(c, out, list, &row, px, py, pix, dl_dcolor, dl_ddepth, &mut acc);
                }
            }
            acc
        })
        .collect();

    // Merge in canonical tile order so the result is independent of scheduling.
    let mut screen = vec![[0.0; 10]; c.splats.len()];
    for (list, acc) in c.tile_lists.iter().zip(&tile_grads) {
        for (&si, gacc) in list.iter().zip(acc) {
            add_grad(&mut screen[si as usize], gacc);
        }
    }

    let per_splat: Vec<(usize, Chained)> = c
        .splats
        .par_iter()
        .zip(screen.par_iter())
        .filter_map(|(s, sg)| {
            let i = s.index as usize;
            match prepare(g, i, cam, cfg) {
                Prep::Ok(p) => Some((i, chain_gaussian(g, i, cam, &p, sg))),
                _ => None,
            }
        })
        .collect();

    let mut grads = GaussianGrads::zeros(g);
    let stride = g.sh_stride();
    for (i, ch) in per_splat {
        grads.positions[i] = ch.position;
        grads.log_scales[i] = ch.log_scale;
        grads.rotations[i] = ch.rotation;
        grads.opacity_logits[i] = ch.opacity_logit;
        grads.sh_coeffs[i * stride..(i + 1) * stride].copy_from_slice(&ch.sh[..stride]);
        grads.mean2d[i] = ch.mean2d;
        grads.visible[i] = true;
    }
    Ok(grads)
}

#[allow(clippy::too_many_arguments)]
fn backward_pixel(
    c: &RenderCache,
    out: &RenderOutput,
    list: &[u32],
    row: &[u32],
    px: usize,
    py: usize,
    pix: usize,
    dl_dcolor: &[f64],
    dl_ddepth: &[f64],
    acc: &mut [ScreenGrad],
) {
    let cfg = &c.cfg;
    let gc = [dl_dcolor[pix * 3], dl_dcolor[pix * 3 + 1], dl_dcolor[pix * 3 + 2]];
    let gd_out = dl_ddepth[pix];
    let a_final = 1.0 - c.final_t[pix];
    let d_final = c.depth_raw[pix];
    // Normalized depth d/A feeds gradient to both the raw depth sum and A.
    let (gd, ga) = if cfg.normalize_depth && a_final > 0.0 {
        (gd_out / a_final, -gd_out * d_final / (a_final * a_final))
    } else if cfg.normalize_depth {
        (0.0, 0.0)
    } else {
        (gd_out, 0.0)
    };
    if gc == [0.0; 3] && gd == 0.0 && ga == 0.0 {
        return;
    }
    let c_final = [out.color[pix * 3], out.color[pix * 3 + 1], out.color[pix * 3 + 2]];
    let last = c.last_contrib[pix] as usize;
    let mut t = 1.0;
    let mut c_acc = [0.0; 3];
    let mut d_acc = 0.0;
    let mut a_acc = 0.0;
    for &k in row.iter().take_while(|&&k| (k as usize) < last) {
        let k = k as usize;
        let s = &c.splats[list[k] as usize];
        if !s.covers_x(px) {
            continue;
        }
        let Some(e) = eval_splat(s, px as f64, py as f64, cfg) else {
            continue;
        };
        let wgt = e.alpha * t;
        let inv = 1.0 / (1.0 - e.alpha);
        let mut dl_dalpha = 0.0;
        for ch in 0..3 {
            c_acc[ch] += s.color[ch] * wgt;
            let behind = c_final[ch] - c_acc[ch];
            dl_dalpha += gc[ch] * (s.color[ch] * t - behind * inv);
        }
        d_acc += s.depth * wgt;
        dl_dalpha += gd * (s.depth * t - (d_final - d_acc) * inv);
        a_acc += wgt;
        dl_dalpha += ga * (t - (a_final - a_acc) * inv);

        let gacc = &mut acc[k];
        gacc[6] += gc[0] * wgt;
        gacc[7] += gc[1] * wgt;
        gacc[8] += gc[2] * wgt;
        gacc[9] += gd * wgt;
        if !e.clamped {
            gacc[5] += dl_dalpha * e.gauss;
            let dl_dpower = -dl_dalpha * s.opacity * e.gauss;
            let (dx, dy) = (e.dx, e.dy);
            gacc[0] += -dl_dpower * (s.conic[0] * dx + s.conic[1] * dy);
            gacc[1] += -dl_dpower * (s.conic[1] * dx + s.conic[2] * dy);
            gacc[2] += dl_dpower * 0.5 * dx * dx;
            gacc[3] += dl_dpower * dx * dy;
            gacc[4] += dl_dpower * 0.5 * dy * dy;
        }
        t *= 1.0 - e.alpha;
    }
}

struct Chained {
    position: [f64; 3],
    log_scale: [f64; 3],
    rotation: [f64; 4],
    opacity_logit: f64,
    sh: [f64; 48],
    mean2d: [f64; 2],
}

fn chain_gaussian(g: &GaussianSet, i: usize, cam: &Camera, p: &Prepared, sg: &ScreenGrad) -> Chained {
    let k = &cam.intrinsics;
    let [gmx, gmy, gca, gcb, gcc, gop, gr, ggr, gb, gdepth] = *sg;

    // radiance -> SH coefficients and view direction
    let mut dcolor = [gr, ggr, gb];
    for ch in 0..3 {
        if p.color_raw[ch] < 0.0 {
            dcolor[ch] = 0.0;
        }
    }
    let vn = p.view.norm();
    let dir = [p.view.x / vn, p.view.y / vn, p.view.z / vn];
    let (basis, bgrad) = basis_with_grad(g.sh_degree, dir);
    let coeffs = g.sh(i);
    let mut sh = [0.0; 48];
    let mut ddir = Vector3::zeros();
    for kk in 0..num_coeffs(g.sh_degree) {
        let mut proj = 0.0;
        for ch in 0..3 {
            sh[kk * 3 + ch] = basis[kk] * dcolor[ch];
            proj += coeffs[kk * 3 + ch] * dcolor[ch];
        }
        ddir += Vector3::from(bgrad[kk]) * proj;
    }
    let dirv = Vector3::from(dir);
    let mut dmu = (ddir - dirv * dirv.dot(&ddir)) / vn;

    let opacity_logit = gop * p.opacity * (1.0 - p.opacity);

    // conic -> screen covariance
    let (a, b, cc) = (p.cov2d[(0, 0)], p.cov2d[(0, 1)], p.cov2d[(1, 1)]);
    let det = a * cc - b * b;
    let d2 = det * det;
    let da = (-cc * cc * gca + b * cc * gcb - b * b * gcc) / d2;
    let db = (2.0 * b * cc * gca - (a * cc + b * b) * gcb + 2.0 * a * b * gcc) / d2;
    let dc = (-b * b * gca + a * b * gcb - a * a * gcc) / d2;
    let g2 = Matrix2::new(da, 0.5 * db, 0.5 * db, dc);

    // screen covariance -> camera covariance and Jacobian
    let d_cov_cam = p.jac.transpose() * g2 * p.jac;
    let d_jac = 2.0 * g2 * p.jac * p.cov_cam;
    let d_cov = p.w2c.transpose() * d_cov_cam * p.w2c;

    // mean and Jacobian -> camera-frame mean
    let (x, y, z) = (p.mean_cam.x, p.mean_cam.y, p.mean_cam.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let dmc = Vector3::new(
        gmx * k.fx * iz - d_jac[(0, 2)] * k.fx * iz2,
        gmy * k.fy * iz - d_jac[(1, 2)] * k.fy * iz2,
        -gmx * k.fx * x * iz2 - gmy * k.fy * y * iz2 - d_jac[(0, 0)] * k.fx * iz2
            + d_jac[(0, 2)] * 2.0 * k.fx * x * iz3
            - d_jac[(1, 1)] * k.fy * iz2
            + d_jac[(1, 2)] * 2.0 * k.fy * y * iz3
            + gdepth,
    );
    dmu += p.w2c.transpose() * dmc;

    // world covariance -> scale and rotation
    let s = Matrix3::from_diagonal(&Vector3::from(p.scales));
    let m = p.rot * s;
    let dm = 2.0 * d_cov * m;
    let mut log_scale = [0.0; 3];
    for kk in 0..3 {
        let ds: f64 = (0..3).map(|j| p.rot[(j, kk)] * dm[(j, kk)]).sum();
        log_scale[kk] = ds * p.scales[kk];
    }
    let dr = dm * s;
    let jq = quat_rotation_jacobian(p.qn);
    let dqn: [f64; 4] = std::array::from_fn(|kk| dr.component_mul(&jq[kk]).sum());
    let dot: f64 = (0..4).map(|kk| dqn[kk] * p.qn[kk]).sum();
    let rotation = std::array::from_fn(|kk| (dqn[kk] - p.qn[kk] * dot) / p.qnorm);

    Chained {
        position: [dmu.x, dmu.y, dmu.z],
        log_scale,
        rotation,
        opacity_logit,
        sh,
        mean2d: [gmx, gmy],
    }
}
