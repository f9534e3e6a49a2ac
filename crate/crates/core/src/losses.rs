//! Training losses and their gradients with respect to the rendered color
//! and depth buffers.
//!
//! Color buffers are row-major `h x w x 3` slices of `f64`; depth buffers are
//! `h x w`. Every differentiable loss returns its value together with the
//! gradient with respect to the rendered input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{DepthMap, Image};
use crate::warp::WarpResult;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const HALF: usize = SSIM_WINDOW / 2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("buffer has {got} values, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("rank loss needs {need} valid pixels, found {got}")]
    TooFewValidPixels { need: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub rank_batch: usize,
    pub rank_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.8,
            lambda2: 0.2,
            beta1: 0.1,
            beta2: 0.005,
            rank_batch: 512,
            rank_margin: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.lambda1) || !unit.contains(&self.lambda2) {
            return Err("lambda1 and lambda2 must lie in [0, 1]".into());
        }
        if !(self.beta1 >= 0.0 && self.beta2 >= 0.0) {
            return Err("beta1 and beta2 must be nonnegative".into());
        }
        if self.rank_batch == 0 {
            return Err("rank_batch must be at least 1".into());
        }
        if !(self.rank_margin >= 0.0) {
            return Err("rank_margin must be nonnegative".into());
        }
        Ok(())
    }
}

/// A loss value with its gradient. `empty` marks the defined fallback for an
/// empty mask or coverage, in which case the value is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
    pub empty: bool,
}

impl LossValue {
    fn zero(n: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; n],
            empty: true,
        }
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), LossError> {
    if expected != got {
        return Err(LossError::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    std::array::from_fn(|k| {
        let d = k as f64 - HALF as f64;
        (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    })
}

/// Separable Gaussian window clipped to the image and renormalized.
struct Window {
    taps: [f64; SSIM_WINDOW],
    w: usize,
    h: usize,
    inv_zx: Vec<f64>,
    inv_zy: Vec<f64>,
}

impl Window {
    fn new(w: usize, h: usize) -> Self {
        let taps = gaussian_taps();
        let inv = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|p| {
                    let lo = p.saturating_sub(HALF);
                    let hi = (p + HALF).min(n - 1);
                    1.0 / (lo..=hi).map(|q| taps[q + HALF - p]).sum::<f64>()
                })
                .collect()
        };
        Self {
            taps,
            w,
            h,
            inv_zx: inv(w),
            inv_zy: inv(h),
        }
    }

    /// `out(p) = sum_q w(p, q) src(q)`.
    fn apply(&self, src: &[f64]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for q in x.saturating_sub(HALF)..=(x + HALF).min(w - 1) {
                    s += self.taps[q + HALF - x] * src[y * w + q];
                }
                tmp[y * w + x] = s * self.inv_zx[x];
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for q in y.saturating_sub(HALF)..=(y + HALF).min(h - 1) {
                    s += self.taps[q + HALF - y] * tmp[q * w + x];
                }
                out[y * w + x] = s * self.inv_zy[y];
            }
        }
        out
    }

    /// `out(q) = sum_p w(p, q) src(p)`.
    fn apply_transpose(&self, src: &[f64]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for p in y.saturating_sub(HALF)..=(y + HALF).min(h - 1) {
                    s += self.taps[y + HALF - p] * src[p * w + x] * self.inv_zy[p];
                }
                tmp[y * w + x] = s;
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for p in x.saturating_sub(HALF)..=(x + HALF).min(w - 1) {
                    s += self.taps[x + HALF - p] * tmp[y * w + p] * self.inv_zx[p];
                }
                out[y * w + x] = s;
            }
        }
        out
    }
}

fn channel(data: &[f64], c: usize) -> Vec<f64> {
    data.iter().skip(c).step_by(3).copied().collect()
}

/// Result of [`ssim_with_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct Ssim {
    /// Mean over selected window centers and channels.
    pub mean: f64,
    /// Channel-averaged SSIM per window center.
    pub map: Vec<f64>,
    /// Gradient of `mean` with respect to the first image, when requested.
    pub grad: Option<Vec<f64>>,
    /// Number of window centers averaged.
    pub centers: usize,
}

/// SSIM of two `h x w x 3` buffers. `centers` selects which window centers
/// enter the mean; `None` selects all.
pub fn ssim_with_grad(
    a: &[f64],
    b: &[f64],
    w: usize,
    h: usize,
    centers: Option<&[bool]>,
    want_grad: bool,
) -> Result<Ssim, LossError> {
    let n = w * h;
    check_len(n * 3, a.len())?;
    check_len(n * 3, b.len())?;
    if let Some(m) = centers {
        check_len(n, m.len())?;
    }
    let win = Window::new(w, h);
    let count = centers.map_or(n, |m| m.iter().filter(|&&v| v).count());
    let mut map = vec![0.0; n];
    let mut grad = want_grad.then(|| vec![0.0; n * 3]);
    let mut total = 0.0;
    let up = if count > 0 { 1.0 / (3 * count) as f64 } else { 0.0 };
    for c in 0..3 {
        let ac = channel(a, c);
        let bc = channel(b, c);
        let aa: Vec<f64> = ac.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = bc.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = ac.iter().zip(&bc).map(|(x, y)| x * y).collect();
        let mu_a = win.apply(&ac);
        let mu_b = win.apply(&bc);
        let e_aa = win.apply(&aa);
        let e_bb = win.apply(&bb);
        let e_ab = win.apply(&ab);
        let mut d_mu = vec![0.0; n];
        let mut d_aa = vec![0.0; n];
        let mut d_ab = vec![0.0; n];
        for p in 0..n {
            let (ma, mb) = (mu_a[p], mu_b[p]);
            let var_a = e_aa[p] - ma * ma;
            let var_b = e_bb[p] - mb * mb;
            let cov = e_ab[p] - ma * mb;
            let a1 = 2.0 * ma * mb + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = ma * ma + mb * mb + SSIM_C1;
            let b2 = var_a + var_b + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            map[p] += s / 3.0;
            let selected = centers.is_none_or(|m| m[p]);
            if selected {
                total += s;
            }
            if want_grad && selected {
                let den = b1 * b2;
                d_mu[p] = up * ((2.0 * mb * a2 - 2.0 * mb * a1) / den - s * (2.0 * ma / b1 - 2.0 * ma / b2));
                d_aa[p] = up * (-s / b2);
                d_ab[p] = up * (2.0 * a1 / den);
            }
        }
        if let Some(g) = grad.as_mut() {
            let t_mu = win.apply_transpose(&d_mu);
            let t_aa = win.apply_transpose(&d_aa);
            let t_ab = win.apply_transpose(&d_ab);
            for q in 0..n {
                g[q * 3 + c] = t_mu[q] + 2.0 * ac[q] * t_aa[q] + bc[q] * t_ab[q];
            }
        }
    }
    let mean = if count > 0 { total / (3 * count) as f64 } else { 0.0 };
    Ok(Ssim {
        mean,
        map,
        grad,
        centers: count,
    })
}

/// SSIM of two images; `mask` drops windows centered on masked-out pixels.
pub fn ssim(a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<(f64, Vec<f64>), LossError> {
    check_len(a.data.len(), b.data.len())?;
    let s = ssim_with_grad(&a.to_f64(), &b.to_f64(), a.width, a.height, mask, false)?;
    Ok((s.mean, s.map))
}

/// Window centers whose clipped window lies entirely inside `coverage`.
pub fn eroded_centers(coverage: &[bool], w: usize, h: usize) -> Vec<bool> {
    // summed-area table of uncovered pixels
    let mut sat = vec![0usize; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            let hole = usize::from(!coverage[y * w + x]);
            sat[(y + 1) * (w + 1) + x + 1] =
                hole + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
        }
    }
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(HALF), (x + HALF).min(w - 1) + 1);
            let (y0, y1) = (y.saturating_sub(HALF), (y + HALF).min(h - 1) + 1);
            let holes = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0]
                - sat[y0 * (w + 1) + x1]
                - sat[y1 * (w + 1) + x0];
            out[y * w + x] = holes == 0;
        }
    }
    out
}

/// Mean absolute difference over pixels where `mask` holds (all channels).
fn masked_l1(a: &[f64], b: &[f64], mask: Option<&[bool]>) -> (f64, Vec<f64>, usize) {
    let n = a.len() / 3;
    let count = mask.map_or(n, |m| m.iter().filter(|&&v| v).count());
    let mut grad = vec![0.0; a.len()];
    if count == 0 {
        return (0.0, grad, 0);
    }
    let scale = 1.0 / (3 * count) as f64;
    let mut sum = 0.0;
    for p in 0..n {
        if mask.is_some_and(|m| !m[p]) {
            continue;
        }
        for c in 0..3 {
            let d = a[p * 3 + c] - b[p * 3 + c];
            sum += d.abs();
            grad[p * 3 + c] = scale * sign(d);
        }
    }
    (sum * scale, grad, count)
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `lambda1 * L1 + (1 - lambda1) * (1 - SSIM)` against a training image.
pub fn photometric_loss(
    rendered: &[f64],
    gt: &Image,
    w: &LossWeights,
) -> Result<LossValue, LossError> {
    check_len(gt.data.len(), rendered.len())?;
    let target = gt.to_f64();
    let (l1, g1, _) = masked_l1(rendered, &target, None);
    let s = ssim_with_grad(rendered, &target, gt.width, gt.height, None, true)?;
    let gs = s.grad.unwrap();
    let lam = w.lambda1;
    Ok(LossValue {
        value: lam * l1 + (1.0 - lam) * (1.0 - s.mean),
        grad: g1.iter().zip(&gs).map(|(a, b)| lam * a - (1.0 - lam) * b).collect(),
        empty: false,
    })
}

/// Loss against a forward-warped image, restricted to its coverage.
///
/// L1 averages covered pixels. SSIM is computed on hole-zeroed buffers and
/// averaged over window centers whose window lies inside the coverage; when
/// no such center exists the SSIM term is omitted.
pub fn fwd_loss(rendered: &[f64], warped: &WarpResult, w: &LossWeights) -> Result<LossValue, LossError> {
    let (iw, ih) = warped.image.dims();
    check_len(iw * ih * 3, rendered.len())?;
    let cov = &warped.coverage;
    if !cov.iter().any(|&c| c) {
        return Ok(LossValue::zero(rendered.len()));
    }
    let target = warped.image.to_f64();
    let (l1, g1, _) = masked_l1(rendered, &target, Some(cov));
    let zeroed: Vec<f64> = rendered
        .iter()
        .enumerate()
        .map(|(i, &v)| if cov[i / 3] { v } else { 0.0 })
        .collect();
    let centers = eroded_centers(cov, iw, ih);
    let lam = w.lambda2;
    let mut value = lam * l1;
    let mut grad: Vec<f64> = g1.iter().map(|g| lam * g).collect();
    if centers.iter().any(|&c| c) {
        let s = ssim_with_grad(&zeroed, &target, iw, ih, Some(&centers), true)?;
        value += (1.0 - lam) * (1.0 - s.mean);
        for (i, (g, gs)) in grad.iter_mut().zip(s.grad.unwrap()).enumerate() {
            if cov[i / 3] {
                *g -= (1.0 - lam) * gs;
            }
        }
    }
    Ok(LossValue {
        value,
        grad,
        empty: false,
    })
}

/// Mean `|D_r - D_mvs|` over pixels in `mask` where the MVS depth is valid.
pub fn cs_loss(rendered_depth: &[f64], mvs: &DepthMap, mask: &[bool]) -> Result<LossValue, LossError> {
    let n = mvs.width * mvs.height;
    check_len(n, rendered_depth.len())?;
    check_len(n, mask.len())?;
    let count = (0..n).filter(|&i| mask[i] && mvs.valid[i]).count();
    if count == 0 {
        return Ok(LossValue::zero(n));
    }
    let inv = 1.0 / count as f64;
    let mut grad = vec![0.0; n];
    let mut sum = 0.0;
    for i in 0..n {
        if mask[i] && mvs.valid[i] {
            let d = rendered_depth[i] - mvs.depth[i];
            sum += d.abs();
            grad[i] = inv * sign(d);
        }
    }
    Ok(LossValue {
        value: sum * inv,
        grad,
        empty: false,
    })
}

/// Random-pair ordering loss against a monocular depth of unknown scale.
///
/// Draws `2 n_s` distinct valid pixels, splits them into two halves and
/// penalizes pairs whose rendered order disagrees with the monocular order.
pub fn mono_rank_loss<R: Rng + ?Sized>(
    rendered_depth: &[f64],
    mono: &DepthMap,
    n_s: usize,
    margin: f64,
    rng: &mut R,
) -> Result<LossValue, LossError> {
    let n = mono.width * mono.height;
    check_len(n, rendered_depth.len())?;
    let valid: Vec<usize> = (0..n).filter(|&i| mono.valid[i]).collect();
    let need = 2 * n_s;
    if n_s == 0 || valid.len() < need {
        return Err(LossError::TooFewValidPixels {
            need,
            got: valid.len(),
        });
    }
    let picks = rand::seq::index::sample(rng, valid.len(), need).into_vec();
    let (s1, s2) = picks.split_at(n_s);
    let inv = 1.0 / n_s as f64;
    let mut grad = vec![0.0; n];
    let mut sum = 0.0;
    for (&i, &j) in s1.iter().zip(s2) {
        let (p, q) = (valid[i], valid[j]);
        // order the pair so that `near` should render in front
        let (near, far) = if mono.depth[p] < mono.depth[q] { (p, q) } else { (q, p) };
        let h = rendered_depth[near] - rendered_depth[far] + margin;
        if h > 0.0 {
            sum += h;
            grad[near] += inv;
            grad[far] -= inv;
        }
    }
    Ok(LossValue {
        value: sum * inv,
        grad,
        empty: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterKind {
    Train,
    Unseen,
}

/// Loss components of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossParts {
    Train { photo: f64, cs: f64, mono: f64 },
    Unseen { fwd: f64 },
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    match *parts {
        LossParts::Train { photo, cs, mono } => photo + w.beta1 * cs + w.beta2 * mono,
        LossParts::Unseen { fwd } => fwd,
    }
}

pub const TELEMETRY_HEADER: &str = "iter,kind,l_photo,l_cs,l_mono,l_fwd,total";

/// One row of the per-iteration loss telemetry CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub parts: LossParts,
    pub total: f64,
}

impl LossRecord {
    pub fn kind(&self) -> IterKind {
        match self.parts {
            LossParts::Train { .. } => IterKind::Train,
            LossParts::Unseen { .. } => IterKind::Unseen,
        }
    }

    pub fn csv_line(&self) -> String {
        let f = |v: f64| format!("{v:e}");
        let (kind, p, c, m, fw) = match self.parts {
            LossParts::Train { photo, cs, mono } => ("train", f(photo), f(cs), f(mono), String::new()),
            LossParts::Unseen { fwd } => ("unseen", String::new(), String::new(), String::new(), f(fwd)),
        };
        format!("{},{kind},{p},{c},{m},{fw},{}", self.iter, f(self.total))
    }
}
