#![allow(dead_code)]

use mvpgs_core::fixtures::SceneFixture;
use mvpgs_core::geometry::{Camera, Intrinsics, Pose};
use mvpgs_core::pipeline::TestView;
use mvpgs_core::render::{render, render_backward, GaussianSet, RenderConfig};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;

pub fn camera(w: usize, h: usize, f: f64) -> Camera {
    Camera {
        intrinsics: Intrinsics::centered(f, w, h).unwrap(),
        pose: Pose::identity(),
    }
}

/// Random Gaussians in front of an identity camera.
pub fn random_gaussians<R: Rng>(rng: &mut R, n: usize, degree: usize, spread: f64) -> GaussianSet {
    let mut g = GaussianSet::empty(degree);
    let k = (degree + 1) * (degree + 1) * 3;
    for _ in 0..n {
        let sh: Vec<f64> = (0..k).map(|_| rng.random_range(-0.8..0.8)).collect();
        g.push(
            [
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
                rng.random_range(2.0..4.0),
            ],
            std::array::from_fn(|_| rng.random_range(-2.6..-1.2)),
            std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            rng.random_range(-2.0..3.0),
            &sh,
        );
    }
    g
}

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;

/// Reference compositor: one global depth sort, every Gaussian tested at
/// every pixel. Supports SH degree 0 and 1.
pub fn oracle_render(g: &GaussianSet, cam: &Camera, cfg: &RenderConfig) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    assert!(g.sh_degree <= 1);
    let k = &cam.intrinsics;
    let (w, h) = (k.width, k.height);
    let r_wc = cam.pose.rotation.transpose();
    struct S {
        idx: usize,
        depth: f64,
        mean: [f64; 2],
        inv: Matrix2<f64>,
        opacity: f64,
        color: [f64; 3],
    }
    let mut splats = Vec::new();
    for i in 0..g.len() {
        let mu = Vector3::from(g.positions[i]);
        let pc = r_wc * (mu - cam.pose.translation);
        if !(pc.z > cfg.z_near) {
            continue;
        }
        let [qw, qx, qy, qz] = g.rotations[i];
        let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
        let rot = q.to_rotation_matrix().into_inner();
        let s2 = Matrix3::from_diagonal(&Vector3::from(g.log_scales[i].map(|v| (2.0 * v).exp())));
        let cov = r_wc * rot * s2 * rot.transpose() * r_wc.transpose();
        let j = Matrix2x3::new(
            k.fx / pc.z,
            0.0,
            -k.fx * pc.x / (pc.z * pc.z),
            0.0,
            k.fy / pc.z,
            -k.fy * pc.y / (pc.z * pc.z),
        );
        let cov2 = j * cov * j.transpose() + Matrix2::identity() * 0.3;
        let Some(inv) = cov2.try_inverse() else { continue };
        if !(cov2.determinant() > 0.0) {
            continue;
        }
        let d = (mu - cam.pose.translation).normalize();
        let sh = g.sh(i);
        let mut color = [0.0; 3];
        for c in 0..3 {
            let mut v = 0.5 + C0 * sh[c];
            if g.sh_degree == 1 {
                v += -C1 * d.y * sh[3 + c] + C1 * d.z * sh[6 + c] - C1 * d.x * sh[9 + c];
            }
            color[c] = v.max(0.0);
        }
        let sig = 1.0 / (1.0 + (-g.opacity_logits[i]).exp());
        splats.push(S {
            idx: i,
            depth: pc.z,
            mean: [k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy],
            inv,
            opacity: sig,
            color,
        });
    }
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.idx.cmp(&b.idx)));
    let mut color = vec![0.0; w * h * 3];
    let mut depth = vec![0.0; w * h];
    let mut alpha = vec![0.0; w * h];
    let cutoff = 0.5 * cfg.extent_sigma * cfg.extent_sigma;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut t = 1.0;
            for s in &splats {
                let dx = x as f64 - s.mean[0];
                let dy = y as f64 - s.mean[1];
                let power = 0.5 * (s.inv[(0, 0)] * dx * dx + s.inv[(1, 1)] * dy * dy) + s.inv[(0, 1)] * dx * dy;
                if power > cutoff {
                    continue;
                }
                let a = (s.opacity * (-power).exp()).min(cfg.alpha_max);
                if a < cfg.alpha_min {
                    continue;
                }
                if t * (1.0 - a) < cfg.transmittance_min {
                    break;
                }
                for c in 0..3 {
                    color[p * 3 + c] += s.color[c] * a * t;
                }
                depth[p] += s.depth * a * t;
                t *= 1.0 - a;
            }
            for c in 0..3 {
                color[p * 3 + c] += t * cfg.background[c];
            }
            alpha[p] = 1.0 - t;
        }
    }
    (color, depth, alpha)
}

#[derive(Debug, Default, Clone)]
pub struct FdReport {
    pub checked: usize,
    pub skipped_branch: usize,
    pub below_floor: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Compares analytic gradients of `L = <wc, color> + <wd, depth>` with a
/// 4-point central stencil for every scalar parameter. Entries whose stencil
/// crosses a change in the contributing set are skipped.
pub fn fd_check<R: Rng>(g: &GaussianSet, cam: &Camera, cfg: &RenderConfig, rng: &mut R, floor: f64) -> FdReport {
    let (w, h) = cam.intrinsics.dims();
    let wc: Vec<f64> = (0..w * h * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wd: Vec<f64> = (0..w * h).map(|_| rng.random_range(-0.3..0.3)).collect();
    let out = render(g, cam, cfg).unwrap();
    let base_sig = out.contribution_signature();
    let grads = render_backward(g, cam, &out, &wc, &wd).unwrap();
    let eval = |p: &GaussianSet| -> Option<f64> {
        let o = render(p, cam, cfg).ok()?;
        if o.contribution_signature() != base_sig {
            return None;
        }
        let lc: f64 = o.color.iter().zip(&wc).map(|(a, b)| a * b).sum();
        let ld: f64 = o.depth.iter().zip(&wd).map(|(a, b)| a * b).sum();
        Some(lc + ld)
    };
    let stride = g.sh_stride();
    let mut rep = FdReport::default();
    let step = 1e-4;
    for i in 0..g.len() {
        let mut entries: Vec<(String, f64, Box<dyn Fn(&mut GaussianSet, f64)>)> = Vec::new();
        for a in 0..3 {
            entries.push((format!("pos[{i}][{a}]"), grads.positions[i][a], Box::new(move |s, d| s.positions[i][a] += d)));
            entries.push((format!("scale[{i}][{a}]"), grads.log_scales[i][a], Box::new(move |s, d| s.log_scales[i][a] += d)));
        }
        for a in 0..4 {
            entries.push((format!("rot[{i}][{a}]"), grads.rotations[i][a], Box::new(move |s, d| s.rotations[i][a] += d)));
        }
        entries.push((format!("opacity[{i}]"), grads.opacity_logits[i], Box::new(move |s, d| s.opacity_logits[i] += d)));
        for c in 0..stride {
            entries.push((format!("sh[{i}][{c}]"), grads.sh_coeffs[i * stride + c], Box::new(move |s, d| s.sh_coeffs[i * stride + c] += d)));
        }
        for (name, an, perturb) in entries {
            let at = |d: f64| {
                let mut p = g.clone();
                perturb(&mut p, d);
                eval(&p)
            };
            let (Some(p1), Some(m1), Some(p2), Some(m2)) = (at(step), at(-step), at(2.0 * step), at(-2.0 * step)) else {
                rep.skipped_branch += 1;
                continue;
            };
            let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            if an.abs() <= floor {
                rep.below_floor += 1;
                continue;
            }
            rep.checked += 1;
            let rel = (fd - an).abs() / an.abs();
            if rel > rep.max_rel {
                rep.max_rel = rel;
                rep.worst = format!("{name}: analytic {an:e} fd {fd:e}");
            }
        }
    }
    rep
}

pub fn fixture_tests(fx: &SceneFixture) -> Vec<TestView> {
    fx.test
        .iter()
        .map(|&i| TestView {
            id: i,
            camera: fx.views[i].camera(),
            image: Some(fx.views[i].image.clone()),
        })
        .collect()
}

/// One `PASS`/`FAIL` line per criterion. Written to the stderr handle directly
/// so the line shows up even when the harness captures test output.
pub fn report(id: u32, name: &str, pass: bool, detail: &str) {
    use std::io::Write;
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{verdict}] criterion {id} {name}: {detail}");
}
