//! Real spherical harmonics up to degree 3, in the sign convention used by
//! the reference splatting rasterizer.

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_SH_DEGREE: usize = 3;
pub const MAX_SH_COEFFS: usize = 16;

pub const fn num_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Basis values and their partial derivatives with respect to the (not
/// necessarily normalized) direction components.
pub fn basis_with_grad(
    degree: usize,
    dir: [f64; 3],
) -> ([f64; MAX_SH_COEFFS], [[f64; 3]; MAX_SH_COEFFS]) {
    let [x, y, z] = dir;
    let mut b = [0.0; MAX_SH_COEFFS];
    let mut g = [[0.0; 3]; MAX_SH_COEFFS];
    b[0] = SH_C0;
    if degree >= 1 {
        b[1] = -SH_C1 * y;
        g[1] = [0.0, -SH_C1, 0.0];
        b[2] = SH_C1 * z;
        g[2] = [0.0, 0.0, SH_C1];
        b[3] = -SH_C1 * x;
        g[3] = [-SH_C1, 0.0, 0.0];
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = SH_C2[0] * x * y;
        g[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
        b[5] = SH_C2[1] * y * z;
        g[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
        b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        g[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
        b[7] = SH_C2[3] * x * z;
        g[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
        b[8] = SH_C2[4] * (xx - yy);
        g[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[9] = SH_C3[0] * y * (3.0 * xx - yy);
        g[9] = [
            SH_C3[0] * 6.0 * x * y,
            SH_C3[0] * (3.0 * xx - 3.0 * yy),
            0.0,
        ];
        b[10] = SH_C3[1] * x * y * z;
        g[10] = [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y];
        b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
        g[11] = [
            SH_C3[2] * (-2.0 * x * y),
            SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
            SH_C3[2] * 8.0 * y * z,
        ];
        b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        g[12] = [
            SH_C3[3] * (-6.0 * x * z),
            SH_C3[3] * (-6.0 * y * z),
            SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ];
        b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
        g[13] = [
            SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
            SH_C3[4] * (-2.0 * x * y),
            SH_C3[4] * 8.0 * x * z,
        ];
        b[14] = SH_C3[5] * z * (xx - yy);
        g[14] = [
            SH_C3[5] * 2.0 * x * z,
            SH_C3[5] * (-2.0 * y * z),
            SH_C3[5] * (xx - yy),
        ];
        b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        g[15] = [
            SH_C3[6] * (3.0 * xx - 3.0 * yy),
            SH_C3[6] * (-6.0 * x * y),
            0.0,
        ];
    }
    (b, g)
}

/// Evaluates radiance before clamping: `sum_k c_k Y_k(dir) + 0.5`.
pub fn eval_sh_unclamped(coeffs: &[f64], degree: usize, dir: [f64; 3]) -> [f64; 3] {
    let k = num_coeffs(degree);
    debug_assert!(coeffs.len() >= k * 3);
    let (b, _) = basis_with_grad(degree, dir);
    let mut out = [0.5; 3];
    for (i, bi) in b.iter().take(k).enumerate() {
        for c in 0..3 {
            out[c] += coeffs[i * 3 + c] * bi;
        }
    }
    out
}

/// Radiance in direction `dir`, clamped below at zero.
pub fn eval_sh(coeffs: &[f64], degree: usize, dir: [f64; 3]) -> [f64; 3] {
    eval_sh_unclamped(coeffs, degree, dir).map(|v| v.max(0.0))
}

/// DC coefficient that makes `eval_sh` return `rgb`.
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / SH_C0
}

pub fn dc_to_rgb(dc: f64) -> f64 {
    dc * SH_C0 + 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: [f64; 3]) -> [f64; 3] {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    }

    #[test]
    fn dc_is_isotropic() {
        let coeffs = [0.7, -0.2, 1.3];
        let a = eval_sh(&coeffs, 0, [0.0, 0.0, 1.0]);
        let b = eval_sh(&coeffs, 0, unit([0.3, -0.8, 0.1]));
        assert_eq!(a, b);
        assert!((a[0] - (0.7 * SH_C0 + 0.5)).abs() < 1e-15);
        // the negative channel is clamped
        assert_eq!(eval_sh(&[-5.0, 0.0, 0.0], 0, [1.0, 0.0, 0.0])[0], 0.0);
    }

    #[test]
    fn dc_roundtrip() {
        for &c in &[0.0, 0.1, 0.5, 0.93, 1.0] {
            assert!((dc_to_rgb(rgb_to_dc(c)) - c).abs() < 1e-12);
            let out = eval_sh(&[rgb_to_dc(c); 3], 0, [0.0, 1.0, 0.0]);
            assert!((out[0] - c).abs() < 1e-12);
        }
    }

    #[test]
    fn basis_is_orthonormal_by_quadrature() {
        // Fibonacci-sphere quadrature: integral of Y_i Y_j over S^2 ≈ delta_ij.
        let n = 20000;
        let mut gram = [[0.0f64; 16]; 16];
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        for i in 0..n {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let (b, _) = basis_with_grad(3, [r * phi.cos(), r * phi.sin(), z]);
            for a in 0..16 {
                for c in 0..16 {
                    gram[a][c] += b[a] * b[c];
                }
            }
        }
        let w = 4.0 * std::f64::consts::PI / n as f64;
        for a in 0..16 {
            for c in 0..16 {
                let want = if a == c { 1.0 } else { 0.0 };
                assert!((gram[a][c] * w - want).abs() < 2e-3, "({a},{c}) {}", gram[a][c] * w);
            }
        }
    }

    proptest! {
        #[test]
        fn nonnegative(coeffs in proptest::collection::vec(-3.0f64..3.0, 48),
                       d in proptest::array::uniform3(-1.0f64..1.0)) {
            prop_assume!(d.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let out = eval_sh(&coeffs, 3, unit(d));
            prop_assert!(out.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn basis_gradient_matches_finite_differences(d in proptest::array::uniform3(-1.0f64..1.0)) {
            let (_, g) = basis_with_grad(3, d);
            let h = 1e-6;
            for axis in 0..3 {
                let mut p = d;
                let mut m = d;
                p[axis] += h;
                m[axis] -= h;
                let (bp, _) = basis_with_grad(3, p);
                let (bm, _) = basis_with_grad(3, m);
                for k in 0..16 {
                    let fd = (bp[k] - bm[k]) / (2.0 * h);
                    prop_assert!((fd - g[k][axis]).abs() < 1e-7, "k={k} axis={axis} fd={fd} g={}", g[k][axis]);
                }
            }
        }
    }
}
