//! 3D covariance construction and the local-affine projection to screen space.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Point2, Vector3};

use crate::geometry::Intrinsics;

/// Diagonal dilation added to every screen-space covariance.
pub const COV2D_DILATION: f64 = 0.3;

/// Normalizes a raw `(w, x, y, z)` quaternion. Returns the unit quaternion and the raw norm.
pub fn normalize_quat(q: [f64; 4]) -> ([f64; 4], f64) {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    ([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n)
}

/// Rotation matrix of a unit `(w, x, y, z)` quaternion.
pub fn quat_to_rotation(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of [`quat_to_rotation`] with respect to `w, x, y, z`.
pub fn quat_rotation_jacobian(q: [f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = q.map(|v| 2.0 * v);
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0),
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x),
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y),
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0),
    ]
}

/// `Σ = R diag(s²) Rᵀ` with `s = exp(log_scale)`; the quaternion is normalized first.
pub fn covariance_3d(log_scale: [f64; 3], quat: [f64; 4]) -> Matrix3<f64> {
    let (qn, _) = normalize_quat(quat);
    let r = quat_to_rotation(qn);
    let s = log_scale.map(f64::exp);
    let m = r * Matrix3::from_diagonal(&Vector3::from(s));
    m * m.transpose()
}

/// Jacobian of the perspective projection at a camera-frame point.
pub fn projection_jacobian(mean_cam: &Vector3<f64>, k: &Intrinsics) -> Matrix2x3<f64> {
    let (x, y, z) = (mean_cam.x, mean_cam.y, mean_cam.z);
    let iz = 1.0 / z;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * y * iz * iz,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    /// Screen covariance including the dilation.
    pub cov2d: Matrix2<f64>,
    pub mean_px: Point2<f64>,
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("gaussian culled: camera depth {0} is not beyond the near plane")]
pub struct Culled(pub f64);

/// Projects a camera-frame covariance and mean to pixel space.
pub fn project_gaussian(
    cov_cam: &Matrix3<f64>,
    mean_cam: &Vector3<f64>,
    k: &Intrinsics,
    z_near: f64,
) -> Result<ProjectedGaussian, Culled> {
    if !(mean_cam.z > z_near) {
        return Err(Culled(mean_cam.z));
    }
    let j = projection_jacobian(mean_cam, k);
    let cov2d = j * cov_cam * j.transpose() + Matrix2::identity() * COV2D_DILATION;
    Ok(ProjectedGaussian {
        cov2d,
        mean_px: Point2::new(
            k.fx * mean_cam.x / mean_cam.z + k.cx,
            k.fy * mean_cam.y / mean_cam.z + k.cy,
        ),
        depth: mean_cam.z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{SymmetricEigen, UnitQuaternion};
    use proptest::prelude::*;

    fn k(f: f64) -> Intrinsics {
        Intrinsics::new(f, f, 32.0, 32.0, 64, 64).unwrap()
    }

    #[test]
    fn identity_covariance() {
        assert_relative_eq!(
            covariance_3d([0.0; 3], [1.0, 0.0, 0.0, 0.0]),
            Matrix3::identity(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn quat_matches_nalgebra() {
        let q = UnitQuaternion::from_euler_angles(0.3, -1.2, 2.0);
        let ours = quat_to_rotation([q.w, q.i, q.j, q.k]);
        assert_relative_eq!(ours, q.to_rotation_matrix().into_inner(), epsilon = 1e-12);
    }

    #[test]
    fn point_source_is_dilation() {
        let p = project_gaussian(&(Matrix3::identity() * 1e-12), &Vector3::new(0.0, 0.0, 1.0), &k(50.0), 0.01)
            .unwrap();
        assert_relative_eq!(p.cov2d, Matrix2::identity() * 0.3, epsilon = 1e-8);
        assert_eq!(p.mean_px, Point2::new(32.0, 32.0));
        assert_eq!(p.depth, 1.0);
    }

    #[test]
    fn isotropic_on_axis() {
        let (f, s, z) = (50.0, 0.1, 2.0);
        let p = project_gaussian(&(Matrix3::identity() * s * s), &Vector3::new(0.0, 0.0, z), &k(f), 0.01)
            .unwrap();
        let want = (f * s / z).powi(2) + 0.3;
        assert_relative_eq!(p.cov2d, Matrix2::identity() * want, epsilon = 1e-12);

        let far = project_gaussian(&(Matrix3::identity() * s * s), &Vector3::new(0.0, 0.0, 2.0 * z), &k(f), 0.01)
            .unwrap();
        let pre_near = p.cov2d[(0, 0)] - 0.3;
        let pre_far = far.cov2d[(0, 0)] - 0.3;
        assert_relative_eq!(pre_far, pre_near / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn culling() {
        assert!(project_gaussian(&Matrix3::identity(), &Vector3::new(0.0, 0.0, 0.005), &k(50.0), 0.01).is_err());
        assert!(project_gaussian(&Matrix3::identity(), &Vector3::new(0.0, 0.0, -1.0), &k(50.0), 0.01).is_err());
    }

    #[test]
    fn rotation_jacobian_matches_finite_differences() {
        let q = [0.8, -0.3, 0.4, 0.2];
        let jac = quat_rotation_jacobian(q);
        let h = 1e-6;
        for c in 0..4 {
            let mut p = q;
            let mut m = q;
            p[c] += h;
            m[c] -= h;
            let fd = (quat_to_rotation(p) - quat_to_rotation(m)) / (2.0 * h);
            assert_relative_eq!(fd, jac[c], epsilon = 1e-8);
        }
    }

    proptest! {
        #[test]
        fn isotropic_is_rotation_invariant(q in proptest::array::uniform4(-1.0f64..1.0), ls in -3.0f64..1.0) {
            prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-2);
            let s2 = (2.0 * ls).exp();
            let cov = covariance_3d([ls; 3], q);
            prop_assert!((cov - Matrix3::identity() * s2).amax() <= 1e-12 * s2.max(1.0));
        }

        #[test]
        fn eigenvalues_are_squared_scales(q in proptest::array::uniform4(-1.0f64..1.0),
                                          ls in proptest::array::uniform3(-2.0f64..1.0)) {
            prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-2);
            let cov = covariance_3d(ls, q);
            prop_assert!((cov - cov.transpose()).amax() <= 1e-14);
            let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().cloned().collect();
            eig.sort_by(f64::total_cmp);
            let mut want: Vec<f64> = ls.iter().map(|l| (2.0 * l).exp()).collect();
            want.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }
    }
}
