//! Pinhole cameras, rigid poses, images and depth maps.
//!
//! Conventions used throughout the crate:
//! - camera frame: x right, y down, z forward;
//! - [`Pose`] is camera-to-world;
//! - pixel centers sit at integer coordinates, `(0, 0)` is the center of the
//!   top-left pixel.

use nalgebra::{Matrix3, Point2, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("point has non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("sample location ({0}, {1}) is outside the image")]
    OutOfBounds(f64, f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return bad("focal lengths must be positive and finite");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be nonzero");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside [0, width)");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside [0, height)");
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// True when `pixel` lies in `[0, width-1] x [0, height-1]`.
    pub fn contains(&self, pixel: &Point2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y <= (self.height - 1) as f64
    }

    /// Nearest pixel index for a fractional location, if it rounds into the image.
    pub fn nearest_pixel(&self, pixel: &Point2<f64>) -> Option<(usize, usize)> {
        let x = pixel.x.round();
        let y = pixel.y.round();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some((x as usize, y as usize))
    }
}

pub fn project(point_cam: &Vector3<f64>, k: &Intrinsics) -> Result<Point2<f64>, GeometryError> {
    if point_cam.z <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(point_cam.z));
    }
    Ok(Point2::new(
        k.fx * point_cam.x / point_cam.z + k.cx,
        k.fy * point_cam.y / point_cam.z + k.cy,
    ))
}

/// `d * K^-1 * (u, v, 1)`: the camera-frame point at z-depth `d` behind `pixel`.
pub fn backproject(
    pixel: &Point2<f64>,
    depth: f64,
    k: &Intrinsics,
) -> Result<Vector3<f64>, GeometryError> {
    if depth <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    Ok(Vector3::new(
        (pixel.x - k.cx) / k.fx * depth,
        (pixel.y - k.cy) / k.fy * depth,
        depth,
    ))
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub const ORTHONORMAL_TOL: f64 = 1e-9;

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let p = Self {
            rotation,
            translation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    /// Camera at `eye` looking at `target`; `down` is the world direction that
    /// should appear as +y in the image.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = down.cross(&z).normalize();
        let y = z.cross(&x);
        Self {
            rotation: Matrix3::from_columns(&[x, y, z]),
            translation: eye,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite translation".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if !(err <= Self::ORTHONORMAL_TOL) {
            return Err(GeometryError::InvalidPose(format!(
                "rotation not orthonormal (max deviation {err:e})"
            )));
        }
        let det = self.rotation.determinant();
        if !((det - 1.0).abs() <= Self::ORTHONORMAL_TOL) {
            return Err(GeometryError::InvalidPose(format!(
                "rotation determinant {det} != 1"
            )));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn world_to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_world - self.translation)
    }

    pub fn camera_to_world(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        transform_point(self, p_cam)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }
}

pub fn transform_point(pose: &Pose, point: &Vector3<f64>) -> Vector3<f64> {
    pose.rotation * point + pose.translation
}

/// Maps src-camera coordinates into tgt-camera coordinates: `P_tgt^-1 ∘ P_src`.
pub fn relative_transform(src: &Pose, tgt: &Pose) -> Pose {
    tgt.inverse().compose(src)
}

/// Dense RGB image, row-major, channels interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self, GeometryError> {
        if data.len() != width * height * 3 {
            return Err(GeometryError::DimensionMismatch {
                expected: (width, height),
                got: (data.len() / 3, 1),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Converts a float buffer, clamping into `[0, 1]`.
    pub fn from_f64(width: usize, height: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), width * height * 3);
        Self {
            width,
            height,
            data: data.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Bilinear interpolation at a fractional pixel location.
pub fn bilinear_sample(img: &Image, uv: &Point2<f64>) -> Result<Vector3<f64>, GeometryError> {
    let (w, h) = (img.width, img.height);
    let (u, v) = (uv.x, uv.y);
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return Err(GeometryError::OutOfBounds(u, v));
    }
    let x0 = (u.floor() as usize).min(w.saturating_sub(2));
    let y0 = (v.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let px = |x, y| {
        let p = img.pixel(x, y);
        Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    };
    let top = px(x0, y0) * (1.0 - fx) + px(x1, y0) * fx;
    let bottom = px(x0, y1) * (1.0 - fx) + px(x1, y1) * fx;
    Ok(top * (1.0 - fy) + bottom * fy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthRole {
    Mvs,
    Mono,
    Rendered,
    GroundTruth,
}

/// Per-pixel z-depth with a validity mask. Invalid entries hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
    pub role: DepthRole,
}

impl DepthMap {
    pub fn empty(width: usize, height: usize, role: DepthRole) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            valid: vec![false; width * height],
            role,
        }
    }

    /// Builds a map where every positive finite entry is valid.
    pub fn from_depths(width: usize, height: usize, depth: Vec<f64>, role: DepthRole) -> Self {
        assert_eq!(depth.len(), width * height);
        let valid: Vec<bool> = depth.iter().map(|&d| d > 0.0 && d.is_finite()).collect();
        let depth = depth
            .into_iter()
            .zip(&valid)
            .map(|(d, &v)| if v { d } else { 0.0 })
            .collect();
        Self {
            width,
            height,
            depth,
            valid,
            role,
        }
    }

    /// Applies `mask` on top of the existing validity, zeroing the dropped entries.
    pub fn with_mask(mut self, mask: &[bool]) -> Self {
        assert_eq!(mask.len(), self.valid.len());
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                self.valid[i] = false;
                self.depth[i] = 0.0;
            }
        }
        self
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.depth[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Intrinsics plus pose: everything needed to render from a viewpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

/// One calibrated observation with optional depth attachments.
#[derive(Debug, Clone)]
pub struct View {
    pub image: Image,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub mvs_depth: Option<DepthMap>,
    pub mono_depth: Option<DepthMap>,
    pub gt_depth: Option<DepthMap>,
}

impl View {
    pub fn new(image: Image, intrinsics: Intrinsics, pose: Pose) -> Result<Self, GeometryError> {
        if image.dims() != intrinsics.dims() {
            return Err(GeometryError::DimensionMismatch {
                expected: intrinsics.dims(),
                got: image.dims(),
            });
        }
        Ok(Self {
            image,
            intrinsics,
            pose,
            mvs_depth: None,
            mono_depth: None,
            gt_depth: None,
        })
    }

    pub fn camera(&self) -> Camera {
        Camera {
            intrinsics: self.intrinsics,
            pose: self.pose,
        }
    }

    pub fn attach(&mut self, depth: DepthMap) -> Result<(), GeometryError> {
        if depth.dims() != self.intrinsics.dims() {
            return Err(GeometryError::DimensionMismatch {
                expected: self.intrinsics.dims(),
                got: depth.dims(),
            });
        }
        match depth.role {
            DepthRole::Mvs => self.mvs_depth = Some(depth),
            DepthRole::Mono => self.mono_depth = Some(depth),
            DepthRole::GroundTruth | DepthRole::Rendered => self.gt_depth = Some(depth),
        }
        Ok(())
    }
}

/// Spherical interpolation of rotations, linear interpolation of translation.
pub fn interpolate_pose(a: &Pose, b: &Pose, t: f64) -> Pose {
    let qa = a.quaternion();
    let qb = b.quaternion();
    let q = qa.try_slerp(&qb, t, 1e-12).unwrap_or(qa);
    Pose::from_quaternion(&q, a.translation * (1.0 - t) + b.translation * t)
}

/// Pixel index of `(x, y)` as a 2-vector, for call sites that need it.
pub fn pixel_point(x: usize, y: usize) -> Point2<f64> {
    Point2::new(x as f64, y as f64)
}


#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101).unwrap()
    }

    fn random_pose(ax: f64, ay: f64, az: f64, t: [f64; 3]) -> Pose {
        let q = UnitQuaternion::from_euler_angles(ax, ay, az);
        Pose::from_quaternion(&q, Vector3::new(t[0], t[1], t[2]))
    }

    #[test]
    fn project_examples() {
        let k = k100();
        assert_eq!(project(&Vector3::new(0.0, 0.0, 1.0), &k).unwrap(), Point2::new(50.0, 50.0));
        assert_eq!(project(&Vector3::new(1.0, 0.0, 2.0), &k).unwrap(), Point2::new(100.0, 50.0));
        assert!(matches!(
            project(&Vector3::new(1.0, 0.0, 0.0), &k),
            Err(GeometryError::NonPositiveDepth(_))
        ));
        assert!(project(&Vector3::new(1.0, 0.0, -1.0), &k).is_err());
    }

    #[test]
    fn backproject_examples() {
        let k = k100();
        assert_eq!(backproject(&Point2::new(50.0, 50.0), 1.0, &k).unwrap(), Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(backproject(&Point2::new(100.0, 50.0), 2.0, &k).unwrap(), Vector3::new(1.0, 0.0, 2.0));
        assert!(backproject(&Point2::new(1.0, 1.0), 0.0, &k).is_err());
    }

    #[test]
    fn transform_examples() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(transform_point(&Pose::identity(), &p), p);
        let t = Pose::from_translation(Vector3::new(0.0, 0.0, 5.0));
        assert_eq!(transform_point(&t, &Vector3::zeros()), Vector3::new(0.0, 0.0, 5.0));
    }

    #[test]
    fn relative_transform_closed_forms() {
        let p = random_pose(0.3, -0.2, 1.1, [1.0, 2.0, -0.5]);
        let r = relative_transform(&p, &p);
        assert_relative_eq!(r.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(r.translation, Vector3::zeros(), epsilon = 1e-12);

        let rot = random_pose(0.1, 0.7, -0.3, [0.0; 3]).rotation;
        let tgt = Pose::new(rot, Vector3::new(0.5, -1.0, 2.0)).unwrap();
        let r = relative_transform(&Pose::identity(), &tgt);
        assert_relative_eq!(r.rotation, rot.transpose(), epsilon = 1e-12);
        assert_relative_eq!(r.translation, -(rot.transpose() * tgt.translation), epsilon = 1e-12);
    }

    #[test]
    fn bilinear_examples() {
        let mut img = Image::new(3, 2);
        img.set_pixel(0, 0, [0.0, 0.2, 1.0]);
        img.set_pixel(1, 0, [1.0, 0.4, 0.0]);
        img.set_pixel(2, 1, [0.5, 0.5, 0.5]);
        let s = bilinear_sample(&img, &Point2::new(1.0, 0.0)).unwrap();
        assert_eq!(s, Vector3::new(1.0, 0.4f32 as f64, 0.0));
        let s = bilinear_sample(&img, &Point2::new(0.5, 0.0)).unwrap();
        assert_relative_eq!(s, Vector3::new(0.5, 0.3, 0.5), epsilon = 1e-7);
        // corner of the valid domain
        let s = bilinear_sample(&img, &Point2::new(2.0, 1.0)).unwrap();
        assert_relative_eq!(s, Vector3::new(0.5, 0.5, 0.5), epsilon = 1e-7);
        assert!(bilinear_sample(&img, &Point2::new(2.01, 0.0)).is_err());
        assert!(bilinear_sample(&img, &Point2::new(-0.1, 0.0)).is_err());
    }

    #[test]
    fn pose_validation() {
        assert!(Pose::new(Matrix3::identity() * 2.0, Vector3::zeros()).is_err());
        let mut reflect = Matrix3::identity();
        reflect[(0, 0)] = -1.0;
        assert!(Pose::new(reflect, Vector3::zeros()).is_err());
        let p = Pose::look_at(Vector3::new(0.0, 0.0, -4.0), Vector3::zeros(), Vector3::y());
        p.validate().unwrap();
        assert_relative_eq!(p.rotation, Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(-1.0, 1.0, 0.0, 0.0, 2, 2).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 2.0, 0.0, 2, 2).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 1.9, 0.0, 2, 2).is_ok());
    }

    #[test]
    fn interpolate_endpoints() {
        let a = random_pose(0.2, 0.1, -0.4, [1.0, 0.0, 0.0]);
        let b = random_pose(-0.5, 0.3, 0.2, [0.0, 2.0, 1.0]);
        let p0 = interpolate_pose(&a, &b, 0.0);
        assert_relative_eq!(p0.rotation, a.rotation, epsilon = 1e-12);
        assert_eq!(p0.translation, a.translation);
        let p1 = interpolate_pose(&a, &b, 1.0);
        assert_relative_eq!(p1.rotation, b.rotation, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn project_backproject_roundtrip(u in 0.0f64..100.0, v in 0.0f64..100.0, d in 0.01f64..100.0) {
            let k = k100();
            let px = Point2::new(u, v);
            let p = backproject(&px, d, &k).unwrap();
            let back = project(&p, &k).unwrap();
            prop_assert!((back - px).norm() <= 1e-12 * (1.0 + px.coords.norm()));
        }

        #[test]
        fn backproject_project_roundtrip(x in -5.0f64..5.0, y in -5.0f64..5.0, z in 0.01f64..50.0) {
            let k = k100();
            let p = Vector3::new(x, y, z);
            let q = backproject(&project(&p, &k).unwrap(), z, &k).unwrap();
            prop_assert!((q - p).norm() <= 1e-10 * p.norm());
        }

        #[test]
        fn transform_inverse_roundtrip(a in -3.0f64..3.0, b in -1.5f64..1.5, c in -3.0f64..3.0,
                                        t in proptest::array::uniform3(-10.0f64..10.0),
                                        p in proptest::array::uniform3(-10.0f64..10.0)) {
            let pose = random_pose(a, b, c, t);
            let x = Vector3::from(p);
            let back = transform_point(&pose.inverse(), &transform_point(&pose, &x));
            prop_assert!((back - x).norm() <= 1e-12 * (1.0 + x.norm() + pose.translation.norm()));
        }

        #[test]
        fn relative_transform_associativity(a1 in -3.0f64..3.0, b1 in -1.5f64..1.5, c1 in -3.0f64..3.0,
                                             a2 in -3.0f64..3.0, b2 in -1.5f64..1.5, c2 in -3.0f64..3.0,
                                             t1 in proptest::array::uniform3(-5.0f64..5.0),
                                             t2 in proptest::array::uniform3(-5.0f64..5.0),
                                             p in proptest::array::uniform3(-5.0f64..5.0)) {
            let src = random_pose(a1, b1, c1, t1);
            let tgt = random_pose(a2, b2, c2, t2);
            let x = Vector3::from(p);
            let via_rel = transform_point(&relative_transform(&src, &tgt), &x);
            let via_world = tgt.world_to_camera(&transform_point(&src, &x));
            prop_assert!((via_rel - via_world).norm() <= 1e-11);
            let r = relative_transform(&src, &src);
            prop_assert!((r.rotation - Matrix3::identity()).amax() <= 1e-12);
        }

        #[test]
        fn bilinear_is_convex(vals in proptest::collection::vec(0.0f32..=1.0, 12), u in 0.0f64..=1.0, v in 0.0f64..=1.0) {
            let img = Image::from_data(2, 2, vals.clone()).unwrap();
            let s = bilinear_sample(&img, &Point2::new(u, v)).unwrap();
            for c in 0..3 {
                let ch: Vec<f64> = (0..4).map(|i| vals[i * 3 + c] as f64).collect();
                let lo = ch.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(s[c] >= lo - 1e-12 && s[c] <= hi + 1e-12);
            }
        }
    }
}
