//! Procedural test scenes rendered by an analytic ray caster.
//!
//! Scenes are built from textured rectangles and spheres with Lambertian
//! shading, seen by five cameras on a horizontal arc around the scene: three
//! training views at angles `{-a, 0, a}` and two held-out views at `{-a/2, a/2}`.
//! The ray caster provides exact images, z-depths and co-visibility masks.
//!
//! Textures mix two octaves of value noise with a low-contrast checker whose
//! squares span about three pixels at the default 48x48 resolution, so the
//! checker period stays below 8 px.

use nalgebra::{Point2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{project, Camera, DepthMap, DepthRole, Image, Intrinsics, Pose, View};

const RAY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: [f64; 3],
    /// World size of one checker square.
    pub checker_size: f64,
    pub checker_contrast: f64,
    /// World size of one noise lattice cell (finest octave is half this).
    pub noise_cell: f64,
    pub noise_contrast: f64,
    pub seed: u64,
}

fn hash2(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut z = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(u: f64, v: f64, seed: u64) -> f64 {
    let (fu, fv) = (u.floor(), v.floor());
    let (ix, iy) = (fu as i64, fv as i64);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (s(u - fu), s(v - fv));
    let a = hash2(ix, iy, seed);
    let b = hash2(ix + 1, iy, seed);
    let c = hash2(ix, iy + 1, seed);
    let d = hash2(ix + 1, iy + 1, seed);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * ty
}

impl Texture {
    /// Albedo at surface coordinates `(u, v)` in world units.
    pub fn albedo(&self, u: f64, v: f64) -> [f64; 3] {
        let n = 0.65 * value_noise(u / self.noise_cell, v / self.noise_cell, self.seed)
            + 0.35 * value_noise(2.0 * u / self.noise_cell, 2.0 * v / self.noise_cell, self.seed ^ 0x5555);
        let parity = ((u / self.checker_size).floor() + (v / self.checker_size).floor()).rem_euclid(2.0);
        let check = if parity < 0.5 { 1.0 } else { -1.0 };
        let k = 1.0 + self.noise_contrast * (2.0 * n - 1.0) + self.checker_contrast * check;
        self.base.map(|c| (c * k).clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Rectangle spanned by the orthonormal axes `u`, `v` around `center`.
    Plane {
        center: [f64; 3],
        u: [f64; 3],
        v: [f64; 3],
        half_size: [f64; 2],
        texture: Texture,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        texture: Texture,
    },
}

/// A ray hit: parameter along the ray, point, unit normal and albedo.
#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub albedo: [f64; 3],
}

impl Primitive {
    pub fn plane(center: [f64; 3], yaw: f64, pitch: f64, half_size: [f64; 2], texture: Texture) -> Self {
        // rotate the x/y axes by pitch about x, then yaw about y
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let u = Vector3::new(cy, 0.0, -sy);
        let v0 = Vector3::new(0.0, cp, sp);
        let v = Vector3::new(v0.x * cy + v0.z * sy, v0.y, -v0.x * sy + v0.z * cy);
        Primitive::Plane {
            center,
            u: u.into(),
            v: v.into(),
            half_size,
            texture,
        }
    }

    /// Closest intersection with `t > RAY_EPS`.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        match *self {
            Primitive::Plane {
                center,
                u,
                v,
                half_size,
                texture,
            } => {
                let (c, u, v) = (Vector3::from(center), Vector3::from(u), Vector3::from(v));
                let n = u.cross(&v);
                let nd = n.dot(d);
                if nd.abs() < 1e-12 {
                    return None;
                }
                let t = n.dot(&(c - o)) / nd;
                if !(t > RAY_EPS) {
                    return None;
                }
                let p = o + d * t;
                let (a, b) = (u.dot(&(p - c)), v.dot(&(p - c)));
                if a.abs() > half_size[0] || b.abs() > half_size[1] {
                    return None;
                }
                Some(Hit {
                    t,
                    point: p,
                    normal: n,
                    albedo: texture.albedo(a, b),
                })
            }
            Primitive::Sphere {
                center,
                radius,
                texture,
            } => {
                let c = Vector3::from(center);
                let oc = o - c;
                let a = d.dot(d);
                let half_b = oc.dot(d);
                let cc = oc.dot(&oc) - radius * radius;
                let disc = half_b * half_b - a * cc;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-half_b - sq) / a, (-half_b + sq) / a]
                    .into_iter()
                    .find(|&t| t > RAY_EPS)?;
                let p = o + d * t;
                let n = (p - c) / radius;
                let theta = n.y.clamp(-1.0, 1.0).acos();
                let phi = n.z.atan2(n.x);
                Some(Hit {
                    t,
                    point: p,
                    normal: n,
                    albedo: texture.albedo(phi * radius, theta * radius),
                })
            }
        }
    }

    /// Signed residual of the implicit surface equation at `p`.
    pub fn implicit(&self, p: &Vector3<f64>) -> f64 {
        match *self {
            Primitive::Plane { center, u, v, .. } => {
                let n = Vector3::from(u).cross(&Vector3::from(v));
                n.dot(&(p - Vector3::from(center)))
            }
            Primitive::Sphere { center, radius, .. } => (p - Vector3::from(center)).norm() - radius,
        }
    }
}

/// Cameras on a horizontal arc around `target`, all sharing one intrinsics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub intrinsics: Intrinsics,
    pub radius: f64,
    pub height: f64,
    pub target: [f64; 3],
    /// Arc angle of every camera, in radians; index order is view order.
    pub angles: Vec<f64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Rig {
    pub fn pose(&self, angle: f64) -> Pose {
        let t = Vector3::from(self.target);
        let eye = t + Vector3::new(self.radius * angle.sin(), self.height, -self.radius * angle.cos());
        Pose::look_at(eye, t, Vector3::new(0.0, 1.0, 0.0))
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.angles.iter().map(|&a| self.pose(a)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub ambient: f64,
    /// Direction towards the light.
    pub light_dir: [f64; 3],
    pub background: [f64; 3],
    /// Color samples per pixel along each axis.
    pub supersample: usize,
    pub rig: Rig,
    pub seed: u64,
}

impl SceneSpec {
    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(o, d))
            .min_by(|a, b| a.t.total_cmp(&b.t))
    }

    fn shade(&self, hit: &Hit) -> [f64; 3] {
        let l = Vector3::from(self.light_dir).normalize();
        // two-sided, so shading does not depend on the viewer
        let k = self.ambient + (1.0 - self.ambient) * hit.normal.dot(&l).abs();
        hit.albedo.map(|a| (a * k).clamp(0.0, 1.0))
    }

    /// World ray through pixel coordinates `(x, y)`; its parameter is the z-depth.
    pub fn pixel_ray(cam: &Camera, x: f64, y: f64) -> (Vector3<f64>, Vector3<f64>) {
        let k = &cam.intrinsics;
        let d_cam = Vector3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
        (cam.pose.translation, cam.pose.rotation * d_cam)
    }
}

/// Exact image and z-depth of `spec` seen from `cam`. Color is the mean of a
/// `supersample x supersample` grid per pixel; depth comes from the center ray
/// and is invalid where the center ray misses.
pub fn raytrace_reference(spec: &SceneSpec, cam: &Camera) -> (Image, DepthMap) {
    let k = &cam.intrinsics;
    let (w, h) = (k.width, k.height);
    let s = spec.supersample.max(1);
    let mut color = vec![0.0f64; w * h * 3];
    let mut depth = DepthMap::empty(w, h, DepthRole::GroundTruth);
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let (o, d) = SceneSpec::pixel_ray(cam, x as f64, y as f64);
            if let Some(hit) = spec.cast(&o, &d) {
                depth.depth[idx] = hit.t;
                depth.valid[idx] = true;
            }
            let mut acc = [0.0; 3];
            for sy in 0..s {
                for sx in 0..s {
                    let ox = (sx as f64 + 0.5) / s as f64 - 0.5;
                    let oy = (sy as f64 + 0.5) / s as f64 - 0.5;
                    let (o, d) = SceneSpec::pixel_ray(cam, x as f64 + ox, y as f64 + oy);
                    let c = spec.cast(&o, &d).map_or(spec.background, |hit| spec.shade(&hit));
                    for ch in 0..3 {
                        acc[ch] += c[ch];
                    }
                }
            }
            for ch in 0..3 {
                color[idx * 3 + ch] = acc[ch] / (s * s) as f64;
            }
        }
    }
    (Image::from_f64(w, h, &color), depth)
}

/// Pixels of view `i` whose surface point is visible, unoccluded, from view `j`.
pub fn covisibility(spec: &SceneSpec, cam_i: &Camera, depth_i: &DepthMap, cam_j: &Camera) -> Vec<bool> {
    let (w, h) = depth_i.dims();
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let Some(_) = depth_i.get(x, y) else {
                continue;
            };
            let (o, d) = SceneSpec::pixel_ray(cam_i, x as f64, y as f64);
            let Some(hit) = spec.cast(&o, &d) else {
                continue;
            };
            let pc = cam_j.pose.world_to_camera(&hit.point);
            let Ok(p) = project(&pc, &cam_j.intrinsics) else {
                continue;
            };
            if cam_j.intrinsics.nearest_pixel(&p).is_none() {
                continue;
            }
            let oj = cam_j.pose.translation;
            let dir = hit.point - oj;
            let blocked = spec
                .primitives
                .iter()
                .filter_map(|prim| prim.intersect(&oj, &dir))
                .any(|h| h.t < 1.0 - 1e-7);
            mask[y * w + x] = !blocked;
        }
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    ThreePlanes,
    PlaneAndSpheres,
    SteepParallax,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "three_planes" => Ok(Preset::ThreePlanes),
            "plane_and_spheres" => Ok(Preset::PlaneAndSpheres),
            "steep_parallax" => Ok(Preset::SteepParallax),
            _ => Err(format!(
                "unknown preset {s:?} (expected three_planes, plane_and_spheres or steep_parallax)"
            )),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::ThreePlanes => "three_planes",
            Preset::PlaneAndSpheres => "plane_and_spheres",
            Preset::SteepParallax => "steep_parallax",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixtureOptions {
    pub width: usize,
    pub height: usize,
    pub supersample: usize,
}

impl Default for FixtureOptions {
    fn default() -> Self {
        Self {
            width: 48,
            height: 48,
            supersample: 4,
        }
    }
}

fn texture(base: [f64; 3], seed: u64) -> Texture {
    Texture {
        base,
        checker_size: 0.25,
        checker_contrast: 0.06,
        noise_cell: 0.45,
        noise_contrast: 0.35,
        seed,
    }
}

/// Scene description for a preset. The seed picks the texture patterns.
pub fn preset_spec(preset: Preset, seed: u64, opts: &FixtureOptions) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tex = |base: [f64; 3]| texture(base, rng.random());
    let wall = Primitive::plane([0.0, 0.0, 1.5], 0.0, 0.0, [4.0, 4.0], tex([0.6, 0.6, 0.65]));
    let (primitives, arc, radius) = match preset {
        Preset::ThreePlanes => (
            vec![
                wall,
                Primitive::plane([-0.65, 0.15, 0.3], 0.5, 0.0, [0.55, 0.7], tex([0.72, 0.55, 0.45])),
                Primitive::plane([0.6, -0.25, -0.35], -0.35, -0.4, [0.45, 0.45], tex([0.5, 0.68, 0.5])),
            ],
            0.3,
            4.0,
        ),
        Preset::PlaneAndSpheres => (
            vec![
                wall,
                Primitive::Sphere {
                    center: [-0.5, 0.1, 0.2],
                    radius: 0.55,
                    texture: tex([0.72, 0.55, 0.45]),
                },
                Primitive::Sphere {
                    center: [0.65, -0.3, -0.5],
                    radius: 0.35,
                    texture: tex([0.5, 0.62, 0.72]),
                },
            ],
            0.3,
            4.0,
        ),
        Preset::SteepParallax => (
            vec![
                wall,
                Primitive::plane([-0.2, 0.1, -1.4], 0.3, 0.2, [0.35, 0.45], tex([0.72, 0.55, 0.45])),
                Primitive::Sphere {
                    center: [0.55, -0.2, 0.4],
                    radius: 0.4,
                    texture: tex([0.5, 0.68, 0.5]),
                },
            ],
            0.55,
            3.5,
        ),
    };
    let intrinsics = Intrinsics::centered(1.1 * opts.width as f64, opts.width, opts.height)
        .expect("positive fixture dimensions");
    SceneSpec {
        name: preset.name().to_string(),
        primitives,
        ambient: 0.5,
        light_dir: [0.4, -0.6, -0.7],
        background: [0.0; 3],
        supersample: opts.supersample,
        rig: Rig {
            intrinsics,
            radius,
            height: -0.4,
            target: [0.0, 0.0, 0.0],
            angles: vec![-arc, 0.0, arc, -arc / 2.0, arc / 2.0],
            train: vec![0, 1, 2],
            test: vec![3, 4],
        },
        seed,
    }
}

/// Which pixels of a view were corrupted, and by how much.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionRecord {
    pub view: usize,
    pub mask: Vec<bool>,
    pub magnitude: f64,
}

#[derive(Debug, Clone)]
pub struct SceneFixture {
    pub spec: SceneSpec,
    /// All views with ground-truth depth attached (also as the MVS depth).
    pub views: Vec<View>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// `covis[i][j]`: pixels of view `i` visible from view `j` (all true for `i == j`).
    pub covis: Vec<Vec<Vec<bool>>>,
    pub corruption: Vec<CorruptionRecord>,
}

impl SceneFixture {
    pub fn train_views(&self) -> Vec<View> {
        self.train.iter().map(|&i| self.views[i].clone()).collect()
    }

    /// Co-visibility between two training views, indexed within the train split.
    pub fn train_covis(&self, i: usize, j: usize) -> &[bool] {
        &self.covis[self.train[i]][self.train[j]]
    }

    /// Replaces the MVS depth of view `view` with a corrupted copy and logs it.
    pub fn corrupt_view(&mut self, view: usize, fraction: f64, magnitude: f64, seed: u64) {
        let d = self.views[view].mvs_depth.as_ref().expect("fixture views carry depth");
        let (nd, mask) = corrupt_depth(d, fraction, magnitude, seed);
        self.views[view].mvs_depth = Some(nd);
        self.corruption.push(CorruptionRecord { view, mask, magnitude });
    }

    /// SHA-256 over images, depths, poses and intrinsics, as hex.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.views {
            for x in &v.image.data {
                h.update(x.to_le_bytes());
            }
            for d in [&v.gt_depth, &v.mvs_depth, &v.mono_depth].into_iter().flatten() {
                for (x, ok) in d.depth.iter().zip(&d.valid) {
                    h.update(x.to_le_bytes());
                    h.update([*ok as u8]);
                }
            }
            for x in v.pose.rotation.iter().chain(v.pose.translation.iter()) {
                h.update(x.to_le_bytes());
            }
            let k = v.intrinsics;
            for x in [k.fx, k.fy, k.cx, k.cy] {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn generate_scene(preset: Preset, seed: u64) -> SceneFixture {
    generate_scene_with(preset, seed, &FixtureOptions::default())
}

pub fn generate_scene_with(preset: Preset, seed: u64, opts: &FixtureOptions) -> SceneFixture {
    fixture_from_spec(preset_spec(preset, seed, opts))
}

/// Renders every rig view of `spec` and computes co-visibility.
pub fn fixture_from_spec(spec: SceneSpec) -> SceneFixture {
    let k = spec.rig.intrinsics;
    let views: Vec<View> = spec
        .rig
        .poses()
        .into_iter()
        .map(|pose| {
            let cam = Camera { intrinsics: k, pose };
            let (img, depth) = raytrace_reference(&spec, &cam);
            let mut v = View::new(img, k, pose).expect("dimensions agree");
            v.mvs_depth = Some(DepthMap {
                role: DepthRole::Mvs,
                ..depth.clone()
            });
            v.mono_depth = Some(synth_mono_depth(&depth, MonoDistortion::Power { exponent: 0.7 }));
            v.gt_depth = Some(depth);
            v
        })
        .collect();
    let n = views.len();
    let covis = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let d = views[i].gt_depth.as_ref().unwrap();
                    if i == j {
                        d.valid.clone()
                    } else {
                        covisibility(&spec, &views[i].camera(), d, &views[j].camera())
                    }
                })
                .collect()
        })
        .collect();
    SceneFixture {
        train: spec.rig.train.clone(),
        test: spec.rig.test.clone(),
        spec,
        views,
        covis,
        corruption: Vec::new(),
    }
}

/// Multiplies `round(fraction * valid)` randomly chosen valid depths by
/// `1 + magnitude` or `1 / (1 + magnitude)` (random sign). Returns the new
/// map and which pixels changed.
pub fn corrupt_depth(d: &DepthMap, fraction: f64, magnitude: f64, seed: u64) -> (DepthMap, Vec<bool>) {
    let valid: Vec<usize> = (0..d.valid.len()).filter(|&i| d.valid[i]).collect();
    let count = ((fraction.clamp(0.0, 1.0) * valid.len() as f64).round() as usize).min(valid.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, valid.len(), count).into_vec();
    picks.sort_unstable();
    let mut out = d.clone();
    let mut mask = vec![false; d.valid.len()];
    for p in picks {
        let i = valid[p];
        let factor = if rng.random::<bool>() { 1.0 + magnitude } else { 1.0 / (1.0 + magnitude) };
        out.depth[i] *= factor;
        mask[i] = true;
    }
    (out, mask)
}

/// Strictly increasing distortions standing in for a monocular depth network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MonoDistortion {
    Identity,
    Affine { a: f64, b: f64 },
    Power { exponent: f64 },
    Log1p,
}

impl MonoDistortion {
    pub fn apply(self, d: f64) -> f64 {
        match self {
            MonoDistortion::Identity => d,
            MonoDistortion::Affine { a, b } => a * d + b,
            MonoDistortion::Power { exponent } => d.powf(exponent),
            MonoDistortion::Log1p => d.ln_1p(),
        }
    }
}

pub fn synth_mono_depth(gt: &DepthMap, f: MonoDistortion) -> DepthMap {
    let mut out = gt.clone();
    out.role = DepthRole::Mono;
    for (d, &ok) in out.depth.iter_mut().zip(&gt.valid) {
        *d = if ok { f.apply(*d) } else { 0.0 };
    }
    out
}

/// Pixel at which a world point lands in `cam`, for tests.
pub fn project_world(cam: &Camera, p: &Vector3<f64>) -> Option<Point2<f64>> {
    project(&cam.pose.world_to_camera(p), &cam.intrinsics).ok()
}
