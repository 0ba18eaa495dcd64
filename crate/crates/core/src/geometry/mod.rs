//! Pinhole camera model, rigid transforms and ground-truth labelling.
//!
//! Conventions used throughout the crate:
//!
//! - A pose `T = [R|t]` maps cloud (world) coordinates into the camera frame.
//! - The camera looks along `+z`, `x` points right and `y` points down, so the
//!   "up" axis is camera `-y` and the ground plane is `x`-`z`.
//! - Pixel coordinates are `u` = column, `v` = row. A point projecting to
//!   `(u, v)` belongs to pixel cell `(floor(u), floor(v))` and is inside the
//!   image iff `0 <= u < W` and `0 <= v < H`.

pub mod io;

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector2, Vector3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Depth at or below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

/// Tolerance on `RᵀR = I` and `det R = 1`.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("only {available} points inside the frustum, {requested} requested")]
    InsufficientOverlap { available: usize, requested: usize },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
    #[error("invalid image size {width}x{height}: both must be positive multiples of 32")]
    InvalidImageSpec { width: usize, height: usize },
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),
}

/// Pinhole intrinsics with zero skew.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite, got fx={fx} fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point must be finite, got cx={cx} cy={cy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// The 3x3 camera matrix `K`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Maps a pixel to normalized image coordinates (`K⁻¹ [u v 1]ᵀ` without the 1).
    pub fn normalize(&self, uv: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((uv.x - self.cx) / self.fx, (uv.y - self.cy) / self.fy)
    }

    /// Projects a camera-frame point. Fails for depth `<= MIN_DEPTH`.
    pub fn project_camera(&self, pc: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        let homog = self.matrix() * pc;
        let z = homog.z;
        if z <= MIN_DEPTH {
            return Err(GeometryError::NonPositiveDepth(z));
        }
        Ok(Vector2::new(homog.x / z, homog.y / z))
    }
}

/// Rigid motion `x ↦ R x + t`, cloud frame to camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let ortho = rotation.transpose() * rotation - Matrix3::identity();
        let max_dev = ortho.abs().max();
        if !(max_dev <= ROTATION_TOL) {
            return Err(GeometryError::InvalidRotation(format!(
                "RᵀR deviates from identity by {max_dev:e}"
            )));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ROTATION_TOL) {
            return Err(GeometryError::InvalidRotation(format!("det R = {det}")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidRotation("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    /// Projects an arbitrary 3x3 matrix onto SO(3) (nearest rotation in the
    /// Frobenius sense) and builds a transform from it.
    pub fn from_approximate(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: nearest_rotation(rotation), translation }
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_rotation(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: nearest_rotation(rotation.matrix()), translation }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major `[R|t]` entries.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }
}

/// Nearest proper rotation to `m` via SVD, with `det = +1` enforced.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

pub fn compose(t1: &RigidTransform, t2: &RigidTransform) -> RigidTransform {
    t1.compose(t2)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// Cloud of `N >= 1` finite points, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::InvalidCloud("cloud is empty".into()));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(GeometryError::InvalidCloud(format!("point {i} is not finite")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sub-cloud made of the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self, GeometryError> {
        Self::new(indices.iter().map(|&i| self.points[i]).collect())
    }
}

/// Image size in pixels; both sides are multiples of 32.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSpec {
    pub width: usize,
    pub height: usize,
}

impl ImageSpec {
    pub fn new(width: usize, height: usize) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 || width % 32 != 0 || height % 32 != 0 {
            return Err(GeometryError::InvalidImageSpec { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn contains(&self, uv: &Vector2<f64>) -> bool {
        uv.x >= 0.0 && uv.y >= 0.0 && uv.x < self.width as f64 && uv.y < self.height as f64
    }

    /// Row-major pixel index of the cell containing `uv`, if inside.
    pub fn pixel_index(&self, uv: &Vector2<f64>) -> Option<usize> {
        if !self.contains(uv) {
            return None;
        }
        let u = (uv.x.floor() as usize).min(self.width - 1);
        let v = (uv.y.floor() as usize).min(self.height - 1);
        Some(v * self.width + u)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Projects a cloud point through pose and intrinsics: `K (R p + t)` then
/// divide by depth.
pub fn project_point(
    k: &Intrinsics,
    t: &RigidTransform,
    p: &Vector3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    k.project_camera(&t.apply(p))
}

pub fn in_frustum(k: &Intrinsics, t: &RigidTransform, p: &Vector3<f64>, spec: &ImageSpec) -> bool {
    match project_point(k, t, p) {
        Ok(uv) => spec.contains(&uv),
        Err(_) => false,
    }
}

/// Ground-truth overlap masks.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapLabels {
    /// One flag per cloud point.
    pub point_mask: Vec<bool>,
    /// Row-major `H x W` flags; index `v * W + u`.
    pub pixel_mask: Vec<bool>,
}

impl OverlapLabels {
    /// OR-pools the pixel mask into `factor x factor` cells (row-major).
    pub fn pooled_pixel_mask(&self, spec: &ImageSpec, factor: usize) -> Vec<bool> {
        let (w, h) = (spec.width / factor, spec.height / factor);
        let mut out = vec![false; w * h];
        for v in 0..spec.height {
            for u in 0..spec.width {
                if self.pixel_mask[v * spec.width + u] {
                    out[(v / factor) * w + u / factor] = true;
                }
            }
        }
        out
    }
}

pub fn label_overlap(
    k: &Intrinsics,
    t: &RigidTransform,
    cloud: &PointCloud,
    spec: &ImageSpec,
) -> OverlapLabels {
    let mut point_mask = vec![false; cloud.len()];
    let mut pixel_mask = vec![false; spec.pixel_count()];
    for (i, p) in cloud.points().iter().enumerate() {
        if let Ok(uv) = project_point(k, t, p) {
            if let Some(idx) = spec.pixel_index(&uv) {
                point_mask[i] = true;
                pixel_mask[idx] = true;
            }
        }
    }
    OverlapLabels { point_mask, pixel_mask }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtPair {
    pub uv: Vector2<f64>,
    pub point_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthCorrespondences {
    pub pairs: Vec<GtPair>,
    pub pose: RigidTransform,
}

/// Uniformly samples `n` in-frustum points without replacement and pairs each
/// with its projection.
pub fn sample_gt_correspondences(
    k: &Intrinsics,
    t: &RigidTransform,
    cloud: &PointCloud,
    spec: &ImageSpec,
    n: usize,
    seed: u64,
) -> Result<GroundTruthCorrespondences, GeometryError> {
    let visible: Vec<(usize, Vector2<f64>)> = cloud
        .points()
        .iter()
        .enumerate()
        .filter_map(|(i, p)| match project_point(k, t, p) {
            Ok(uv) if spec.contains(&uv) => Some((i, uv)),
            _ => None,
        })
        .collect();
    if visible.len() < n {
        return Err(GeometryError::InsufficientOverlap { available: visible.len(), requested: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = index::sample(&mut rng, visible.len(), n);
    let pairs = chosen
        .iter()
        .map(|j| GtPair { uv: visible[j].1, point_index: visible[j].0 })
        .collect();
    Ok(GroundTruthCorrespondences { pairs, pose: *t })
}

/// Camera up direction (camera `-y`).
pub fn up_axis() -> Unit<Vector3<f64>> {
    Unit::new_normalize(Vector3::new(0.0, -1.0, 0.0))
}

/// Random rotation about the up axis by an angle uniform in `[0, 2π)` plus a
/// ground-plane translation uniform in the disk of radius `max_translation`.
pub fn sample_random_pose(max_translation: f64, seed: u64) -> RigidTransform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (angle, translation) = draw_ground_pose(&mut rng, max_translation.max(0.0));
    RigidTransform::from_rotation(Rotation3::from_axis_angle(&up_axis(), angle), translation)
}

/// Draws `(angle, translation)` for [`sample_random_pose`]; exposed so tests
/// can look at the raw angle.
pub fn draw_ground_pose<R: Rng>(rng: &mut R, max_translation: f64) -> (f64, Vector3<f64>) {
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let radius = max_translation * rng.random::<f64>().sqrt();
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    (angle, Vector3::new(radius * heading.cos(), 0.0, radius * heading.sin()))
}
