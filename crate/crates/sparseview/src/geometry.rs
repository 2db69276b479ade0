//! Cameras, rigid transforms, rays, and the pseudo-pose grid.
//!
//! All values are plain `f64` and immutable after construction. The axis
//! convention is the Blender-style one used by the supported scene format:
//! camera looks along -z, y is up, x is right, and poses are camera-to-world.
//! The convention is isolated in [`Intrinsics::pixel_dir`],
//! [`Intrinsics::back_project`], and [`Intrinsics::project`]; nothing else in
//! the crate hard-codes a sign.

use nalgebra::{Matrix3, Vector3};

use crate::{Error, Result};

/// Pinhole camera intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::Config(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Symmetric pinhole from a horizontal field of view in radians.
    pub fn from_fov_x(fov_x: f64, width: usize, height: usize) -> Result<Self> {
        if !(fov_x > 0.0 && fov_x < std::f64::consts::PI) {
            return Err(Error::Config(format!("fov_x {fov_x} rad out of (0, pi)")));
        }
        let fx = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::new(fx, fx, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    /// Intrinsics for the same frustum at `scale` times the resolution.
    pub fn scaled(&self, scale: f64) -> Result<Self> {
        let width = ((self.width as f64 * scale).round() as usize).max(1);
        let height = ((self.height as f64 * scale).round() as usize).max(1);
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self::new(
            self.fx * sx,
            self.fy * sy,
            self.cx * sx,
            self.cy * sy,
            width,
            height,
        )
    }

    /// Camera-frame direction through pixel center `(u, v)`, unnormalized.
    ///
    /// This is the single place the -z / y-up convention enters: +u maps to
    /// +x, +v maps to -y (image rows grow downward), and the ray leaves the
    /// camera along -z.
    #[inline]
    pub fn pixel_dir(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, -(v - self.cy) / self.fy, -1.0)
    }

    /// Camera-frame point at pixel `(u, v)` and z-depth `depth` (> 0 in
    /// front of the camera).
    #[inline]
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        self.pixel_dir(u, v) * depth
    }

    /// Project a camera-frame point to continuous pixel coordinates and
    /// z-depth. `None` when the point is not strictly in front of the camera.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let depth = -p.z;
        if depth <= 1e-9 {
            return None;
        }
        let u = self.cx + self.fx * p.x / depth;
        let v = self.cy - self.fy * p.y / depth;
        Some((u, v, depth))
    }

    #[inline]
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Camera-to-world rigid pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ORTHO_TOL: f64 = 1e-6;

impl Pose {
    /// Validates orthonormality and positive determinant.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let err = (gram - Matrix3::identity()).abs().max();
        if err > ORTHO_TOL {
            return Err(Error::Data(format!(
                "rotation not orthonormal (max |R'R - I| = {err:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::Data(format!("rotation determinant {det} != +1")));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`, roll fixed by `up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Config("look_at: eye coincides with target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Config("look_at: view direction parallel to up".into()))?;
        let cam_up = right.cross(&forward);
        // Columns are the world directions of the camera axes; camera z
        // points backward per the -z viewing convention.
        let rotation = Matrix3::from_columns(&[right, cam_up, -forward]);
        Pose::new(rotation, eye)
    }

    #[inline]
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    #[inline]
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// World direction the camera looks along.
    #[inline]
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation * Vector3::new(0.0, 0.0, -1.0)
    }

    #[inline]
    pub fn cam_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn world_to_cam(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Row-major 4x4 camera-to-world matrix (last row 0 0 0 1).
    pub fn to_matrix4(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_matrix4(m: &[[f64; 4]; 4]) -> Result<Self> {
        let rotation = Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        );
        let translation = Vector3::new(m[0][3], m[1][3], m[2][3]);
        Pose::new(rotation, translation)
    }
}

/// Mapping from one camera frame to another (source-camera coordinates to
/// destination-camera coordinates).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn compose(&self, inner: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * inner.rotation,
            translation: self.rotation * inner.translation + self.translation,
        }
    }
}

/// Transform taking source-camera-frame points to destination-camera-frame
/// points, composing source -> world -> destination.
pub fn compose_relative(src: &Pose, dst: &Pose) -> RigidTransform {
    let rotation = dst.rotation.transpose() * src.rotation;
    let translation = dst.rotation.transpose() * (src.translation - dst.translation);
    RigidTransform {
        rotation,
        translation,
    }
}

/// A world-space ray with unit direction and a sampling interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>, near: f64, far: f64) -> Result<Self> {
        let norm = direction.norm();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "ray direction norm {norm} != 1"
            )));
        }
        if !(near >= 0.0 && near < far) {
            return Err(Error::Contract(format!(
                "invalid ray interval [{near}, {far})"
            )));
        }
        Ok(Self {
            origin,
            direction,
            near,
            far,
        })
    }

    #[inline]
    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// World ray through the center of pixel `(u, v)`.
pub fn ray_for_pixel(camera: &Intrinsics, pose: &Pose, u: f64, v: f64, near: f64, far: f64) -> Result<Ray> {
    if !camera.contains(u, v) {
        return Err(Error::Domain(format!(
            "pixel ({u}, {v}) outside {}x{} image",
            camera.width, camera.height
        )));
    }
    let dir_world = (pose.rotation * camera.pixel_dir(u, v)).normalize();
    Ray::new(*pose.translation(), dir_world, near, far)
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// All camera-frame rotations of `reference` about its own center, sweeping
/// each axis over `[-alpha, +alpha]` degrees at `step` degree intervals.
///
/// The zero combination is excluded, so the count is
/// `(2 * alpha / step + 1)^3 - 1`. Composition order is fixed at
/// `Rz * Ry * Rx` for determinism.
pub fn pose_grid(reference: &Pose, alpha_deg: f64, step_deg: f64) -> Result<Vec<Pose>> {
    if step_deg <= 0.0 {
        return Err(Error::Config(format!("step {step_deg} deg must be > 0")));
    }
    if alpha_deg < step_deg {
        return Err(Error::Config(format!(
            "alpha {alpha_deg} deg must be >= step {step_deg} deg"
        )));
    }
    let ratio = alpha_deg / step_deg;
    if (ratio - ratio.round()).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "alpha {alpha_deg} deg not divisible by step {step_deg} deg"
        )));
    }
    let half = ratio.round() as i64;

    let mut poses = Vec::with_capacity(((2 * half + 1).pow(3) - 1) as usize);
    for iz in -half..=half {
        for iy in -half..=half {
            for ix in -half..=half {
                if ix == 0 && iy == 0 && iz == 0 {
                    continue;
                }
                let (ax, ay, az) = (
                    (ix as f64 * step_deg).to_radians(),
                    (iy as f64 * step_deg).to_radians(),
                    (iz as f64 * step_deg).to_radians(),
                );
                let delta = rot_z(az) * rot_y(ay) * rot_x(ax);
                poses.push(Pose::new(reference.rotation * delta, reference.translation)?);
            }
        }
    }
    Ok(poses)
}
