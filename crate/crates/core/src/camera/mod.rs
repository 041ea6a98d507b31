//! Pinhole cameras on an orbit sphere around the scene origin.
//!
//! World frame is right-handed with +y up. A camera's `rotation` maps camera
//! axes to world axes (camera-to-world): column 0 is right, column 1 is up and
//! column 2 points backwards, so the camera looks along `-rotation.col(2)`.

mod augment;
mod rays;

pub use nalgebra::{Matrix3, Vector3};

use crate::error::{invalid, Result};

pub use augment::{distortion_field, grid_distort, orbital_jitter, orbital_rotation, GridDistortSettings};
pub use rays::{plucker_embed, RayBundle};

/// Orbit radius used throughout training and inference.
pub const DEFAULT_RADIUS: f64 = 1.5;
/// Vertical field of view, degrees.
pub const DEFAULT_FOV_Y_DEG: f64 = 49.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
    /// Vertical field of view in radians.
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera on the sphere of `radius`, aimed at the origin.
    ///
    /// Azimuth rotates about +y from +z toward +x; elevation raises toward +y.
    pub fn orbit(
        elevation: f64,
        azimuth: f64,
        radius: f64,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(invalid!("orbit radius must be positive, got {radius}"));
        }
        let position = radius
            * Vector3::new(
                elevation.cos() * azimuth.sin(),
                elevation.sin(),
                elevation.cos() * azimuth.cos(),
            );
        Self::look_at(position, Vector3::zeros(), Vector3::y(), fov_y, width, height)
    }

    /// Camera at `position` looking at `target` with `up` kept in the view plane.
    pub fn look_at(
        position: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(fov_y > 0.0 && fov_y < std::f64::consts::PI) {
            return Err(invalid!("fov_y must lie in (0, pi), got {fov_y}"));
        }
        if width == 0 || height == 0 {
            return Err(invalid!("image size must be positive, got {width}x{height}"));
        }
        let to_target = target - position;
        let dist = to_target.norm();
        if dist < 1e-12 {
            return Err(invalid!("camera position coincides with its target"));
        }
        let forward = to_target / dist;
        let right = forward.cross(&up);
        let rn = right.norm();
        if rn < 1e-9 {
            return Err(invalid!("view direction is parallel to the up vector"));
        }
        let right = right / rn;
        let cam_up = right.cross(&forward);
        let rotation = Matrix3::from_columns(&[right, cam_up, -forward]);
        Ok(Self {
            rotation,
            position,
            fov_y,
            width,
            height,
        })
    }

    pub fn forward(&self) -> Vector3<f64> {
        -self.rotation.column(2).into_owned()
    }

    /// Focal length in pixels (square pixels).
    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov_y).tan()
    }

    /// World-to-view rotation into a frame with x right, y down, z forward.
    pub fn view_rotation(&self) -> Matrix3<f64> {
        let flip = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        flip * self.rotation.transpose()
    }

    /// `(u, v, depth)` pixel coordinates of a world point; `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let a = self.view_rotation() * (p - self.position);
        if a.z <= 0.0 {
            return None;
        }
        let f = self.focal();
        Some((
            0.5 * self.width as f64 + f * a.x / a.z,
            0.5 * self.height as f64 + f * a.y / a.z,
            a.z,
        ))
    }

    /// Unit world-space direction through continuous pixel coordinates `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let f = self.focal();
        let ax = (u - 0.5 * self.width as f64) / f;
        let ay = (v - 0.5 * self.height as f64) / f;
        (self.rotation * Vector3::new(ax, -ay, -1.0)).normalize()
    }

    /// Largest entry of `|RᵀR - I|` and `|det R - 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let e = (r.transpose() * r - Matrix3::identity()).abs().max();
        e.max((r.determinant() - 1.0).abs())
    }

    /// 14 floats: row-major rotation, position, fov_y, reserved zero.
    pub fn to_floats(&self) -> [f32; 14] {
        let mut out = [0f32; 14];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 3 + j] = self.rotation[(i, j)] as f32;
            }
            out[9 + i] = self.position[i] as f32;
        }
        out[12] = self.fov_y as f32;
        out
    }

    pub fn from_floats(v: &[f32], width: usize, height: usize) -> Result<Self> {
        if v.len() != 14 {
            return Err(invalid!("camera record needs 14 floats, got {}", v.len()));
        }
        let f = |i: usize| v[i] as f64;
        Self::from_parts(
            Matrix3::new(f(0), f(1), f(2), f(3), f(4), f(5), f(6), f(7), f(8)),
            Vector3::new(f(9), f(10), f(11)),
            f(12),
            width,
            height,
        )
    }

    /// Validates a raw pose. The rotation tolerance accommodates f32 storage.
    pub fn from_parts(
        rotation: Matrix3<f64>,
        position: Vector3<f64>,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            rotation,
            position,
            fov_y,
            width,
            height,
        };
        if !(fov_y > 0.0 && fov_y < std::f64::consts::PI) {
            return Err(invalid!("fov_y must lie in (0, pi), got {fov_y}"));
        }
        let err = cam.orthonormality_error();
        if !(err < 1e-4) {
            return Err(invalid!("camera rotation is not orthonormal (error {err:.2e})"));
        }
        Ok(cam)
    }

    pub fn with_size(&self, width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ..self.clone()
        }
    }
}

/// Rigidly moves all cameras so the first becomes the canonical front view
/// `orbit(0, 0, |p0|)`. Relative poses are unchanged.
pub fn normalize_poses(cameras: &[Camera]) -> Result<Vec<Camera>> {
    let first = cameras
        .first()
        .ok_or_else(|| invalid!("normalize_poses needs at least one camera"))?;
    normalize_poses_to(cameras, first.position.norm())
}

/// As [`normalize_poses`] but the first camera lands at `orbit(0, 0, radius)`
/// for a caller-known radius, avoiding the rounding of `|p0|`.
pub fn normalize_poses_to(cameras: &[Camera], radius: f64) -> Result<Vec<Camera>> {
    let first = cameras
        .first()
        .ok_or_else(|| invalid!("normalize_poses needs at least one camera"))?;
    if first.position.norm() < 1e-12 || !(radius > 0.0) {
        return Err(invalid!("first camera sits at the origin"));
    }
    let canonical = Camera::orbit(0.0, 0.0, radius, first.fov_y, first.width, first.height)?;
    // X(p) = Q p + t with Q R0 = I and X(p0) = (0, 0, r)
    let q = first.rotation.transpose();
    let t = canonical.position - q * first.position;
    let mut out = Vec::with_capacity(cameras.len());
    out.push(canonical);
    for cam in &cameras[1..] {
        out.push(Camera {
            rotation: q * cam.rotation,
            position: q * cam.position + t,
            ..cam.clone()
        });
    }
    Ok(out)
}
