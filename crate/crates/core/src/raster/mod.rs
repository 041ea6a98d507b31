//! Differentiable Gaussian splatting: EWA projection, global depth sort and
//! front-to-back compositing.

mod backward;
mod forward;
mod op;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use crate::camera::Camera;
use crate::error::{invalid, Result};

pub use backward::{render_gradients, GaussianGrads};
pub use forward::{render, render_reference, render_retained, Contribution, RenderOutput, RenderState};
pub use op::{render_var, RenderedVar};

/// Contributions below this are skipped.
pub const ALPHA_FLOOR: f64 = 1.0 / 255.0;
/// Per-splat opacity ceiling.
pub const ALPHA_CEIL: f64 = 0.999;
/// Splats whose 2D covariance is worse conditioned than this are skipped.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub near: f64,
    pub far: f64,
    /// Footprint radius in standard deviations.
    pub cutoff: f64,
    /// Added to the 2D covariance diagonal, pixels².
    pub dilation: f64,
    /// A pixel stops compositing once its transmittance drops below this;
    /// 0 composites every splat.
    pub min_transmittance: f64,
}

impl RenderSettings {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            background: [1.0; 3],
            near: 0.01,
            far: 100.0,
            cutoff: 3.0,
            dilation: 0.3,
            min_transmittance: 1e-4,
        }
    }

    pub fn with_background(mut self, background: [f64; 3]) -> Self {
        self.background = background;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(invalid!("render size must be positive, got {}x{}", self.width, self.height));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(invalid!("need 0 < near < far, got near {} far {}", self.near, self.far));
        }
        if !(self.cutoff > 0.0) || !(self.dilation >= 0.0) {
            return Err(invalid!("cutoff must be positive and dilation non-negative"));
        }
        if !(0.0..1.0).contains(&self.min_transmittance) {
            return Err(invalid!("min_transmittance must lie in [0, 1), got {}", self.min_transmittance));
        }
        Ok(())
    }
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub mean: [f64; 2],
    pub cov2d: Matrix2<f64>,
    /// View-space distance along the optical axis.
    pub depth: f64,
}

pub(crate) fn rotation_from_unit_quaternion(q: [f64; 4]) -> Matrix3<f64> {
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

/// `q / |q|`, or the identity when `|q| < 1e-8`. Returns the norm used (0 for
/// the fallback).
pub(crate) fn unit_quaternion(q: [f64; 4]) -> ([f64; 4], f64) {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < 1e-8 {
        ([1.0, 0.0, 0.0, 0.0], 0.0)
    } else {
        (q.map(|v| v / n), n)
    }
}

pub(crate) fn covariance_factor(s: [f64; 3], q: [f64; 4]) -> (Matrix3<f64>, Matrix3<f64>) {
    let r = rotation_from_unit_quaternion(q);
    let m = r * Matrix3::from_diagonal(&Vector3::from(s));
    (r, m)
}

/// `Σ = R(q)·diag(s)²·R(q)ᵀ`.
pub fn build_covariance(s: [f64; 3], q: [f64; 4]) -> Result<Matrix3<f64>> {
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !((qn - 1.0).abs() <= 1e-6) {
        return Err(invalid!("quaternion {q:?} is not unit (norm {qn})"));
    }
    if !s.iter().all(|&v| v > 0.0) {
        return Err(invalid!("scales must be positive, got {s:?}"));
    }
    let (_, m) = covariance_factor(s, q);
    Ok(m * m.transpose())
}

/// Per-camera quantities shared by all Gaussians.
#[derive(Debug, Clone)]
pub(crate) struct ViewGeometry {
    pub view: Matrix3<f64>,
    pub position: Vector3<f64>,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub near: f64,
    pub far: f64,
    pub dilation: f64,
}

impl ViewGeometry {
    pub fn new(camera: &Camera, settings: &RenderSettings) -> Self {
        let cam = camera.with_size(settings.width, settings.height);
        Self {
            view: cam.view_rotation(),
            position: cam.position,
            focal: cam.focal(),
            cx: 0.5 * settings.width as f64,
            cy: 0.5 * settings.height as f64,
            near: settings.near,
            far: settings.far,
            dilation: settings.dilation,
        }
    }

    /// View-space center, or `None` outside `[near, far]`.
    pub fn view_point(&self, center: [f64; 3]) -> Option<Vector3<f64>> {
        let a = self.view * (Vector3::from(center) - self.position);
        (a.z >= self.near && a.z <= self.far).then_some(a)
    }

    pub fn jacobian(&self, a: &Vector3<f64>) -> Matrix2x3<f64> {
        let f = self.focal;
        let t = a.z;
        Matrix2x3::new(f / t, 0.0, -f * a.x / (t * t), 0.0, f / t, -f * a.y / (t * t))
    }

    pub fn project(&self, center: [f64; 3], cov: &Matrix3<f64>) -> Option<Projected> {
        let a = self.view_point(center)?;
        let t = self.jacobian(&a) * self.view;
        let cov2d = t * cov * t.transpose() + Matrix2::identity() * self.dilation;
        Some(Projected {
            mean: [self.cx + self.focal * a.x / a.z, self.cy + self.focal * a.y / a.z],
            cov2d,
            depth: a.z,
        })
    }
}

/// EWA projection of a 3D Gaussian; `None` when the center lies outside the
/// near/far range.
pub fn project_gaussian(
    center: [f64; 3],
    cov: &Matrix3<f64>,
    camera: &Camera,
    settings: &RenderSettings,
) -> Option<Projected> {
    ViewGeometry::new(camera, settings).project(center, cov)
}

/// Eigenvalues `(λmax, λmin)` of a symmetric 2×2 matrix.
pub(crate) fn eigen2(m: &Matrix2<f64>) -> (f64, f64) {
    let mid = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let disc = (mid * mid - det).max(0.0).sqrt();
    (mid + disc, mid - disc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn front() -> Camera {
        Camera::orbit(0.0, 0.0, 1.5, 49.1f64.to_radians(), 64, 64).unwrap()
    }

    #[test]
    fn covariance_cases() {
        let id = build_covariance([1.0; 3], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((id - Matrix3::identity()).abs().max() < 1e-15);
        let q = [0.5, 0.5, -0.5, 0.5];
        let a = build_covariance([0.1, 0.2, 0.3], q).unwrap();
        let b = build_covariance([0.1, 0.2, 0.3], q.map(|v| -v)).unwrap();
        assert_eq!(a, b);
        assert!(build_covariance([0.1; 3], [1.0, 0.1, 0.0, 0.0]).is_err());
        assert!(build_covariance([0.0, 0.1, 0.1], [1.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn on_axis_projection() {
        let s = RenderSettings::new(64, 64);
        let cov = Matrix3::identity() * 0.01;
        let p = project_gaussian([0.0; 3], &cov, &front(), &s).unwrap();
        assert_eq!(p.mean, [32.0, 32.0]);
        assert!((p.depth - 1.5).abs() < 1e-15);
        assert!((p.cov2d[(0, 0)] - p.cov2d[(1, 1)]).abs() < 1e-9);
        assert!(p.cov2d[(0, 1)].abs() < 1e-12);
        let behind = project_gaussian([0.0, 0.0, 2.0], &cov, &front(), &s);
        assert!(behind.is_none());
    }

    #[test]
    fn settings_validation() {
        let mut s = RenderSettings::new(4, 4);
        s.validate().unwrap();
        s.near = 200.0;
        assert!(s.validate().is_err());
    }
}
