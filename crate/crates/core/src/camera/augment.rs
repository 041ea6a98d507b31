use nalgebra::{Rotation3, Unit, Vector3};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::Camera;
use crate::error::{invalid, shape_err, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridDistortSettings {
    /// Control points per side, borders included.
    pub cells: usize,
    /// Displacement bound as a fraction of half a cell.
    pub strength: f64,
}

impl Default for GridDistortSettings {
    fn default() -> Self {
        Self { cells: 8, strength: 0.5 }
    }
}

/// Source sample positions `(x, y)` in continuous pixel coordinates for every
/// pixel center, row-major. Border control points stay fixed.
pub fn distortion_field(
    width: usize,
    height: usize,
    settings: GridDistortSettings,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let GridDistortSettings { cells, strength } = settings;
    if cells < 2 {
        return Err(invalid!("grid distortion needs at least 2 control points per side"));
    }
    if !(0.0..1.0).contains(&strength) {
        return Err(invalid!("distortion strength must lie in [0, 1), got {strength}"));
    }
    let (wf, hf) = (width as f64, height as f64);
    let cell_x = wf / (cells - 1) as f64;
    let cell_y = hf / (cells - 1) as f64;
    let mut r = rng::seeded(seed);
    let mut disp = vec![(0.0, 0.0); cells * cells];
    for j in 1..cells - 1 {
        for i in 1..cells - 1 {
            let mx = strength * cell_x / 2.0;
            let my = strength * cell_y / 2.0;
            let dx = if mx > 0.0 { r.random_range(-mx..=mx) } else { 0.0 };
            let dy = if my > 0.0 { r.random_range(-my..=my) } else { 0.0 };
            disp[j * cells + i] = (dx, dy);
        }
    }
    let locate = |p: f64, cell: f64| {
        let u = p / cell;
        let c = (u.floor() as usize).min(cells - 2);
        (c, u - c as f64)
    };
    let mut out = Vec::with_capacity(width * height);
    for py in 0..height {
        let y = py as f64 + 0.5;
        let (cy, fy) = locate(y, cell_y);
        for px in 0..width {
            let x = px as f64 + 0.5;
            let (cx, fx) = locate(x, cell_x);
            let d = |a: usize, b: usize| disp[b * cells + a];
            let (d00, d10, d01, d11) = (d(cx, cy), d(cx + 1, cy), d(cx, cy + 1), d(cx + 1, cy + 1));
            let lerp2 = |a: f64, b: f64, c: f64, e: f64| {
                (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * e)
            };
            let dx = lerp2(d00.0, d10.0, d01.0, d11.0);
            let dy = lerp2(d00.1, d10.1, d01.1, d11.1);
            out.push((x + dx, y + dy));
        }
    }
    Ok(out)
}

/// Warps every channel of a `[C, H, W]` image with one random smooth field.
pub fn grid_distort<T: Real>(image: &Tensor<T>, settings: GridDistortSettings, seed: u64) -> Result<Tensor<T>> {
    if image.ndim() != 3 {
        return Err(shape_err!("grid_distort expects [C, H, W], got {:?}", image.shape()));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if settings.strength == 0.0 {
        distortion_field(w, h, settings, seed)?;
        return Ok(image.clone());
    }
    let field = distortion_field(w, h, settings, seed)?;
    let src = image.data();
    let mut out = Tensor::zeros(image.shape());
    let dst = out.data_mut();
    for (i, &(x, y)) in field.iter().enumerate() {
        let sx = (x - 0.5).clamp(0.0, (w - 1) as f64);
        let sy = (y - 0.5).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (T::of(sx - x0 as f64), T::of(sy - y0 as f64));
        let one = T::one();
        for ch in 0..c {
            let p = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx];
            dst[ch * h * w + i] = (one - fy) * ((one - fx) * p(y0, x0) + fx * p(y0, x1))
                + fy * ((one - fx) * p(y1, x0) + fx * p(y1, x1));
        }
    }
    Ok(out)
}

fn random_axis(r: &mut rng::Rng) -> Unit<Vector3<f64>> {
    loop {
        let v = Vector3::new(StandardNormal.sample(r), StandardNormal.sample(r), StandardNormal.sample(r));
        if let Some(u) = Unit::try_new(v, 1e-9) {
            return u;
        }
    }
}

fn rotate_about_origin(camera: &Camera, axis: &Unit<Vector3<f64>>, angle: f64) -> Camera {
    let rot = Rotation3::from_axis_angle(axis, angle);
    Camera {
        rotation: rot * camera.rotation,
        position: rot * camera.position,
        ..camera.clone()
    }
}

/// Rotates the whole pose about a random axis through the origin by an angle
/// drawn uniformly from `[0, max_angle]`.
pub fn orbital_jitter(camera: &Camera, max_angle: f64, seed: u64) -> Result<Camera> {
    if !(max_angle >= 0.0 && max_angle.is_finite()) {
        return Err(invalid!("jitter angle must be finite and non-negative, got {max_angle}"));
    }
    let mut r = rng::seeded(seed);
    let axis = random_axis(&mut r);
    let angle = if max_angle > 0.0 { r.random_range(0.0..=max_angle) } else { 0.0 };
    Ok(rotate_about_origin(camera, &axis, angle))
}

/// Like [`orbital_jitter`] with the angle fixed at `angle`.
pub fn orbital_rotation(camera: &Camera, angle: f64, seed: u64) -> Result<Camera> {
    if !angle.is_finite() {
        return Err(invalid!("rotation angle must be finite, got {angle}"));
    }
    let axis = random_axis(&mut rng::seeded(seed));
    Ok(rotate_about_origin(camera, &axis, angle))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[c, h, w], |i| ((i % 13) * (i / w % 7)) as f64 * 0.01)
    }

    #[test]
    fn zero_strength_is_identity() {
        let img = image(3, 16, 20);
        let s = GridDistortSettings { cells: 8, strength: 0.0 };
        assert_eq!(grid_distort(&img, s, 5).unwrap(), img);
    }

    #[test]
    fn deterministic_per_seed() {
        let img = image(2, 24, 24);
        let s = GridDistortSettings::default();
        assert_eq!(grid_distort(&img, s, 9).unwrap(), grid_distort(&img, s, 9).unwrap());
        assert_ne!(grid_distort(&img, s, 9).unwrap(), grid_distort(&img, s, 10).unwrap());
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::<f64>::full(&[3, 32, 32], 0.42);
        let out = grid_distort(&img, GridDistortSettings { cells: 6, strength: 0.9 }, 1).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.42).abs() < 1e-12));
    }

    #[test]
    fn samples_stay_inside_and_field_is_orientation_preserving() {
        let (w, h) = (40, 30);
        let s = GridDistortSettings { cells: 5, strength: 0.45 };
        for seed in 0..5 {
            let f = distortion_field(w, h, s, seed).unwrap();
            for &(x, y) in &f {
                assert!((0.0..=w as f64).contains(&x) && (0.0..=h as f64).contains(&y));
            }
            // forward differences keep positive determinant
            for py in 0..h - 1 {
                for px in 0..w - 1 {
                    let p = f[py * w + px];
                    let ax = f[py * w + px + 1];
                    let ay = f[(py + 1) * w + px];
                    let det = (ax.0 - p.0) * (ay.1 - p.1) - (ax.1 - p.1) * (ay.0 - p.0);
                    assert!(det > 0.0);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_settings() {
        let img = image(1, 4, 4);
        assert!(grid_distort(&img, GridDistortSettings { cells: 1, strength: 0.1 }, 0).is_err());
        assert!(grid_distort(&img, GridDistortSettings { cells: 4, strength: 1.0 }, 0).is_err());
        assert!(grid_distort(&Tensor::<f64>::zeros(&[4, 4]), GridDistortSettings::default(), 0).is_err());
    }

    #[test]
    fn jitter_preserves_radius_and_orthonormality() {
        let cam = Camera::orbit(0.2, 0.4, 1.5, 0.8, 8, 8).unwrap();
        for seed in 0..50 {
            let j = orbital_jitter(&cam, 10f64.to_radians(), seed).unwrap();
            assert!((j.position.norm() - 1.5).abs() < 1e-9);
            assert!(j.orthonormality_error() < 1e-12);
            assert!((j.forward() + j.position.normalize()).norm() < 1e-9);
        }
        assert_eq!(orbital_jitter(&cam, 0.0, 3).unwrap(), cam);
    }
}
