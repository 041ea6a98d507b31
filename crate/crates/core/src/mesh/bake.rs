use std::f64::consts::PI;

use nalgebra::Vector3;

use super::{default_iso, eval_density, DensityGrid, Mesh, DEFAULT_RESOLUTION};
use crate::camera::{Camera, DEFAULT_FOV_Y_DEG, DEFAULT_RADIUS};
use crate::error::{invalid, Result};
use crate::gaussian::GaussianSet;
use crate::raster::{render, RenderSettings};
use crate::tensor::Tensor;

const BAKE_RES: usize = 128;
/// Rendered pixels with less coverage than this are not sampled.
const MIN_COVERAGE: f64 = 0.05;

/// `n` orbit cameras spread over the sphere on a golden-angle spiral.
pub(crate) fn spiral_cameras(n: usize, res: usize) -> Result<Vec<Camera>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            Camera::orbit(y.asin(), i as f64 * golden, DEFAULT_RADIUS, DEFAULT_FOV_Y_DEG.to_radians(), res, res)
        })
        .collect()
}

/// Bilinear lookup of the un-premultiplied color at continuous pixel `(u, v)`.
fn sample_color(rgb: &Tensor<f64>, alpha: &Tensor<f64>, u: f64, v: f64) -> Option<[f64; 3]> {
    let (h, w) = (alpha.shape()[1], alpha.shape()[2]);
    let (x, y) = (u - 0.5, v - 0.5);
    if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return None;
    }
    let (x0, y0) = ((x.floor() as usize).min(w - 2), (y.floor() as usize).min(h - 2));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let hw = h * w;
    let lerp = |plane: &[f64]| {
        let at = |xx: usize, yy: usize| plane[yy * w + xx];
        (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x0 + 1, y0)) + fy * ((1.0 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1))
    };
    let a = lerp(alpha.data());
    if a < MIN_COVERAGE {
        return None;
    }
    let d = rgb.data();
    Some(std::array::from_fn(|k| (lerp(&d[k * hw..(k + 1) * hw]) / a).clamp(0.0, 1.0)))
}

/// True when nothing along the segment from `from` to `to` crosses `iso`
/// more than `tolerance` before `to`.
fn unoccluded(grid: &DensityGrid, iso: f64, from: Vector3<f64>, to: Vector3<f64>, tolerance: f64) -> bool {
    let d = to - from;
    let dist = d.norm();
    let step = 0.5 * grid.cell_size();
    let dir = d / dist;
    let mut t = 0.0;
    while t < dist - tolerance {
        let p = from + dir * t;
        if grid.sample([p.x, p.y, p.z]) > iso {
            return false;
        }
        t += step;
    }
    true
}

/// [`bake_colors_with`] against the default-resolution density of `set` at
/// the default iso level.
pub fn bake_colors(mesh: &Mesh, set: &GaussianSet, n_views: usize) -> Result<Mesh> {
    if n_views == 0 {
        return Err(invalid!("color baking needs at least one view"));
    }
    let grid = eval_density(set, DEFAULT_RESOLUTION)?;
    bake_colors_with(mesh, set, n_views, &grid, default_iso(set))
}

/// Colors each vertex from `n_views` renders of `set`, weighting views by
/// the squared cosine between the vertex normal and the view ray. A view counts only
/// if the surface `grid = iso` is not crossed more than two cells before the
/// vertex. Vertices no view sees get the mean baked color.
pub fn bake_colors_with(mesh: &Mesh, set: &GaussianSet, n_views: usize, grid: &DensityGrid, iso: f64) -> Result<Mesh> {
    if n_views == 0 {
        return Err(invalid!("color baking needs at least one view"));
    }
    if mesh.is_empty() {
        return Err(invalid!("cannot bake colors onto an empty mesh"));
    }
    mesh.validate()?;
    let settings = RenderSettings::new(BAKE_RES, BAKE_RES).with_background([0.0; 3]);
    let normals = mesh.vertex_normals();
    let tolerance = 2.0 * grid.cell_size();
    let mut sum = vec![[0.0; 3]; mesh.vertices.len()];
    let mut weight = vec![0.0; mesh.vertices.len()];
    for cam in spiral_cameras(n_views, BAKE_RES)? {
        let out = render(set, &cam, &settings)?;
        for (i, v) in mesh.vertices.iter().enumerate() {
            let p = Vector3::from(*v);
            let to_cam = cam.position - p;
            let cos = normals[i].dot(&to_cam) / to_cam.norm();
            if cos <= 0.0 {
                continue;
            }
            let Some((u, vv, _)) = cam.project(&p) else { continue };
            let Some(c) = sample_color(&out.rgb, &out.alpha, u, vv) else { continue };
            if !unoccluded(grid, iso, cam.position, p, tolerance) {
                continue;
            }
            let w = cos * cos;
            for k in 0..3 {
                sum[i][k] += w * c[k];
            }
            weight[i] += w;
        }
    }
    let seen: Vec<usize> = (0..weight.len()).filter(|&i| weight[i] > 0.0).collect();
    if seen.is_empty() {
        return Err(invalid!("no mesh vertex is visible from the {n_views} baking views"));
    }
    let mut colors: Vec<[f64; 3]> = (0..sum.len())
        .map(|i| sum[i].map(|c| (c / weight[i].max(1e-300)).clamp(0.0, 1.0)))
        .collect();
    let mut mean = [0.0; 3];
    for &i in &seen {
        for k in 0..3 {
            mean[k] += colors[i][k] / seen.len() as f64;
        }
    }
    for (c, &w) in colors.iter_mut().zip(&weight) {
        if w <= 0.0 {
            *c = mean.map(|m| m.clamp(0.0, 1.0));
        }
    }
    Ok(Mesh {
        colors,
        ..mesh.clone()
    })
}
