//! Browser bindings: orbit renders of a synthetic scene, the grid-distortion
//! augmentation, and mesh extraction.

use lgm_core::camera::{grid_distort, Camera, GridDistortSettings, DEFAULT_FOV_Y_DEG, DEFAULT_RADIUS};
use lgm_core::gaussian::GaussianSet;
use lgm_core::mesh::{bake_colors_with, default_iso, eval_density, marching_cubes, write_obj};
use lgm_core::raster::{render, RenderSettings};
use lgm_core::tensor::Tensor;
use lgm_core::training::gen_truth;
use wasm_bindgen::prelude::*;

const MAX_SIZE: usize = 512;

fn js_err(e: lgm_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `[3, H, W]` in `[0, 1]` to row-major RGBA bytes.
pub fn to_rgba(rgb: &Tensor<f64>) -> Vec<u8> {
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    let hw = h * w;
    let d = rgb.data();
    let mut out = Vec::with_capacity(4 * hw);
    for i in 0..hw {
        for c in 0..3 {
            out.push((d[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

#[wasm_bindgen]
pub struct Demo {
    set: GaussianSet,
}

impl Demo {
    pub fn from_set(set: GaussianSet) -> Self {
        Self { set }
    }

    pub fn render_rgb(&self, elevation_deg: f64, azimuth_deg: f64, size: usize) -> lgm_core::Result<Tensor<f64>> {
        let size = size.clamp(8, MAX_SIZE);
        let cam = Camera::orbit(
            elevation_deg.to_radians(),
            azimuth_deg.to_radians(),
            DEFAULT_RADIUS,
            DEFAULT_FOV_Y_DEG.to_radians(),
            size,
            size,
        )?;
        Ok(render(&self.set, &cam, &RenderSettings::new(size, size))?.rgb)
    }

    pub fn obj_text(&self, resolution: usize, views: usize) -> lgm_core::Result<String> {
        let grid = eval_density(&self.set, resolution)?;
        let iso = default_iso(&self.set);
        let mesh = marching_cubes(&grid, iso);
        if mesh.is_empty() {
            return Ok(String::new());
        }
        let mesh = bake_colors_with(&mesh, &self.set, views, &grid, iso)?;
        let mut buf = Vec::new();
        write_obj(&mut buf, &mesh)?;
        Ok(String::from_utf8(buf).expect("OBJ text is ASCII"))
    }
}

#[wasm_bindgen]
impl Demo {
    /// A synthetic scene of `blobs` random Gaussians.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, blobs: u32) -> Result<Demo, JsError> {
        Ok(Self::from_set(gen_truth(seed as u64, blobs as usize).map_err(js_err)?))
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    /// RGBA pixels of a `size`×`size` orbit view.
    pub fn render(&self, elevation_deg: f64, azimuth_deg: f64, size: usize) -> Result<Vec<u8>, JsError> {
        Ok(to_rgba(&self.render_rgb(elevation_deg, azimuth_deg, size).map_err(js_err)?))
    }

    /// The same view after a random grid distortion of `strength`.
    pub fn render_distorted(
        &self,
        elevation_deg: f64,
        azimuth_deg: f64,
        size: usize,
        strength: f64,
        seed: u32,
    ) -> Result<Vec<u8>, JsError> {
        let rgb = self.render_rgb(elevation_deg, azimuth_deg, size).map_err(js_err)?;
        let settings = GridDistortSettings { cells: 8, strength };
        Ok(to_rgba(&grid_distort(&rgb, settings, seed as u64).map_err(js_err)?))
    }

    /// Colored OBJ of the density isosurface; empty when nothing crosses it.
    pub fn mesh_obj(&self, resolution: usize, views: usize) -> Result<String, JsError> {
        self.obj_text(resolution, views).map_err(js_err)
    }
}
