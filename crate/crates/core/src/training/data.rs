use std::f64::consts::PI;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::TrainConfig;
use crate::camera::{grid_distort, normalize_poses_to, orbital_jitter, orbital_rotation, plucker_embed, Camera, GridDistortSettings};
use crate::camera::{DEFAULT_FOV_Y_DEG, DEFAULT_RADIUS};
use crate::error::{invalid, shape_err, Result};
use crate::gaussian::{Gaussian, GaussianSet};
use crate::raster::{render_reference, RenderSettings};
use crate::rng;
use crate::tensor::rtf::Archive;
use crate::tensor::Tensor;

pub const POOL_SIZE: usize = 16;
pub const INPUT_VIEWS: usize = 4;
pub const TARGET_VIEWS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[1, H, W]` in `[0, 1]`.
    pub alpha: Tensor<f32>,
    pub camera: Camera,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub truth: GaussianSet,
    pub view_pool: Vec<ViewSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<ViewSample>,
    /// The inputs first, then the other supervised views.
    pub targets: Vec<ViewSample>,
    pub indices: Vec<usize>,
}

fn draw_blobs(r: &mut rng::Rng, n_blobs: usize) -> GaussianSet {
    let mut truth = GaussianSet::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let q: [f64; 4] = loop {
            let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(r));
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-9 {
                break q.map(|v| v / n);
            }
        };
        truth.push(Gaussian {
            center: std::array::from_fn(|_| r.random_range(-0.6..=0.6)),
            scale: std::array::from_fn(|_| r.random_range(0.05..=0.2)),
            rotation: q,
            opacity: r.random_range(0.7..=1.0),
            color: std::array::from_fn(|_| r.random_range(0.0..=1.0)),
        });
    }
    truth
}

/// The ground-truth blobs `gen_scene` draws for `seed`.
pub fn gen_truth(seed: u64, n_blobs: usize) -> Result<GaussianSet> {
    if n_blobs == 0 {
        return Err(invalid!("a scene needs at least one blob"));
    }
    Ok(draw_blobs(&mut rng::seeded(seed), n_blobs))
}

/// Random blobs seen from 16 orbit cameras on a white background.
pub fn gen_scene(seed: u64, n_blobs: usize, res: usize) -> Result<Scene> {
    if n_blobs == 0 || res == 0 {
        return Err(invalid!("a scene needs at least one blob and a positive resolution"));
    }
    let mut r = rng::seeded(seed);
    let truth = draw_blobs(&mut r, n_blobs);
    let fov = DEFAULT_FOV_Y_DEG.to_radians();
    let settings = RenderSettings::new(res, res);
    let mut view_pool = Vec::with_capacity(POOL_SIZE);
    for i in 0..POOL_SIZE {
        let elev = r.random_range(-30f64..=30.0).to_radians();
        let azim = 2.0 * PI * (i as f64 + r.random_range(0.0..1.0)) / POOL_SIZE as f64;
        let camera = Camera::orbit(elev, azim, DEFAULT_RADIUS, fov, res, res)?;
        let out = render_reference(&truth, &camera, &settings)?;
        view_pool.push(ViewSample {
            image: out.rgb.cast(),
            alpha: out.alpha.cast(),
            camera,
        });
    }
    Ok(Scene { truth, view_pool })
}

impl Scene {
    pub fn resolution(&self) -> usize {
        self.view_pool.first().map_or(0, |v| v.image.shape()[2])
    }

    /// `images [16,3,H,W]`, `alphas [16,1,H,W]`, `cameras [16,14]` plus the
    /// ground-truth Gaussians.
    pub fn to_archive(&self) -> Archive {
        let n = self.view_pool.len();
        let res = self.resolution();
        let cat = |f: &dyn Fn(&ViewSample) -> &Tensor<f32>, c: usize| {
            let data: Vec<f32> = self.view_pool.iter().flat_map(|v| f(v).data().to_vec()).collect();
            Tensor::new(&[n, c, res, res], data).expect("pool views share one size")
        };
        let mut a = Archive::new();
        a.insert("images", cat(&|v| &v.image, 3));
        a.insert("alphas", cat(&|v| &v.alpha, 1));
        let cams: Vec<f32> = self.view_pool.iter().flat_map(|v| v.camera.to_floats()).collect();
        a.insert("cameras", Tensor::new(&[n, 14], cams).expect("14 floats per camera"));
        let names = ["centers", "opacities", "scales", "rotations", "colors"];
        for (name, t) in names.iter().zip(self.truth.to_tensors::<f64>()) {
            a.insert(format!("truth.{name}"), t);
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let images = a.require("images")?.to_real::<f32>();
        let alphas = a.require("alphas")?.to_real::<f32>();
        let cams = a.require("cameras")?.to_real::<f32>();
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || alphas.shape() != [s[0], 1, s[2], s[3]] || cams.shape() != [s[0], 14] {
            return Err(shape_err!(
                "inconsistent scene archive: images {:?}, alphas {:?}, cameras {:?}",
                s,
                alphas.shape(),
                cams.shape()
            ));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        let mut view_pool = Vec::with_capacity(n);
        for i in 0..n {
            let img = images.data()[i * 3 * h * w..(i + 1) * 3 * h * w].to_vec();
            let al = alphas.data()[i * h * w..(i + 1) * h * w].to_vec();
            view_pool.push(ViewSample {
                image: Tensor::new(&[3, h, w], img)?,
                alpha: Tensor::new(&[1, h, w], al)?,
                camera: Camera::from_floats(&cams.data()[i * 14..(i + 1) * 14], w, h)?,
            });
        }
        let get = |name: &str| a.require(&format!("truth.{name}")).map(|t| t.to_real::<f64>());
        let truth = GaussianSet::from_tensors(
            &get("centers")?,
            &get("opacities")?,
            &get("scales")?,
            &get("rotations")?,
            &get("colors")?,
        )?;
        Ok(Self { truth, view_pool })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// 8 distinct pool views, the first 4 being inputs, all posed relative to
/// the first input.
pub fn make_batch(scene: &Scene, seed: u64) -> Result<Batch> {
    let pool = scene.view_pool.len();
    if pool < TARGET_VIEWS {
        return Err(invalid!("a batch needs {TARGET_VIEWS} views but the pool has {pool}"));
    }
    let indices = sample(&mut rng::seeded(seed), pool, TARGET_VIEWS).into_vec();
    let cams: Vec<Camera> = indices.iter().map(|&i| scene.view_pool[i].camera.clone()).collect();
    // Pool cameras sit on the default orbit up to rounding.
    let r0 = cams[0].position.norm();
    let radius = if (r0 - DEFAULT_RADIUS).abs() < 1e-9 { DEFAULT_RADIUS } else { r0 };
    let cams = normalize_poses_to(&cams, radius)?;
    let targets: Vec<ViewSample> = indices
        .iter()
        .zip(cams)
        .map(|(&i, camera)| ViewSample {
            camera,
            ..scene.view_pool[i].clone()
        })
        .collect();
    Ok(Batch {
        inputs: targets[..INPUT_VIEWS].to_vec(),
        targets,
        indices,
    })
}

/// Grid distortion on the images and orbital jitter on the cameras of every
/// input except the first, applied with probability `aug_prob` per batch.
pub fn augment_inputs(inputs: &[ViewSample], cfg: &TrainConfig, seed: u64) -> Result<Vec<ViewSample>> {
    let mut r = rng::seeded(seed);
    let distort = r.random::<f64>() < cfg.aug_prob;
    let jitter = if cfg.independent_aug { r.random::<f64>() < cfg.aug_prob } else { distort };
    let mut out = inputs.to_vec();
    for v in out.iter_mut().skip(1) {
        let (s_img, s_cam) = (r.random::<u64>(), r.random::<u64>());
        let strength = if cfg.distort_max > 0.0 { r.random_range(0.0..cfg.distort_max) } else { 0.0 };
        if distort {
            let settings = GridDistortSettings {
                cells: cfg.distort_cells,
                strength,
            };
            v.image = grid_distort(&v.image, settings, s_img)?;
        }
        if jitter {
            v.camera = orbital_jitter(&v.camera, cfg.jitter_max_deg.to_radians(), s_cam)?;
        }
    }
    Ok(out)
}

/// Fixed-magnitude perturbation of inputs 2..: distortion of `strength` and a
/// camera rotation of exactly `angle_deg`.
pub fn perturb_inputs(inputs: &[ViewSample], strength: f64, angle_deg: f64, seed: u64) -> Result<Vec<ViewSample>> {
    let mut r = rng::seeded(seed);
    let mut out = inputs.to_vec();
    for v in out.iter_mut().skip(1) {
        let (s_img, s_cam) = (r.random::<u64>(), r.random::<u64>());
        v.image = grid_distort(&v.image, GridDistortSettings { cells: 8, strength }, s_img)?;
        v.camera = orbital_rotation(&v.camera, angle_deg.to_radians(), s_cam)?;
    }
    Ok(out)
}

/// Network input `[V, 9, H, W]`: rgb, ray moment, ray direction.
pub fn view_inputs(inputs: &[ViewSample]) -> Result<Tensor<f32>> {
    let first = inputs.first().ok_or_else(|| invalid!("no input views"))?;
    let (h, w) = (first.image.shape()[1], first.image.shape()[2]);
    let hw = h * w;
    let mut data = Vec::with_capacity(inputs.len() * 9 * hw);
    for v in inputs {
        if v.image.shape() != [3, h, w] {
            return Err(shape_err!("input views differ in size: {:?} vs [3, {h}, {w}]", v.image.shape()));
        }
        data.extend_from_slice(v.image.data());
        let rays = plucker_embed(&v.camera.with_size(w, h)).to_tensor::<f32>();
        data.extend_from_slice(rays.data());
    }
    Tensor::new(&[inputs.len(), 9, h, w], data)
}
