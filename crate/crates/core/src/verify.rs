//! Finite-difference oracles for the analytic gradients, shared by the test
//! suites and `lgm gradcheck`.

use std::cell::Cell;

use rand::Rng;

use crate::camera::{Camera, DEFAULT_FOV_Y_DEG};
use crate::error::{invalid, Result};
use crate::gaussian::{decode_features, decode_features_var, fuse, Gaussian, GaussianSet, GaussianVars};
use crate::raster::{render_gradients, render_retained, render_var, RenderSettings};
use crate::rng;
use crate::tensor::{check_gradients, check_gradients_where, relative_error, scaled_dot_attention, Conv2dSpec, Tensor};

pub const SUITES: [&str; 3] = ["rasterizer", "chain", "tensor"];

pub fn random_scene(n: usize, seed: u64) -> GaussianSet {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|_| {
            let q: [f64; 4] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            Gaussian {
                center: std::array::from_fn(|_| r.random_range(-0.5..0.5)),
                scale: std::array::from_fn(|_| r.random_range(0.05..0.25)),
                rotation: q.map(|v| v / qn),
                opacity: r.random_range(0.2..0.95),
                color: std::array::from_fn(|_| r.random_range(0.0..1.0)),
            }
        })
        .collect()
}

/// Orbit camera at radius 1.5 with random elevation and azimuth.
pub fn random_camera(seed: u64, size: usize) -> Camera {
    let mut r = rng::seeded(seed ^ 0x5eed);
    let (elev, azim) = (r.random_range(-0.6..0.6), r.random_range(-3.1..3.1));
    Camera::orbit(elev, azim, 1.5, DEFAULT_FOV_Y_DEG.to_radians(), size, size).expect("valid orbit")
}

#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose ±h renders composite a different set of splats.
    pub excluded: usize,
    pub worst: String,
}

impl FdReport {
    fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.excluded += other.excluded;
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

fn attr(set: &mut GaussianSet, group: usize, i: usize, k: usize) -> &mut f64 {
    match group {
        0 => &mut set.centers[i][k],
        1 => &mut set.opacities[i],
        2 => &mut set.scales[i][k],
        3 => &mut set.rotations[i][k],
        _ => &mut set.colors[i][k],
    }
}

const GROUPS: [(&str, usize); 5] = [("center", 3), ("opacity", 1), ("scale", 3), ("rotation", 4), ("color", 3)];

/// Ordered (splat, clamped) sequence of every pixel; equal signatures mean the
/// renders lie on the same smooth branch.
pub fn composite_signature(set: &GaussianSet, cameras: &[Camera], settings: &RenderSettings) -> Result<Vec<(u32, bool)>> {
    let mut sig = Vec::new();
    for cam in cameras {
        let out = render_retained(set, cam, settings)?;
        let st = out.state.as_ref().ok_or_else(|| invalid!("render did not retain state"))?;
        for y in 0..settings.height {
            for x in 0..settings.width {
                sig.extend(st.contributions(x, y).iter().map(|c| (c.gaussian, c.clamped)));
                sig.push((u32::MAX, false));
            }
        }
    }
    Ok(sig)
}

/// Checks `render_gradients` for `L = Σ w_rgb·rgb + Σ w_a·alpha` against
/// central differences over every attribute. Entries whose perturbed renders
/// cross a cutoff, floor or clamp switch are reported as excluded.
pub fn raster_fd_check(
    set: &GaussianSet,
    camera: &Camera,
    settings: &RenderSettings,
    seed: u64,
    h: f64,
) -> Result<FdReport> {
    let (w, hh) = (settings.width, settings.height);
    let mut r = rng::seeded(seed ^ 0xfd);
    let w_rgb = Tensor::from_fn(&[3, hh, w], |_| r.random_range(-1.0..1.0));
    let w_a = Tensor::from_fn(&[1, hh, w], |_| r.random_range(-1.0..1.0));
    let eval = |s: &GaussianSet| -> Result<(f64, Vec<(u32, bool)>)> {
        let out = render_retained(s, camera, settings)?;
        let loss: f64 = out.rgb.data().iter().zip(w_rgb.data()).map(|(a, b)| a * b).sum::<f64>()
            + out.alpha.data().iter().zip(w_a.data()).map(|(a, b)| a * b).sum::<f64>();
        Ok((loss, composite_signature(s, std::slice::from_ref(camera), settings)?))
    };
    let out = render_retained(set, camera, settings)?;
    let mut grads = render_gradients(&out, &w_rgb, &w_a)?;
    let mut report = FdReport::default();
    let mut work = set.clone();
    for i in 0..set.len() {
        for (group, &(name, width)) in GROUPS.iter().enumerate() {
            for k in 0..width {
                let x0 = *attr(&mut work, group, i, k);
                let mut central = |step: f64| -> Result<Option<f64>> {
                    *attr(&mut work, group, i, k) = x0 + step;
                    let (fp, sp) = eval(&work)?;
                    *attr(&mut work, group, i, k) = x0 - step;
                    let (fm, sm) = eval(&work)?;
                    *attr(&mut work, group, i, k) = x0;
                    Ok((sp == sm).then(|| (fp - fm) / (2.0 * step)))
                };
                let numeric = match central(h)? {
                    Some(n) => Some(n),
                    None => central(h * 1e-2)?,
                };
                let Some(numeric) = numeric else {
                    report.excluded += 1;
                    continue;
                };
                let analytic = *attr(&mut grads, group, i, k);
                let err = relative_error(analytic, numeric);
                report.checked += 1;
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = format!("gaussian {i} {name}[{k}]: analytic {analytic:e} numeric {numeric:e}");
                }
            }
        }
    }
    Ok(report)
}

/// `scenes` random scenes of 1 to 10 Gaussians at 16×16.
pub fn rasterizer_suite(scenes: u64) -> Result<FdReport> {
    let s = RenderSettings::new(16, 16);
    let mut total = FdReport::default();
    for seed in 0..scenes {
        let set = random_scene(1 + (seed % 10) as usize, 1000 + seed);
        let r = raster_fd_check(&set, &random_camera(1000 + seed, 16), &s, seed, 1e-5)?;
        total.merge(FdReport {
            worst: format!("scene {seed}, {}", r.worst),
            ..r
        });
    }
    Ok(total)
}

/// Raw feature maps `[V, 14, 8, 8]`, the position channels kept inside the
/// clamp so most Gaussians are visible.
pub fn chain_features(views: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(&[views, 14, 8, 8], |i| match (i / 64) % 14 {
        0..=2 => r.random_range(-0.6..0.6),
        3 => r.random_range(-1.0..2.0),
        4..=6 => r.random_range(-1.0..0.5),
        _ => r.random_range(-1.5..1.5),
    })
}

/// Gradient of an image loss through per-view decoding, fusion and two
/// renders with respect to the raw `[2, 14, 8, 8]` features. Entries on a
/// position clamp boundary or whose ±h renders change branch are excluded.
pub fn chain_check(seed: u64) -> Result<FdReport> {
    let views = 2;
    let feats = chain_features(views, seed);
    let cams = [random_camera(seed, 16), random_camera(seed + 50, 16)];
    let s = RenderSettings::new(16, 16);
    let mut r = rng::seeded(seed ^ 9);
    let target = Tensor::from_fn(&[4, 16, 16], |_| r.random_range(0.0..1.0));
    let decode = |t: &Tensor<f64>| -> Result<GaussianSet> {
        let per_view = t.data().len() / views;
        let parts = (0..views)
            .map(|i| decode_features(&Tensor::new(&[1, 14, 8, 8], t.data()[i * per_view..(i + 1) * per_view].to_vec())?, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(fuse(&parts))
    };
    let excluded = Cell::new(0);
    let h = 1e-5;
    let report = check_gradients_where(
        |tape, v| {
            let parts = (0..views)
                .map(|i| decode_features_var(v[0].slice(0, i, i + 1)?, 1))
                .collect::<Result<Vec<_>>>()?;
            let g = GaussianVars::fuse(&parts)?;
            let t = tape.constant(target.clone());
            let mut loss: Option<crate::tensor::Var<'_, f64>> = None;
            for cam in &cams {
                let img = render_var(&g, cam, &s)?.image;
                let l = img.try_sub(t)?.square().mean();
                loss = Some(match loss {
                    None => l,
                    Some(acc) => acc.try_add(l)?,
                });
            }
            Ok(loss.expect("two cameras"))
        },
        std::slice::from_ref(&feats),
        h,
        |_, e| {
            if (e / 64) % 14 < 3 && (feats.data()[e].abs() - 1.0).abs() < 1e-3 {
                return false;
            }
            let shifted = |d: f64| {
                let mut t = feats.clone();
                t.data_mut()[e] += d;
                decode(&t).and_then(|set| composite_signature(&set, &cams, &s))
            };
            let same = matches!((shifted(h), shifted(-h)), (Ok(a), Ok(b)) if a == b);
            if !same {
                excluded.set(excluded.get() + 1);
            }
            same
        },
    )?;
    Ok(FdReport {
        max_rel_error: report.max_rel_error,
        checked: report.checked,
        excluded: excluded.get(),
        worst: format!(
            "seed {seed}, entry {}: analytic {:e} numeric {:e}",
            report.worst_index, report.analytic, report.numeric
        ),
    })
}

pub fn chain_suite(seeds: u64) -> Result<FdReport> {
    let mut total = FdReport::default();
    for seed in 0..seeds {
        total.merge(chain_check(seed)?);
    }
    Ok(total)
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Convolution, group norm, SiLU and attention against central differences.
pub fn tensor_suite() -> Result<FdReport> {
    let mut total = FdReport::default();
    let mut add = |name: &str, r: crate::tensor::GradCheckReport| {
        total.merge(FdReport {
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            excluded: 0,
            worst: format!("{name}: analytic {:e} numeric {:e}", r.analytic, r.numeric),
        })
    };
    let conv = [random(&[2, 3, 8, 8], 1), random(&[4, 3, 3, 3], 2), random(&[4], 3)];
    add(
        "conv2d stride 2",
        check_gradients(|_, v| Ok(v[0].conv2d(v[1], v[2], Conv2dSpec::DOWN2)?.square().sum()), &conv, 1e-5)?,
    );
    let block = [
        random(&[1, 2, 6, 6], 4),
        random(&[4, 2, 3, 3], 5),
        random(&[4], 6),
        random(&[4], 7).map(|v| v + 1.0),
        random(&[4], 8),
    ];
    add(
        "conv, group norm, silu",
        check_gradients(
            |_, v| Ok(v[0].conv2d(v[1], v[2], Conv2dSpec::SAME)?.group_norm(2, v[3], v[4], 1e-5)?.silu().sum()),
            &block,
            1e-6,
        )?,
    );
    let qkv = [random(&[2, 5, 4], 9), random(&[2, 5, 4], 10), random(&[2, 5, 4], 11)];
    add(
        "attention",
        check_gradients(|_, v| Ok(scaled_dot_attention(v[0], v[1], v[2])?.square().sum()), &qkv, 1e-5)?,
    );
    Ok(total)
}

/// Runs a named suite; the tolerance every suite must meet is `1e-3`.
pub fn run_suite(name: &str) -> Result<FdReport> {
    match name {
        "rasterizer" => rasterizer_suite(20),
        "chain" => chain_suite(2),
        "tensor" => tensor_suite(),
        _ => Err(invalid!("unknown gradcheck suite '{name}', expected one of {SUITES:?}")),
    }
}
