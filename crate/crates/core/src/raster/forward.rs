use super::{covariance_factor, eigen2, unit_quaternion, RenderSettings, ViewGeometry};
use super::{ALPHA_CEIL, ALPHA_FLOOR, MAX_CONDITION};
use crate::camera::Camera;
use crate::error::Result;
use crate::gaussian::GaussianSet;
use crate::tensor::Tensor;

/// Screen-space data of a splat that survived culling.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Splat {
    pub mean: [f64; 2],
    /// Inverse 2D covariance `[[a, b], [b, c]]` as `(a, b, c)`.
    pub conic: [f64; 3],
    pub radius: f64,
    pub depth: f64,
}

/// One splat's effect on one pixel, in compositing order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub gaussian: u32,
    /// Effective opacity after falloff and clamping.
    pub alpha: f64,
    /// Transmittance in front of this splat.
    pub transmittance: f64,
    /// `exp(-½ Δᵀ Σ⁻¹ Δ)`.
    pub falloff: f64,
    pub clamped: bool,
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct RenderState {
    pub(crate) set: GaussianSet,
    pub(crate) camera: Camera,
    pub(crate) settings: RenderSettings,
    pub(crate) splats: Vec<Option<Splat>>,
    pub(crate) pixels: Vec<Vec<Contribution>>,
    pub(crate) final_t: Vec<f64>,
}

impl RenderState {
    pub fn contributions(&self, x: usize, y: usize) -> &[Contribution] {
        &self.pixels[y * self.settings.width + x]
    }

    /// Transmittance left after the last splat, row-major.
    pub fn final_transmittance(&self) -> &[f64] {
        &self.final_t
    }

    pub fn settings(&self) -> &RenderSettings {
        &self.settings
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// `[3, H, W]`
    pub rgb: Tensor<f64>,
    /// `[1, H, W]`
    pub alpha: Tensor<f64>,
    pub state: Option<RenderState>,
}

pub(crate) fn prepare(
    set: &GaussianSet,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<(Vec<Option<Splat>>, Vec<usize>)> {
    settings.validate()?;
    set.check_finite()?;
    let geo = ViewGeometry::new(camera, settings);
    let splats: Vec<Option<Splat>> = (0..set.len())
        .map(|i| {
            let (q, _) = unit_quaternion(set.rotations[i]);
            let (_, m) = covariance_factor(set.scales[i], q);
            let p = geo.project(set.centers[i], &(m * m.transpose()))?;
            let (lmax, lmin) = eigen2(&p.cov2d);
            if !(lmin > 0.0) || lmax / lmin > MAX_CONDITION {
                return None;
            }
            let (a, b, c) = (p.cov2d[(0, 0)], p.cov2d[(0, 1)], p.cov2d[(1, 1)]);
            let det = a * c - b * b;
            if !(det > 0.0) {
                return None;
            }
            Some(Splat {
                mean: p.mean,
                conic: [c / det, -b / det, a / det],
                radius: settings.cutoff * lmax.sqrt(),
                depth: p.depth,
            })
        })
        .collect();
    let mut order: Vec<usize> = (0..set.len()).filter(|&i| splats[i].is_some()).collect();
    // stable: equal depths keep input order
    order.sort_by(|&a, &b| {
        splats[a]
            .unwrap()
            .depth
            .total_cmp(&splats[b].unwrap().depth)
    });
    Ok((splats, order))
}

/// `(alpha', falloff, clamped)` of a splat at a pixel center, or `None`.
#[inline]
pub(crate) fn evaluate(s: &Splat, opacity: f64, px: usize, py: usize, cutoff_sq: f64) -> Option<(f64, f64, bool)> {
    let dx = px as f64 + 0.5 - s.mean[0];
    let dy = py as f64 + 0.5 - s.mean[1];
    let [a, b, c] = s.conic;
    let maha = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    if !(maha <= cutoff_sq) {
        return None;
    }
    let falloff = (-0.5 * maha).exp();
    let raw = opacity * falloff;
    if raw < ALPHA_FLOOR {
        return None;
    }
    Some(if raw > ALPHA_CEIL {
        (ALPHA_CEIL, falloff, true)
    } else {
        (raw, falloff, false)
    })
}

struct Accumulator {
    color: Vec<[f64; 3]>,
    t: Vec<f64>,
    t_min: f64,
    pixels: Option<Vec<Vec<Contribution>>>,
}

impl Accumulator {
    fn new(n: usize, retain: bool, t_min: f64) -> Self {
        Self {
            color: vec![[0.0; 3]; n],
            t: vec![1.0; n],
            t_min,
            pixels: retain.then(|| vec![Vec::new(); n]),
        }
    }

    #[inline]
    fn saturated(&self, pixel: usize) -> bool {
        self.t[pixel] < self.t_min
    }

    #[inline]
    fn blend(&mut self, pixel: usize, gaussian: usize, color: [f64; 3], hit: (f64, f64, bool)) {
        let (alpha, falloff, clamped) = hit;
        let t = self.t[pixel];
        let w = alpha * t;
        let acc = &mut self.color[pixel];
        for k in 0..3 {
            acc[k] += color[k] * w;
        }
        if let Some(p) = &mut self.pixels {
            p[pixel].push(Contribution {
                gaussian: gaussian as u32,
                alpha,
                transmittance: t,
                falloff,
                clamped,
            });
        }
        self.t[pixel] = t * (1.0 - alpha);
    }

    fn finish(
        self,
        set: &GaussianSet,
        camera: &Camera,
        settings: &RenderSettings,
        splats: Vec<Option<Splat>>,
    ) -> RenderOutput {
        let (w, h) = (settings.width, settings.height);
        let hw = w * h;
        let mut rgb = Tensor::zeros(&[3, h, w]);
        let mut alpha = Tensor::zeros(&[1, h, w]);
        for i in 0..hw {
            let t = self.t[i];
            for k in 0..3 {
                rgb.data_mut()[k * hw + i] = self.color[i][k] + settings.background[k] * t;
            }
            alpha.data_mut()[i] = 1.0 - t;
        }
        let state = self.pixels.map(|pixels| RenderState {
            set: set.clone(),
            camera: camera.clone(),
            settings: settings.clone(),
            splats,
            pixels,
            final_t: self.t,
        });
        RenderOutput { rgb, alpha, state }
    }
}

fn render_impl(set: &GaussianSet, camera: &Camera, settings: &RenderSettings, retain: bool) -> Result<RenderOutput> {
    let (splats, order) = prepare(set, camera, settings)?;
    let (w, h) = (settings.width, settings.height);
    let cutoff_sq = settings.cutoff * settings.cutoff;
    let mut acc = Accumulator::new(w * h, retain, settings.min_transmittance);
    for &gi in &order {
        let s = splats[gi].as_ref().unwrap();
        // pixel centers px + 0.5 within mean ± radius, one pixel of slack
        let lo = |m: f64| (m - s.radius - 1.5).floor().max(0.0);
        let hi = |m: f64, n: usize| (m + s.radius + 0.5).ceil().min(n as f64 - 1.0);
        let (x0, x1) = (lo(s.mean[0]), hi(s.mean[0], w));
        let (y0, y1) = (lo(s.mean[1]), hi(s.mean[1], h));
        if x1 < x0 || y1 < y0 {
            continue;
        }
        for py in y0 as usize..=y1 as usize {
            for px in x0 as usize..=x1 as usize {
                if acc.saturated(py * w + px) {
                    continue;
                }
                if let Some(hit) = evaluate(s, set.opacities[gi], px, py, cutoff_sq) {
                    acc.blend(py * w + px, gi, set.colors[gi], hit);
                }
            }
        }
    }
    Ok(acc.finish(set, camera, settings, splats))
}

pub fn render(set: &GaussianSet, camera: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    render_impl(set, camera, settings, false)
}

/// [`render`] keeping the per-pixel compositing record for
/// [`super::render_gradients`].
pub fn render_retained(set: &GaussianSet, camera: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    render_impl(set, camera, settings, true)
}

/// Pixel-major renderer that tests every splat at every pixel. Slow; the
/// oracle for [`render`].
pub fn render_reference(set: &GaussianSet, camera: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    let (splats, order) = prepare(set, camera, settings)?;
    let (w, h) = (settings.width, settings.height);
    let cutoff_sq = settings.cutoff * settings.cutoff;
    let mut acc = Accumulator::new(w * h, false, settings.min_transmittance);
    for py in 0..h {
        for px in 0..w {
            for &gi in &order {
                if acc.saturated(py * w + px) {
                    break;
                }
                let s = splats[gi].as_ref().unwrap();
                if let Some(hit) = evaluate(s, set.opacities[gi], px, py, cutoff_sq) {
                    acc.blend(py * w + px, gi, set.colors[gi], hit);
                }
            }
        }
    }
    Ok(acc.finish(set, camera, settings, splats))
}
