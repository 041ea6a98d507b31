use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use super::forward::RenderOutput;
use super::{covariance_factor, unit_quaternion, ViewGeometry};
use crate::error::{invalid, shape_err, Result};
use crate::gaussian::GaussianSet;
use crate::tensor::Tensor;

/// Attribute gradients in the column layout of [`GaussianSet`]; `rotations`
/// holds the gradient with respect to the stored (possibly non-unit)
/// quaternion.
pub type GaussianGrads = GaussianSet;

#[derive(Clone, Copy, Default)]
struct ScreenGrad {
    mean: [f64; 2],
    conic: [f64; 3],
}

/// `d/dR_ij` of each rotation-matrix entry with respect to `(w, x, y, z)`.
fn rotation_vjp(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let d = |i: usize, j: usize| g[(i, j)];
    [
        2.0 * (-z * d(0, 1) + y * d(0, 2) + z * d(1, 0) - x * d(1, 2) - y * d(2, 0) + x * d(2, 1)),
        2.0 * (y * d(0, 1) + z * d(0, 2) + y * d(1, 0) - 2.0 * x * d(1, 1) - w * d(1, 2) + z * d(2, 0)
            + w * d(2, 1)
            - 2.0 * x * d(2, 2)),
        2.0 * (-2.0 * y * d(0, 0) + x * d(0, 1) + w * d(0, 2) + x * d(1, 0) + z * d(1, 2) - w * d(2, 0)
            + z * d(2, 1)
            - 2.0 * y * d(2, 2)),
        2.0 * (-2.0 * z * d(0, 0) - w * d(0, 1) + x * d(0, 2) + w * d(1, 0) - 2.0 * z * d(1, 1)
            + y * d(1, 2)
            + x * d(2, 0)
            + y * d(2, 1)),
    ]
}

/// Reverse of the compositing pass for upstream gradients on the rgb `[3,H,W]`
/// and alpha `[1,H,W]` images.
pub fn render_gradients(
    output: &RenderOutput,
    upstream_rgb: &Tensor<f64>,
    upstream_alpha: &Tensor<f64>,
) -> Result<GaussianGrads> {
    let state = output
        .state
        .as_ref()
        .ok_or_else(|| invalid!("render_gradients needs a forward pass rendered with retained state"))?;
    let s = &state.settings;
    let (w, h) = (s.width, s.height);
    let hw = w * h;
    if upstream_rgb.shape() != [3, h, w] || upstream_alpha.shape() != [1, h, w] {
        return Err(shape_err!(
            "upstream gradients {:?} / {:?} do not match a {w}x{h} render",
            upstream_rgb.shape(),
            upstream_alpha.shape()
        ));
    }
    let set = &state.set;
    let n = set.len();
    let mut grads = GaussianGrads {
        centers: vec![[0.0; 3]; n],
        scales: vec![[0.0; 3]; n],
        rotations: vec![[0.0; 4]; n],
        opacities: vec![0.0; n],
        colors: vec![[0.0; 3]; n],
    };
    let mut screen = vec![ScreenGrad::default(); n];

    let gc = upstream_rgb.data();
    let ga = upstream_alpha.data();
    for py in 0..h {
        for px in 0..w {
            let i = py * w + px;
            let g_rgb = [gc[i], gc[hw + i], gc[2 * hw + i]];
            let g_a = ga[i];
            let t_final = state.final_t[i];
            let bg = s.background;
            // gC · S, S = light arriving from behind the current splat
            let mut behind = (g_rgb[0] * bg[0] + g_rgb[1] * bg[1] + g_rgb[2] * bg[2]) * t_final;
            for c in state.pixels[i].iter().rev() {
                let gi = c.gaussian as usize;
                let col = set.colors[gi];
                let wt = c.alpha * c.transmittance;
                for k in 0..3 {
                    grads.colors[gi][k] += g_rgb[k] * wt;
                }
                let g_dot_c = g_rgb[0] * col[0] + g_rgb[1] * col[1] + g_rgb[2] * col[2];
                let inv = 1.0 / (1.0 - c.alpha);
                let g_alpha = g_dot_c * c.transmittance - behind * inv + g_a * t_final * inv;
                behind += g_dot_c * wt;
                if c.clamped {
                    continue;
                }
                grads.opacities[gi] += g_alpha * c.falloff;
                // alpha' = o·exp(-½ maha)
                let g_maha = -0.5 * g_alpha * c.alpha;
                let sp = state.splats[gi].as_ref().unwrap();
                let dx = px as f64 + 0.5 - sp.mean[0];
                let dy = py as f64 + 0.5 - sp.mean[1];
                let [a, b, cc] = sp.conic;
                let sg = &mut screen[gi];
                sg.conic[0] += g_maha * dx * dx;
                sg.conic[1] += g_maha * 2.0 * dx * dy;
                sg.conic[2] += g_maha * dy * dy;
                sg.mean[0] -= g_maha * 2.0 * (a * dx + b * dy);
                sg.mean[1] -= g_maha * 2.0 * (b * dx + cc * dy);
            }
        }
    }

    let geo = ViewGeometry::new(&state.camera, s);
    let f = geo.focal;
    for gi in 0..n {
        let Some(sp) = state.splats[gi] else { continue };
        let sg = screen[gi];
        if sg.mean == [0.0; 2] && sg.conic == [0.0; 3] {
            continue;
        }
        let (q, qnorm) = unit_quaternion(set.rotations[gi]);
        let (r, m) = covariance_factor(set.scales[gi], q);
        let sigma = m * m.transpose();
        let a = geo.view * (Vector3::from(set.centers[gi]) - geo.position);
        let j = geo.jacobian(&a);
        let t = j * geo.view;

        // conic = cov2d⁻¹: dL/dcov2d = -Q G Q with the off-diagonal gradient split
        let [ca, cb, cc] = sp.conic;
        let qm = Matrix2::new(ca, cb, cb, cc);
        let gq = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
        let g_cov2d = -(qm * gq * qm);

        let g_sigma = t.transpose() * g_cov2d * t;
        let g_t: Matrix2x3<f64> = 2.0 * g_cov2d * t * sigma;
        let g_j = g_t * geo.view.transpose();

        let tz = a.z;
        let mut g_a = Vector3::zeros();
        g_a.x += g_j[(0, 2)] * (-f / (tz * tz)) + sg.mean[0] * f / tz;
        g_a.y += g_j[(1, 2)] * (-f / (tz * tz)) + sg.mean[1] * f / tz;
        g_a.z += (g_j[(0, 0)] + g_j[(1, 1)]) * (-f / (tz * tz))
            + g_j[(0, 2)] * (2.0 * f * a.x / (tz * tz * tz))
            + g_j[(1, 2)] * (2.0 * f * a.y / (tz * tz * tz))
            - sg.mean[0] * f * a.x / (tz * tz)
            - sg.mean[1] * f * a.y / (tz * tz);
        let g_center = geo.view.transpose() * g_a;
        grads.centers[gi] = [g_center.x, g_center.y, g_center.z];

        let g_m = 2.0 * g_sigma * m;
        let sc = set.scales[gi];
        for k in 0..3 {
            grads.scales[gi][k] = (0..3).map(|i| g_m[(i, k)] * r[(i, k)]).sum();
        }
        let g_r = Matrix3::from_fn(|i, k| g_m[(i, k)] * sc[k]);
        if qnorm > 0.0 {
            let g_unit = rotation_vjp(q, &g_r);
            let dot: f64 = (0..4).map(|k| g_unit[k] * q[k]).sum();
            grads.rotations[gi] = std::array::from_fn(|k| (g_unit[k] - q[k] * dot) / qnorm);
        }
    }
    Ok(grads)
}
