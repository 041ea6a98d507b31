mod common;

use common::{random_camera, random_scene, FOV};
use lgm_core::verify::raster_fd_check;
use lgm_core::camera::Camera;
use lgm_core::gaussian::{Gaussian, GaussianSet};
use lgm_core::raster::{
    build_covariance, project_gaussian, render, render_gradients, render_reference, render_retained, RenderSettings,
};
use lgm_core::tensor::Tensor;
use nalgebra::SymmetricEigen;
use rand::seq::SliceRandom;

fn front(size: usize) -> Camera {
    Camera::orbit(0.0, 0.0, 1.5, FOV, size, size).unwrap()
}

fn center_rgb(rgb: &Tensor<f64>, size: usize) -> [f64; 3] {
    let c = size / 2;
    [rgb.at(&[0, c, c]), rgb.at(&[1, c, c]), rgb.at(&[2, c, c])]
}

#[test]
fn empty_scene_is_background() {
    let s = RenderSettings::new(8, 6).with_background([0.2, 0.4, 0.6]);
    let out = render(&GaussianSet::new(), &front(8), &s).unwrap();
    for k in 0..3 {
        for y in 0..6 {
            for x in 0..8 {
                assert_eq!(out.rgb.at(&[k, y, x]), s.background[k]);
            }
        }
    }
    assert!(out.alpha.data().iter().all(|&a| a == 0.0));
}

#[test]
fn single_opaque_splat() {
    let c = [0.2, 0.4, 0.6];
    let set: GaussianSet = [Gaussian::isotropic([0.0; 3], 0.3, 1.0, c)].into_iter().collect();
    let s = RenderSettings::new(33, 33);
    let out = render(&set, &front(33), &s).unwrap();
    assert!(out.alpha.at(&[0, 16, 16]) >= 0.999 - 1e-12);
    let got = center_rgb(&out.rgb, 33);
    for k in 0..3 {
        assert!((got[k] - c[k]).abs() < 1e-3);
    }
}

#[test]
fn front_splat_hides_back_splat() {
    let front_c = [0.9, 0.1, 0.1];
    let set: GaussianSet = [
        Gaussian::isotropic([0.0, 0.0, -0.3], 0.2, 1.0, [0.1, 0.1, 0.9]),
        Gaussian::isotropic([0.0, 0.0, 0.3], 0.2, 1.0, front_c),
    ]
    .into_iter()
    .collect();
    let out = render(&set, &front(33), &RenderSettings::new(33, 33)).unwrap();
    let got = center_rgb(&out.rgb, 33);
    for k in 0..3 {
        assert!((got[k] - front_c[k]).abs() < 1.2e-3, "{got:?}");
    }
}

#[test]
fn fast_path_matches_reference_bit_for_bit() {
    for seed in 0..10 {
        let set = random_scene(30, seed);
        let cam = random_camera(seed, 24);
        let s = RenderSettings::new(24, 20).with_background([0.3, 0.5, 0.7]);
        let a = render(&set, &cam, &s).unwrap();
        let b = render_reference(&set, &cam, &s).unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.alpha, b.alpha);
    }
}

#[test]
fn covariance_eigenvalues_are_squared_scales() {
    for seed in 0..20 {
        let g = random_scene(1, seed).get(0);
        let sigma = build_covariance(g.scale, g.rotation).unwrap();
        let mut eig: Vec<f64> = SymmetricEigen::new(sigma).eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        let mut s2: Vec<f64> = g.scale.iter().map(|s| s * s).collect();
        s2.sort_by(f64::total_cmp);
        for (a, b) in eig.iter().zip(&s2) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((sigma - sigma.transpose()).abs().max() < 1e-15);
    }
}

#[test]
fn doubling_fov_halves_projected_extent() {
    let cov = build_covariance([0.002; 3], [1.0, 0.0, 0.0, 0.0]).unwrap();
    let mut s = RenderSettings::new(128, 128);
    s.dilation = 0.0;
    let narrow = Camera::orbit(0.0, 0.0, 1.5, 0.4, 128, 128).unwrap();
    let wide = Camera::orbit(0.0, 0.0, 1.5, 0.8, 128, 128).unwrap();
    let a = project_gaussian([0.0; 3], &cov, &narrow, &s).unwrap();
    let b = project_gaussian([0.0; 3], &cov, &wide, &s).unwrap();
    let ratio = b.cov2d[(0, 0)].sqrt() / a.cov2d[(0, 0)].sqrt();
    // tangent scaling: tan(0.2)/tan(0.4) is within 2% of one half
    assert!((ratio - 0.5).abs() < 0.5 * 0.02 + 0.02, "{ratio}");
    let expected = (0.2f64).tan() / (0.4f64).tan();
    assert!((ratio - expected).abs() < 1e-9);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let set = random_scene(5, 3);
    let s = RenderSettings::new(16, 16);
    let out = render_retained(&set, &random_camera(3, 16), &s).unwrap();
    let g = render_gradients(&out, &Tensor::zeros(&[3, 16, 16]), &Tensor::zeros(&[1, 16, 16])).unwrap();
    assert!(g.centers.iter().flatten().chain(g.opacities.iter()).all(|&v| v == 0.0));
    assert!(g.rotations.iter().flatten().chain(g.colors.iter().flatten()).all(|&v| v == 0.0));
}

#[test]
fn gradients_need_retained_state() {
    let s = RenderSettings::new(4, 4);
    let out = render(&random_scene(2, 1), &front(4), &s).unwrap();
    assert!(render_gradients(&out, &Tensor::zeros(&[3, 4, 4]), &Tensor::zeros(&[1, 4, 4])).is_err());
}

#[test]
fn color_gradient_is_effective_opacity() {
    let set: GaussianSet = [Gaussian::isotropic([0.0; 3], 0.05, 0.6, [0.3; 3])].into_iter().collect();
    let s = RenderSettings::new(17, 17);
    let out = render_retained(&set, &front(17), &s).unwrap();
    let alpha_center = out.state.as_ref().unwrap().contributions(8, 8)[0].alpha;
    let mut up = Tensor::zeros(&[3, 17, 17]);
    up.data_mut()[8 * 17 + 8] = 1.0;
    let g = render_gradients(&out, &up, &Tensor::zeros(&[1, 17, 17])).unwrap();
    assert!((g.colors[0][0] - alpha_center).abs() < 1e-6);
    assert_eq!(g.colors[0][1], 0.0);
}

#[test]
fn five_gaussians_match_finite_differences() {
    for seed in 0..3 {
        let set = random_scene(5, 100 + seed);
        let cam = random_camera(100 + seed, 16);
        let s = RenderSettings::new(16, 16);
        let r = raster_fd_check(&set, &cam, &s, seed, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-3, "seed {seed}: {} ({})", r.max_rel_error, r.worst);
        assert!(r.checked >= 5 * 14 - r.excluded && r.excluded <= 3, "excluded {}", r.excluded);
    }
}

#[test]
fn permutation_invariance() {
    let set = random_scene(20, 9);
    let cam = random_camera(9, 20);
    let s = RenderSettings::new(20, 20);
    let base = render(&set, &cam, &s).unwrap();
    let mut idx: Vec<usize> = (0..20).collect();
    idx.shuffle(&mut lgm_core::rng::seeded(4));
    let shuffled: GaussianSet = idx.iter().map(|&i| set.get(i)).collect();
    let other = render(&shuffled, &cam, &s).unwrap();
    assert!(base.rgb.max_abs_diff(&other.rgb) < 1e-6);
    assert!(base.alpha.max_abs_diff(&other.alpha) < 1e-6);
}

#[test]
fn conservation_and_alpha_range() {
    for seed in 0..20 {
        let set = random_scene(15, 200 + seed);
        let s = RenderSettings::new(16, 16);
        let out = render_retained(&set, &random_camera(seed, 16), &s).unwrap();
        let st = out.state.as_ref().unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let sum: f64 = st.contributions(x, y).iter().map(|c| c.alpha * c.transmittance).sum();
                assert!((sum + st.final_transmittance()[y * 16 + x] - 1.0).abs() < 1e-6);
            }
        }
        assert!(out.alpha.data().iter().all(|a| (0.0..=1.0).contains(a)));
        assert!(out.rgb.data().iter().all(|a| (0.0..=1.0).contains(a)));
    }
}

#[test]
fn alpha_grows_with_opacity() {
    for seed in 0..5 {
        let set = random_scene(8, 300 + seed);
        let cam = random_camera(seed, 16);
        let s = RenderSettings::new(16, 16);
        let base = render(&set, &cam, &s).unwrap();
        for i in 0..set.len() {
            let mut up = set.clone();
            up.opacities[i] = (up.opacities[i] + 0.3).min(1.0);
            let more = render(&up, &cam, &s).unwrap();
            for (a, b) in base.alpha.data().iter().zip(more.alpha.data()) {
                assert!(b + 1e-12 >= *a);
            }
        }
    }
}

#[test]
fn culling_soundness() {
    let set = random_scene(12, 77);
    let cam = random_camera(77, 16);
    let s = RenderSettings::new(16, 16);
    let full = render_retained(&set, &cam, &s).unwrap();
    let st = full.state.as_ref().unwrap();
    // pick a pixel and drop every Gaussian that does not reach it
    let (px, py) = (8, 8);
    let keep: Vec<u32> = st.contributions(px, py).iter().map(|c| c.gaussian).collect();
    let reduced: GaussianSet = (0..set.len()).filter(|i| keep.contains(&(*i as u32))).map(|i| set.get(i)).collect();
    let part = render(&reduced, &cam, &s).unwrap();
    for k in 0..3 {
        assert!((full.rgb.at(&[k, py, px]) - part.rgb.at(&[k, py, px])).abs() < 1e-6);
    }
    assert!((full.alpha.at(&[0, py, px]) - part.alpha.at(&[0, py, px])).abs() < 1e-6);
}

#[test]
fn non_finite_attribute_is_named() {
    let mut set = random_scene(3, 1);
    set.opacities[2] = f64::NAN;
    let err = render(&set, &front(4), &RenderSettings::new(4, 4)).unwrap_err().to_string();
    assert!(err.contains("Gaussian 2"), "{err}");
}

