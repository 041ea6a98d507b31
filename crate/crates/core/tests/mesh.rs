use lgm_core::gaussian::{Gaussian, GaussianSet};
use lgm_core::mesh::{
    bake_colors, bake_colors_with, default_iso, density_at, eval_density, export_obj, load_obj, marching_cubes, read_obj,
    write_obj, Mesh,
};
use proptest::prelude::*;

fn single(center: [f64; 3], sigma: f64, color: [f64; 3]) -> GaussianSet {
    [Gaussian::isotropic(center, sigma, 1.0, color)].into_iter().collect()
}

fn sphere_mesh(set: &GaussianSet, res: usize) -> (Mesh, f64) {
    let grid = eval_density(set, res).unwrap();
    (marching_cubes(&grid, (-0.5f64).exp()), grid.cell_size())
}

#[test]
fn density_examples() {
    let empty = eval_density(&GaussianSet::new(), 16).unwrap();
    assert!(empty.values.iter().all(|&v| v == 0.0));
    let set = single([0.0; 3], 0.1, [1.0; 3]);
    assert!((density_at(&set, [0.0; 3]) - 1.0).abs() < 1e-12);
    assert!((density_at(&set, [0.1, 0.0, 0.0]) - (-0.5f64).exp()).abs() < 1e-12);
    assert!(eval_density(&set, 7).is_err());
}

#[test]
fn grid_max_sits_near_densest_center() {
    let set: GaussianSet = [
        Gaussian::isotropic([-0.5, 0.1, 0.2], 0.08, 0.6, [1.0; 3]),
        Gaussian::isotropic([0.43, -0.27, 0.11], 0.1, 0.95, [1.0; 3]),
    ]
    .into_iter()
    .collect();
    let grid = eval_density(&set, 48).unwrap();
    let (arg, _) = grid.values.iter().enumerate().fold((0, -1.0), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    let n = grid.resolution;
    let p = [grid.coord(arg % n), grid.coord(arg / n % n), grid.coord(arg / (n * n))];
    let d = (0..3).map(|k| (p[k] - set.centers[1][k]).powi(2)).sum::<f64>().sqrt();
    assert!(d <= grid.cell_size() * 3f64.sqrt(), "argmax {d} from center");
}

#[test]
fn single_gaussian_gives_a_sphere() {
    let (mesh, cell) = sphere_mesh(&single([0.0; 3], 0.1, [1.0; 3]), 64);
    assert!(!mesh.is_empty());
    mesh.validate().unwrap();
    let r = mesh.mean_vertex_radius([0.0; 3]);
    assert!((r - 0.1).abs() < cell, "radius {r}, cell {cell}");
    assert_eq!(mesh.euler_characteristic(), 2);
}

#[test]
fn iso_outside_range_gives_empty_mesh() {
    let grid = eval_density(&single([0.0; 3], 0.1, [1.0; 3]), 16).unwrap();
    assert!(marching_cubes(&grid, grid.max() + 0.1).is_empty());
    assert!(marching_cubes(&grid, -1.0).is_empty());
    assert!(marching_cubes(&eval_density(&GaussianSet::new(), 16).unwrap(), 0.5).is_empty());
}

#[test]
fn doubling_scale_doubles_radius() {
    let (a, _) = sphere_mesh(&single([0.0; 3], 0.1, [1.0; 3]), 64);
    let (b, _) = sphere_mesh(&single([0.0; 3], 0.2, [1.0; 3]), 64);
    let ratio = b.mean_vertex_radius([0.0; 3]) / a.mean_vertex_radius([0.0; 3]);
    assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
}

#[test]
fn centroid_follows_translation() {
    let t = [0.23, -0.17, 0.31];
    let (a, cell) = sphere_mesh(&single([0.0; 3], 0.12, [1.0; 3]), 64);
    let (b, _) = sphere_mesh(&single(t, 0.12, [1.0; 3]), 64);
    let (ca, cb) = (a.centroid(), b.centroid());
    for k in 0..3 {
        assert!((cb[k] - ca[k] - t[k]).abs() < cell);
    }
}

#[test]
fn uniform_red_bakes_red() {
    let set: GaussianSet = [
        Gaussian::isotropic([-0.15, 0.0, 0.0], 0.15, 1.0, [1.0, 0.0, 0.0]),
        Gaussian::isotropic([0.15, 0.05, 0.0], 0.12, 1.0, [1.0, 0.0, 0.0]),
    ]
    .into_iter()
    .collect();
    let grid = eval_density(&set, 48).unwrap();
    let iso = default_iso(&set);
    let mesh = marching_cubes(&grid, iso);
    let baked = bake_colors_with(&mesh, &set, 8, &grid, iso).unwrap();
    assert_eq!(baked.colors.len(), baked.vertices.len());
    for c in &baked.colors {
        assert!((c[0] - 1.0).abs() < 0.05 && c[1] < 0.05 && c[2] < 0.05, "{c:?}");
    }
}

#[test]
fn two_hemispheres_keep_their_colors() {
    let red = [0.9, 0.1, 0.1];
    let blue = [0.1, 0.2, 0.9];
    let mut set = GaussianSet::new();
    let step = 0.1;
    for i in -4..=4 {
        for j in -4..=4 {
            for k in -4..=4 {
                let p = [i as f64 * step, j as f64 * step, k as f64 * step];
                if i == 0 || p.iter().map(|v| v * v).sum::<f64>() > 0.4 * 0.4 {
                    continue;
                }
                set.push(Gaussian::isotropic(p, 0.07, 1.0, if i < 0 { red } else { blue }));
            }
        }
    }
    let grid = eval_density(&set, 48).unwrap();
    let iso = default_iso(&set);
    let mesh = marching_cubes(&grid, iso);
    let baked = bake_colors_with(&mesh, &set, 16, &grid, iso).unwrap();
    let mut checked = 0;
    for (v, c) in baked.vertices.iter().zip(&baked.colors) {
        // The seam between the halves blends both colors.
        if v[0].abs() < 0.15 {
            continue;
        }
        let want = if v[0] < 0.0 { red } else { blue };
        for k in 0..3 {
            assert!((c[k] - want[k]).abs() < 0.1, "vertex {v:?} color {c:?}");
        }
        checked += 1;
    }
    assert!(checked > 100);
}

#[test]
fn bake_preconditions() {
    let set = single([0.0; 3], 0.1, [1.0; 3]);
    let (mesh, _) = sphere_mesh(&set, 32);
    assert!(bake_colors(&mesh, &set, 0).is_err());
    assert!(bake_colors(&Mesh::default(), &set, 4).is_err());
    let baked = bake_colors(&mesh, &set, 4).unwrap();
    assert!(baked.colors.iter().flatten().all(|c| (0.0..=1.0).contains(c)), "{:?}", &baked.colors[..3]);
}

#[test]
fn obj_single_triangle_is_four_lines() {
    let mesh = Mesh {
        vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        faces: vec![[0, 1, 2]],
        colors: vec![[1.0, 0.0, 0.0]; 3],
    };
    let mut buf = Vec::new();
    write_obj(&mut buf, &mesh).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "v 0.000000 0.000000 0.000000 1.000000 0.000000 0.000000");
    assert_eq!(lines[3], "f 1 2 3");
}

#[test]
fn obj_round_trip_and_unwritable_path() {
    let set = single([0.1, 0.0, -0.1], 0.15, [0.2, 0.6, 0.4]);
    let (mesh, _) = sphere_mesh(&set, 24);
    let mesh = bake_colors(&mesh, &set, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.obj");
    export_obj(&mesh, &path).unwrap();
    let back = load_obj(&path).unwrap();
    assert_eq!(back.faces, mesh.faces);
    for (a, b) in mesh.vertices.iter().zip(&back.vertices) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() <= 5e-7);
        }
    }
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().filter(|l| l.starts_with("f ")).flat_map(|l| l.split(' ').skip(1)).all(|i| i.parse::<u32>().unwrap() >= 1));
    assert!(export_obj(&mesh, dir.path().join("missing/m.obj")).is_err());
    assert!(read_obj("f 0 1 2\n".as_bytes()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn density_is_permutation_invariant(seed in 0u64..1000, shift in 1usize..5) {
        use rand::Rng;
        let mut r = lgm_core::rng::seeded(seed);
        let gs: Vec<Gaussian> = (0..5)
            .map(|_| Gaussian::isotropic(
                std::array::from_fn(|_| r.random_range(-0.7..0.7)),
                r.random_range(0.05..0.2),
                r.random_range(0.1..1.0),
                [0.5; 3],
            ))
            .collect();
        let mut rotated = gs.clone();
        rotated.rotate_left(shift);
        let a = eval_density(&gs.into_iter().collect(), 12).unwrap();
        let b = eval_density(&rotated.into_iter().collect(), 12).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            prop_assert!(*x >= 0.0);
        }
    }
}
