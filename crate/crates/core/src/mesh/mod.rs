//! Gaussian density grid, isosurface extraction, vertex-color baking and OBJ
//! export.

mod bake;
mod obj;
mod table;

use std::collections::HashMap;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{invalid, Result};
use crate::gaussian::GaussianSet;
use crate::raster::{covariance_factor, unit_quaternion};
use crate::tensor::rtf::Archive;
use crate::tensor::Tensor;

pub use bake::{bake_colors, bake_colors_with};
pub use obj::{export_obj, load_obj, read_obj, write_obj};

pub const MIN_RESOLUTION: usize = 8;
pub const DEFAULT_RESOLUTION: usize = 128;

/// Density sampled at `resolution³` lattice points spanning `[-1, 1]³`,
/// x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub resolution: usize,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn cell_size(&self) -> f64 {
        2.0 / (self.resolution - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        -1.0 + i as f64 * self.cell_size()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution * (y + self.resolution * z)
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(x, y, z)]
    }

    /// Values as a `[z, y, x]` tensor named `density`.
    pub fn to_archive(&self) -> Result<Archive> {
        let n = self.resolution;
        let mut a = Archive::new();
        a.insert("density", Tensor::new(&[n, n, n], self.values.clone())?);
        Ok(a)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Trilinear interpolation; 0 outside the bounds.
    pub fn sample(&self, p: [f64; 3]) -> f64 {
        let n = self.resolution;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for k in 0..3 {
            let u = (p[k] + 1.0) / self.cell_size();
            if !(0.0..=(n - 1) as f64).contains(&u) {
                return 0.0;
            }
            let i = (u.floor() as usize).min(n - 2);
            base[k] = i;
            frac[k] = u - i as f64;
        }
        let mut acc = 0.0;
        for c in 0..8 {
            let (dx, dy, dz) = (c & 1, c >> 1 & 1, c >> 2 & 1);
            let w = [dx, dy, dz]
                .iter()
                .zip(frac)
                .map(|(&d, f)| if d == 1 { f } else { 1.0 - f })
                .product::<f64>();
            acc += w * self.at(base[0] + dx, base[1] + dy, base[2] + dz);
        }
        acc
    }
}

/// Precision matrix and 3σ axis extents of every Gaussian.
fn precisions(set: &GaussianSet) -> Vec<Option<(nalgebra::Matrix3<f64>, [f64; 3])>> {
    (0..set.len())
        .map(|i| {
            let (q, _) = unit_quaternion(set.rotations[i]);
            let (_, m) = covariance_factor(set.scales[i], q);
            let cov = m * m.transpose();
            let inv = cov.try_inverse()?;
            Some((inv, std::array::from_fn(|k| 3.0 * cov[(k, k)].sqrt())))
        })
        .collect()
}

/// `Σᵢ αᵢ exp(-½ dᵀΣᵢ⁻¹d)` at `p`, counting only Gaussians within 3σ.
pub fn density_at(set: &GaussianSet, p: [f64; 3]) -> f64 {
    let p = Vector3::from(p);
    precisions(set)
        .iter()
        .enumerate()
        .filter_map(|(i, pr)| {
            let (inv, _) = pr.as_ref()?;
            let d = p - Vector3::from(set.centers[i]);
            let maha = d.dot(&(inv * d));
            (maha <= 9.0).then(|| set.opacities[i] * (-0.5 * maha).exp())
        })
        .sum()
}

pub fn eval_density(set: &GaussianSet, resolution: usize) -> Result<DensityGrid> {
    if resolution < MIN_RESOLUTION {
        return Err(invalid!("density grid resolution must be at least {MIN_RESOLUTION}, got {resolution}"));
    }
    let mut grid = DensityGrid {
        resolution,
        values: vec![0.0; resolution.pow(3)],
    };
    let h = grid.cell_size();
    let to_index = |x: f64| (x + 1.0) / h;
    for (i, pr) in precisions(set).iter().enumerate() {
        let Some((inv, ext)) = pr else { continue };
        let c = Vector3::from(set.centers[i]);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut empty = false;
        for k in 0..3 {
            let a = to_index(c[k] - ext[k]).ceil().max(0.0);
            let b = to_index(c[k] + ext[k]).floor().min((resolution - 1) as f64);
            empty |= b < a;
            (lo[k], hi[k]) = (a as usize, b as usize);
        }
        if empty {
            continue;
        }
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let d = Vector3::new(grid.coord(x), grid.coord(y), grid.coord(z)) - c;
                    let maha = d.dot(&(inv * d));
                    if maha <= 9.0 {
                        let idx = grid.index(x, y, z);
                        grid.values[idx] += set.opacities[i] * (-0.5 * maha).exp();
                    }
                }
            }
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    /// Empty until baked; otherwise one per vertex.
    pub colors: Vec<[f64; 3]>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0] - b[0], a[1] - b[1], a[2] - b[2])
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn face_normal(&self, f: [u32; 3]) -> Vector3<f64> {
        let [a, b, c] = f.map(|i| self.vertices[i as usize]);
        sub(b, a).cross(&sub(c, a))
    }

    /// Area-weighted, unit length (zero for isolated vertices).
    pub fn vertex_normals(&self) -> Vec<Vector3<f64>> {
        let mut n = vec![Vector3::zeros(); self.vertices.len()];
        for &f in &self.faces {
            let fnrm = self.face_normal(f);
            for i in f {
                n[i as usize] += fnrm;
            }
        }
        n.into_iter().map(|v| v.try_normalize(1e-300).unwrap_or_else(Vector3::zeros)).collect()
    }

    /// V − E + F over the face-referenced edges.
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges = std::collections::HashSet::new();
        for f in &self.faces {
            for i in 0..3 {
                let (a, b) = (f[i], f[(i + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        self.vertices.len() as i64 - edges.len() as i64 + self.faces.len() as i64
    }

    pub fn mean_vertex_radius(&self, center: [f64; 3]) -> f64 {
        let n = self.vertices.len().max(1) as f64;
        self.vertices.iter().map(|&v| sub(v, center).norm()).sum::<f64>() / n
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.vertices.len().max(1) as f64;
        let mut c = [0.0; 3];
        for v in &self.vertices {
            for k in 0..3 {
                c[k] += v[k] / n;
            }
        }
        c
    }

    /// Drops faces with area below `1e-12` or repeated indices, then
    /// compacts unreferenced vertices.
    pub fn cleanup(&mut self) {
        let verts = &self.vertices;
        self.faces.retain(|&f| {
            f[0] != f[1] && f[1] != f[2] && f[0] != f[2] && {
                let [a, b, c] = f.map(|i| verts[i as usize]);
                0.5 * sub(b, a).cross(&sub(c, a)).norm() >= 1e-12
            }
        });
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let mut colors = Vec::new();
        for f in &mut self.faces {
            for i in f.iter_mut() {
                let old = *i as usize;
                if remap[old] == u32::MAX {
                    remap[old] = vertices.len() as u32;
                    vertices.push(self.vertices[old]);
                    if let Some(&c) = self.colors.get(old) {
                        colors.push(c);
                    }
                }
                *i = remap[old];
            }
        }
        self.vertices = vertices;
        self.colors = colors;
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i as usize >= n)) {
            return Err(invalid!("face {f:?} references a vertex beyond {n}"));
        }
        if !self.colors.is_empty() && self.colors.len() != n {
            return Err(invalid!("{} colors for {n} vertices", self.colors.len()));
        }
        Ok(())
    }
}

/// Isosurface of `grid` at `iso` with outward (downhill) winding, followed
/// by [`Mesh::cleanup`]. Empty unless `iso` lies strictly between the grid
/// extremes.
pub fn marching_cubes(grid: &DensityGrid, iso: f64) -> Mesh {
    let mut mesh = Mesh::default();
    let (lo, hi) = grid
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(iso > lo && iso < hi) {
        return mesh;
    }
    let n = grid.resolution;
    let tbl = table::table();
    // a lattice edge is keyed by its lower endpoint and axis
    let mut ids: HashMap<(usize, usize), u32> = HashMap::new();
    for z in 0..n - 1 {
        for y in 0..n - 1 {
            for x in 0..n - 1 {
                let corner = |c: usize| (x + (c & 1), y + (c >> 1 & 1), z + (c >> 2 & 1));
                let mut case = 0;
                for c in 0..8 {
                    let (cx, cy, cz) = corner(c);
                    if grid.at(cx, cy, cz) > iso {
                        case |= 1 << c;
                    }
                }
                for tri in &tbl[case] {
                    let mut face = [0u32; 3];
                    for (slot, &e) in face.iter_mut().zip(tri) {
                        let (a, b) = table::EDGES[e];
                        let (pa, pb) = (corner(a), corner(b));
                        let axis = (a ^ b).trailing_zeros() as usize;
                        let key = (grid.index(pa.0, pa.1, pa.2), axis);
                        *slot = *ids.entry(key).or_insert_with(|| {
                            let (va, vb) = (grid.at(pa.0, pa.1, pa.2), grid.at(pb.0, pb.1, pb.2));
                            let t = (iso - va) / (vb - va);
                            let p = |i: usize, j: usize| grid.coord(i) + t * (grid.coord(j) - grid.coord(i));
                            mesh.vertices.push([p(pa.0, pb.0), p(pa.1, pb.1), p(pa.2, pb.2)]);
                            (mesh.vertices.len() - 1) as u32
                        });
                    }
                    mesh.faces.push(face);
                }
            }
        }
    }
    mesh.cleanup();
    mesh
}

/// Half the largest opacity of the set.
pub fn default_iso(set: &GaussianSet) -> f64 {
    0.5 * set.opacities.iter().copied().fold(0.0, f64::max)
}
