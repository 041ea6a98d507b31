//! 3D Gaussians, decoding from per-pixel feature maps, and fusion.

mod decode;
mod ply;

pub use decode::{decode_features, decode_features_var, normalize_quaternions, GaussianVars, FEATURES_PER_GAUSSIAN};
pub use ply::{load_ply, read_ply, save_ply, write_ply, SH_C0};

use crate::error::{invalid, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub center: [f64; 3],
    pub scale: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Gaussian {
    pub fn isotropic(center: [f64; 3], sigma: f64, opacity: f64, color: [f64; 3]) -> Self {
        Self {
            center,
            scale: [sigma; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity,
            color,
        }
    }
}

/// Columnar storage of `N` Gaussians.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianSet {
    pub centers: Vec<[f64; 3]>,
    pub scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl GaussianSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            centers: Vec::with_capacity(n),
            scales: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            opacities: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn push(&mut self, g: Gaussian) {
        self.centers.push(g.center);
        self.scales.push(g.scale);
        self.rotations.push(g.rotation);
        self.opacities.push(g.opacity);
        self.colors.push(g.color);
    }

    pub fn get(&self, i: usize) -> Gaussian {
        Gaussian {
            center: self.centers[i],
            scale: self.scales[i],
            rotation: self.rotations[i],
            opacity: self.opacities[i],
            color: self.colors[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Gaussian> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Gaussians `start..end`, in order.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            centers: self.centers[start..end].to_vec(),
            scales: self.scales[start..end].to_vec(),
            rotations: self.rotations[start..end].to_vec(),
            opacities: self.opacities[start..end].to_vec(),
            colors: self.colors[start..end].to_vec(),
        }
    }

    /// Errors on the first Gaussian holding a non-finite attribute.
    pub fn check_finite(&self) -> Result<()> {
        for (i, g) in self.iter().enumerate() {
            let all = g
                .center
                .iter()
                .chain(&g.scale)
                .chain(&g.rotation)
                .chain(&g.color)
                .chain(std::iter::once(&g.opacity));
            if all.clone().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("Gaussian {i} has a non-finite attribute")));
            }
        }
        Ok(())
    }

    /// Checks every per-Gaussian invariant: centers in `[-1,1]³`, positive
    /// scales, unit rotations, opacity and color in `[0,1]`.
    pub fn validate(&self) -> Result<()> {
        self.check_finite()?;
        for (i, g) in self.iter().enumerate() {
            let qn = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ok = g.center.iter().all(|v| (-1.0..=1.0).contains(v))
                && g.scale.iter().all(|&v| v > 0.0)
                && (qn - 1.0).abs() < 1e-6
                && (0.0..=1.0).contains(&g.opacity)
                && g.color.iter().all(|v| (0.0..=1.0).contains(v));
            if !ok {
                return Err(invalid!("Gaussian {i} violates an attribute range: {g:?}"));
            }
        }
        Ok(())
    }

    /// Columns as tensors: centers `[N,3]`, opacities `[N]`, scales `[N,3]`,
    /// rotations `[N,4]`, colors `[N,3]`.
    pub fn to_tensors<T: Real>(&self) -> [Tensor<T>; 5] {
        let n = self.len();
        let flat = |rows: &mut dyn Iterator<Item = f64>, shape: &[usize]| {
            Tensor::new(shape, rows.map(T::of).collect()).expect("column length matches")
        };
        [
            flat(&mut self.centers.iter().flatten().copied(), &[n, 3]),
            flat(&mut self.opacities.iter().copied(), &[n]),
            flat(&mut self.scales.iter().flatten().copied(), &[n, 3]),
            flat(&mut self.rotations.iter().flatten().copied(), &[n, 4]),
            flat(&mut self.colors.iter().flatten().copied(), &[n, 3]),
        ]
    }

    /// Inverse of [`GaussianSet::to_tensors`].
    pub fn from_tensors<T: Real>(
        centers: &Tensor<T>,
        opacities: &Tensor<T>,
        scales: &Tensor<T>,
        rotations: &Tensor<T>,
        colors: &Tensor<T>,
    ) -> Result<Self> {
        let n = opacities.numel();
        let check = |t: &Tensor<T>, w: usize, name: &str| {
            if t.numel() != n * w {
                Err(crate::error::shape_err!(
                    "{name} has shape {:?}, expected {n} rows of {w}",
                    t.shape()
                ))
            } else {
                Ok(())
            }
        };
        check(centers, 3, "centers")?;
        check(scales, 3, "scales")?;
        check(rotations, 4, "rotations")?;
        check(colors, 3, "colors")?;
        fn rows<T: Real, const W: usize>(t: &Tensor<T>) -> Vec<[f64; W]> {
            t.data()
                .chunks_exact(W)
                .map(|c| std::array::from_fn(|i| c[i].as_f64()))
                .collect()
        }
        Ok(Self {
            centers: rows(centers),
            opacities: opacities.data().iter().map(|v| v.as_f64()).collect(),
            scales: rows(scales),
            rotations: rows(rotations),
            colors: rows(colors),
        })
    }
}

impl FromIterator<Gaussian> for GaussianSet {
    fn from_iter<I: IntoIterator<Item = Gaussian>>(iter: I) -> Self {
        let mut set = GaussianSet::new();
        for g in iter {
            set.push(g);
        }
        set
    }
}

/// Order-preserving concatenation.
pub fn fuse(sets: &[GaussianSet]) -> GaussianSet {
    let mut out = GaussianSet::with_capacity(sets.iter().map(GaussianSet::len).sum());
    for s in sets {
        out.centers.extend_from_slice(&s.centers);
        out.scales.extend_from_slice(&s.scales);
        out.rotations.extend_from_slice(&s.rotations);
        out.opacities.extend_from_slice(&s.opacities);
        out.colors.extend_from_slice(&s.colors);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, offset: f64) -> GaussianSet {
        (0..n)
            .map(|i| Gaussian::isotropic([offset + i as f64 * 0.01, 0.0, 0.0], 0.1, 0.5, [0.2, 0.3, 0.4]))
            .collect()
    }

    #[test]
    fn fuse_cases() {
        assert!(fuse(&[]).is_empty());
        let a = sample(3, 0.0);
        assert_eq!(fuse(std::slice::from_ref(&a)), a);
        let b = sample(2, 0.5);
        let ab = fuse(&[a.clone(), b.clone()]);
        assert_eq!(ab.len(), 5);
        assert_eq!(ab.slice(0, 3), a);
        assert_eq!(ab.slice(3, 5), b);
    }

    #[test]
    fn tensor_round_trip() {
        let a = sample(4, -0.2);
        let [c, o, s, r, col] = a.to_tensors::<f64>();
        assert_eq!(c.shape(), &[4, 3]);
        assert_eq!(r.shape(), &[4, 4]);
        assert_eq!(GaussianSet::from_tensors(&c, &o, &s, &r, &col).unwrap(), a);
        assert!(GaussianSet::from_tensors(&c, &o, &s, &c, &col).is_err());
    }

    #[test]
    fn validation_names_the_offender() {
        let mut a = sample(3, 0.0);
        a.validate().unwrap();
        a.scales[1][2] = f64::NAN;
        let msg = a.check_finite().unwrap_err().to_string();
        assert!(msg.contains("Gaussian 1"), "{msg}");
        let mut b = sample(2, 0.0);
        b.opacities[0] = 1.5;
        assert!(b.validate().is_err());
    }
}
