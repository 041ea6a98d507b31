use super::GaussianSet;
use crate::error::{shape_err, Result};
use crate::tensor::{concat, Real, Tape, Tensor, Var};

/// Channels per Gaussian: position 3, opacity 1, scale 3, rotation 4, color 3.
pub const FEATURES_PER_GAUSSIAN: usize = 14;

const QUAT_EPS: f64 = 1e-8;

/// Tape-tracked Gaussian attributes with the column layout of
/// [`GaussianSet::to_tensors`].
#[derive(Clone, Copy)]
pub struct GaussianVars<'t, T: Real> {
    pub centers: Var<'t, T>,
    pub opacities: Var<'t, T>,
    pub scales: Var<'t, T>,
    pub rotations: Var<'t, T>,
    pub colors: Var<'t, T>,
}

impl<'t, T: Real> GaussianVars<'t, T> {
    pub fn from_set(tape: &'t Tape<T>, set: &GaussianSet, requires_grad: bool) -> Self {
        let [c, o, s, r, col] = set.to_tensors::<T>();
        Self {
            centers: tape.leaf(c, requires_grad),
            opacities: tape.leaf(o, requires_grad),
            scales: tape.leaf(s, requires_grad),
            rotations: tape.leaf(r, requires_grad),
            colors: tape.leaf(col, requires_grad),
        }
    }

    pub fn len(&self) -> usize {
        self.opacities.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [Var<'t, T>; 5] {
        [self.centers, self.opacities, self.scales, self.rotations, self.colors]
    }

    pub fn to_set(&self) -> Result<GaussianSet> {
        GaussianSet::from_tensors(
            &self.centers.value(),
            &self.opacities.value(),
            &self.scales.value(),
            &self.rotations.value(),
            &self.colors.value(),
        )
    }

    /// Order-preserving concatenation on the tape.
    pub fn fuse(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| crate::error::invalid!("fusing tape-tracked sets needs at least one part"))?;
        if parts.len() == 1 {
            return Ok(*first);
        }
        let col = |f: fn(&Self) -> Var<'t, T>| concat(&parts.iter().map(f).collect::<Vec<_>>(), 0);
        Ok(Self {
            centers: col(|g| g.centers)?,
            opacities: col(|g| g.opacities)?,
            scales: col(|g| g.scales)?,
            rotations: col(|g| g.rotations)?,
            colors: col(|g| g.colors)?,
        })
    }
}

/// Row-wise unit quaternions of an `[N, 4]` input; rows with norm below 1e-8
/// become the identity `(1, 0, 0, 0)` and pass no gradient.
pub fn normalize_quaternions<'t, T: Real>(q: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = q.shape();
    if shape.len() != 2 || shape[1] != 4 {
        return Err(shape_err!("quaternions must be [N, 4], got {shape:?}"));
    }
    let x = q.value();
    let n = shape[0];
    let mut out = Tensor::zeros(&shape);
    let mut norms = vec![T::zero(); n];
    for i in 0..n {
        let row = &x.data()[i * 4..i * 4 + 4];
        let norm = row.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b).sqrt();
        let dst = &mut out.data_mut()[i * 4..i * 4 + 4];
        if norm.as_f64() < QUAT_EPS {
            dst.copy_from_slice(&[T::one(), T::zero(), T::zero(), T::zero()]);
        } else {
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = v / norm;
            }
            norms[i] = norm;
        }
    }
    let out = std::rc::Rc::new(out);
    let y = out.clone();
    Ok(q.tape().record_shared(
        &[q],
        out,
        Box::new(move |g| {
            let mut gx = Tensor::zeros(g.shape());
            for (i, &norm) in norms.iter().enumerate() {
                if norm == T::zero() {
                    continue;
                }
                let yr = &y.data()[i * 4..i * 4 + 4];
                let gr = &g.data()[i * 4..i * 4 + 4];
                let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&u, &v)| a + u * v);
                for c in 0..4 {
                    gx.data_mut()[i * 4 + c] = (gr[c] - yr[c] * dot) / norm;
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Decodes `[V, 14·K, h, w]` feature maps into `V·h·w·K` Gaussians, ordered by
/// view, row, column, then per-pixel slot.
pub fn decode_features_var<'t, T: Real>(features: Var<'t, T>, k: usize) -> Result<GaussianVars<'t, T>> {
    let shape = features.shape();
    if shape.len() != 4 || k == 0 || shape[1] != FEATURES_PER_GAUSSIAN * k {
        return Err(shape_err!(
            "decode_features expects [V, {}, h, w] for K = {k}, got {shape:?}",
            FEATURES_PER_GAUSSIAN * k
        ));
    }
    let (v, h, w) = (shape[0], shape[2], shape[3]);
    let n = v * h * w * k;
    let rows = features
        .reshape(&[v, k, FEATURES_PER_GAUSSIAN, h, w])?
        .permute(&[0, 3, 4, 1, 2])?
        .reshape(&[n, FEATURES_PER_GAUSSIAN])?;
    Ok(GaussianVars {
        centers: rows.slice(1, 0, 3)?.clamp(-T::one(), T::one()),
        opacities: rows.slice(1, 3, 4)?.sigmoid().reshape(&[n])?,
        scales: rows.slice(1, 4, 7)?.softplus().scale(T::of(0.1)),
        rotations: normalize_quaternions(rows.slice(1, 7, 11)?)?,
        colors: rows.slice(1, 11, 14)?.sigmoid(),
    })
}

/// Untracked [`decode_features_var`].
pub fn decode_features<T: Real>(features: &Tensor<T>, k: usize) -> Result<GaussianSet> {
    let tape = Tape::new();
    decode_features_var(tape.constant(features.clone()), k)?.to_set()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_gradients;

    #[test]
    fn zero_features_decode_to_canonical_gaussians() {
        let set = decode_features(&Tensor::<f64>::zeros(&[2, 14, 3, 3]), 1).unwrap();
        assert_eq!(set.len(), 18);
        for g in set.iter() {
            assert_eq!(g.center, [0.0; 3]);
            assert_eq!(g.opacity, 0.5);
            for s in g.scale {
                assert!((s - 0.1 * std::f64::consts::LN_2).abs() < 1e-15);
            }
            assert_eq!(g.rotation, [1.0, 0.0, 0.0, 0.0]);
            assert_eq!(g.color, [0.5; 3]);
        }
    }

    #[test]
    fn position_clamp_and_layout() {
        // V=1, K=2, 1x2 pixels: slot 1 of pixel (0,1) gets x = 1.5
        let mut f = Tensor::<f64>::zeros(&[1, 28, 1, 2]);
        let ch = 14; // first channel of slot 1
        f.data_mut()[ch * 2 + 1] = 1.5;
        f.data_mut()[(ch + 1) * 2 + 1] = -0.25;
        let set = decode_features(&f, 2).unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(set.centers[3], [1.0, -0.25, 0.0]);
        assert_eq!(set.centers[2], [0.0; 3]);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        assert!(decode_features(&Tensor::<f64>::zeros(&[1, 13, 2, 2]), 1).is_err());
        assert!(decode_features(&Tensor::<f64>::zeros(&[1, 14, 2, 2]), 2).is_err());
        assert!(decode_features(&Tensor::<f64>::zeros(&[14, 2, 2]), 1).is_err());
    }

    #[test]
    fn quaternion_normalization_gradient() {
        let q = Tensor::from_f64(&[2, 4], &[0.3, -0.4, 1.2, 0.1, -2.0, 0.5, 0.25, 0.8]).unwrap();
        let w = Tensor::from_f64(&[2, 4], &[1.0, 2.0, -1.0, 0.5, 0.3, -0.7, 1.1, 2.0]).unwrap();
        let report = check_gradients(
            |_, v| normalize_quaternions(v[0])?.try_mul(v[1]).map(|x| x.sum()),
            &[q, w],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn tiny_quaternion_falls_back_without_gradient() {
        let tape = Tape::<f64>::new();
        let q = tape.param(Tensor::from_f64(&[1, 4], &[1e-10, 0.0, 0.0, 0.0]).unwrap());
        let y = normalize_quaternions(q).unwrap();
        assert_eq!(y.value().data(), &[1.0, 0.0, 0.0, 0.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(q).data(), &[0.0; 4]);
    }
}
