use nalgebra::Vector3;

use super::Camera;
use crate::tensor::{Real, Tensor};

/// One ray per pixel center in Plücker form (moment `o × d`, direction `d`).
#[derive(Debug, Clone)]
pub struct RayBundle {
    pub width: usize,
    pub height: usize,
    pub origins: Vec<Vector3<f64>>,
    pub directions: Vec<Vector3<f64>>,
    pub moments: Vec<Vector3<f64>>,
}

impl RayBundle {
    /// `[6, H, W]` map: moment xyz then direction xyz.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let hw = self.width * self.height;
        let mut t = Tensor::zeros(&[6, self.height, self.width]);
        let d = t.data_mut();
        for (i, (m, dir)) in self.moments.iter().zip(&self.directions).enumerate() {
            for c in 0..3 {
                d[c * hw + i] = T::of(m[c]);
                d[(3 + c) * hw + i] = T::of(dir[c]);
            }
        }
        t
    }
}

pub fn plucker_embed(camera: &Camera) -> RayBundle {
    let (w, h) = (camera.width, camera.height);
    let mut directions = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            directions.push(camera.ray_direction(x as f64 + 0.5, y as f64 + 0.5));
        }
    }
    let o = camera.position;
    RayBundle {
        width: w,
        height: h,
        origins: vec![o; w * h],
        moments: directions.iter().map(|d| o.cross(d)).collect(),
        directions,
    }
}
