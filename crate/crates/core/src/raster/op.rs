use super::{render, render_gradients, render_retained, RenderSettings};
use crate::camera::Camera;
use crate::error::Result;
use crate::gaussian::GaussianVars;
use crate::tensor::{Real, Tensor, Var};

/// Tape-tracked render: one `[4, H, W]` image holding rgb then alpha.
#[derive(Clone, Copy)]
pub struct RenderedVar<'t, T: Real> {
    pub image: Var<'t, T>,
}

impl<'t, T: Real> RenderedVar<'t, T> {
    pub fn rgb(&self) -> Result<Var<'t, T>> {
        self.image.slice(0, 0, 3)
    }

    pub fn alpha(&self) -> Result<Var<'t, T>> {
        self.image.slice(0, 3, 4)
    }
}

pub fn render_var<'t, T: Real>(
    gaussians: &GaussianVars<'t, T>,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<RenderedVar<'t, T>> {
    let inputs = gaussians.as_array();
    let set = gaussians.to_set()?;
    let tracked = inputs.iter().any(|v| v.requires_grad());
    let out = if tracked {
        render_retained(&set, camera, settings)?
    } else {
        render(&set, camera, settings)?
    };
    let (h, w) = (settings.height, settings.width);
    let mut value = Tensor::<T>::zeros(&[4, h, w]);
    for (d, &s) in value.data_mut().iter_mut().zip(out.rgb.data().iter().chain(out.alpha.data())) {
        *d = T::of(s);
    }
    let tape = inputs[0].tape();
    let image = tape.record(
        &inputs,
        value,
        Box::new(move |g| {
            let hw = h * w;
            let up: Vec<f64> = g.data().iter().map(|v| v.as_f64()).collect();
            let rgb = Tensor::new(&[3, h, w], up[..3 * hw].to_vec()).expect("upstream rgb");
            let alpha = Tensor::new(&[1, h, w], up[3 * hw..].to_vec()).expect("upstream alpha");
            let grads = render_gradients(&out, &rgb, &alpha).expect("forward state retained for tracked inputs");
            grads.to_tensors::<T>().into_iter().map(Some).collect()
        }),
    );
    Ok(RenderedVar { image })
}
