use std::f64::consts::PI;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

use super::TrainConfig;

/// `lr0 · ½(1 + cos(π·step/total))`, clamped to the schedule range.
pub fn cosine_lr(step: u64, total: u64, lr0: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = step.min(total) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (PI * t).cos())
}

/// Scales all gradients together so their global L2 norm is at most
/// `max_norm`; returns the norm before scaling.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> Result<f64> {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {norm}")));
    }
    if norm > max_norm {
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = T::of(v.as_f64() * max_norm / norm);
            }
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros(), v: zeros() }
    }
}

/// One AdamW update at `step` (1-based) with learning rate `lr`; weight decay
/// is applied to the parameters directly, outside the moment estimates.
pub fn adamw_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    step: u64,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if step == 0 {
        return Err(crate::error::invalid!("AdamW steps are 1-based"));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err!(
            "AdamW got {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let wd = cfg.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != p.shape() {
            return Err(shape_err!("AdamW slot {i}: param {:?}, grad {:?}", p.shape(), g.shape()));
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1t * *mv + ob1 * gv;
            *vv = b2t * *vv + ob2 * gv * gv;
            let mh = mv.as_f64() / c1;
            let vh = vv.as_f64() / c2;
            let x = pv.as_f64();
            *pv = T::of(x - lr * (mh / (vh.sqrt() + 1e-8) + wd * x));
        }
    }
    Ok(())
}
