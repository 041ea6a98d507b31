//! Synthetic data, losses, optimizer and the training loop.

mod data;
mod optim;
mod run;

use std::sync::Once;

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Real, Var};

pub use data::{
    augment_inputs, gen_scene, gen_truth, make_batch, perturb_inputs, view_inputs, Batch, Scene, ViewSample, INPUT_VIEWS, POOL_SIZE,
    TARGET_VIEWS,
};
pub use optim::{adamw_step, clip_grad_norm, cosine_lr, AdamState};
pub use run::{read_metrics, train_loop, StepMetrics, Trainer, METRICS_HEADER};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    pub total_steps: u64,
    /// Batches accumulated per optimizer step.
    pub batch: usize,
    /// Weight of the perceptual term, which is not implemented.
    pub lambda_lpips: f64,
    pub aug_prob: f64,
    /// Flip separate coins for distortion and jitter.
    pub independent_aug: bool,
    pub distort_cells: usize,
    /// Distortion strength is drawn from `[0, distort_max)`.
    pub distort_max: f64,
    pub jitter_max_deg: f64,
    pub supervise_res: usize,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Reuse the first sampled batch of scene 0 at every step.
    pub fixed_batch: bool,
    /// Stop once both PSNR targets are met; 0 disables.
    pub stop_psnr_in: f64,
    pub stop_psnr_novel: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            clip_norm: 1.0,
            total_steps: 1000,
            batch: 1,
            lambda_lpips: 0.0,
            aug_prob: 0.5,
            independent_aug: false,
            distort_cells: 8,
            distort_max: 0.5,
            jitter_max_deg: 10.0,
            supervise_res: 64,
            seed: 0,
            checkpoint_every: 0,
            fixed_batch: false,
            stop_psnr_in: 0.0,
            stop_psnr_novel: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.aug_prob) {
            return Err(invalid!("aug_prob must lie in [0, 1], got {}", self.aug_prob));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid!("betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return Err(invalid!("weight_decay must be >= 0 and clip_norm > 0"));
        }
        if self.total_steps == 0 || self.batch == 0 || self.supervise_res == 0 {
            return Err(invalid!("total_steps, batch and supervise_res must be positive"));
        }
        if !(0.0..1.0).contains(&self.distort_max) || self.distort_cells < 2 || self.jitter_max_deg < 0.0 {
            return Err(invalid!("augmentation needs distort_max in [0,1), distort_cells >= 2, jitter_max_deg >= 0"));
        }
        Ok(())
    }
}

static LPIPS_WARNING: Once = Once::new();

fn mse<'t, T: Real>(pred: Var<'t, T>, gt: Var<'t, T>) -> Result<Var<'t, T>> {
    if pred.shape() != gt.shape() {
        return Err(shape_err!("loss operands differ: {:?} vs {:?}", pred.shape(), gt.shape()));
    }
    Ok(pred.try_sub(gt)?.square().mean())
}

/// Mean squared error; the perceptual term weighted by `lambda` contributes 0.
pub fn loss_rgb<'t, T: Real>(pred: Var<'t, T>, gt: Var<'t, T>, lambda: f64) -> Result<Var<'t, T>> {
    if lambda != 0.0 {
        LPIPS_WARNING.call_once(|| log::warn!("lambda_lpips = {lambda} ignored: the perceptual loss is not implemented"));
    }
    mse(pred, gt)
}

pub fn loss_alpha<'t, T: Real>(pred: Var<'t, T>, gt: Var<'t, T>) -> Result<Var<'t, T>> {
    mse(pred, gt)
}

/// PSNR in dB for images in `[0, 1]`.
pub fn psnr<T: Real>(pred: &[T], gt: &[T]) -> f64 {
    let mse = pred
        .iter()
        .zip(gt)
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / pred.len().max(1) as f64;
    -10.0 * mse.max(1e-20).log10()
}
