use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng as _;

use super::data::{augment_inputs, make_batch, view_inputs, Batch, Scene, ViewSample, INPUT_VIEWS};
use super::optim::{adamw_step, clip_grad_norm, cosine_lr, AdamState};
use super::{loss_alpha, loss_rgb, psnr, TrainConfig};
use crate::config::RunConfig;
use crate::error::{invalid, Error, Result};
use crate::gaussian::{decode_features, decode_features_var};
use crate::raster::{render, render_var, RenderSettings};
use crate::rng;
use crate::tensor::rtf::Archive;
use crate::tensor::{Tape, Tensor, Var};
use crate::unet::{unet_forward, unet_init, UNetConfig, UNetParams};

pub const METRICS_HEADER: &str = "step,lr,loss,psnr_in,psnr_novel";

const TAG_SCENE: u64 = 1;
const TAG_BATCH: u64 = 2;
const TAG_AUG: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Mean over the input views of every batch in the step.
    pub psnr_in: f64,
    /// Mean over the supervised views that were not inputs.
    pub psnr_novel: f64,
}

impl StepMetrics {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.lr, self.loss, self.psnr_in, self.psnr_novel)
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<StepMetrics>> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    match lines.next() {
        Some(Ok(h)) if h == METRICS_HEADER => {}
        _ => return Err(Error::Format(format!("metrics log must start with '{METRICS_HEADER}'"))),
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("bad metrics line '{line}'"));
        if f.len() != 5 {
            return Err(bad());
        }
        let r = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        out.push(StepMetrics {
            step: f[0].parse().map_err(|_| bad())?,
            lr: r(1)?,
            loss: r(2)?,
            psnr_in: r(3)?,
            psnr_novel: r(4)?,
        });
    }
    Ok(out)
}

fn sub_seed(seed: u64, tag: u64, index: u64) -> u64 {
    rng::stream(seed, tag, index).random()
}

fn resized(t: &Tensor<f32>, res: usize) -> Result<Tensor<f32>> {
    if t.shape()[1] == res && t.shape()[2] == res {
        return Ok(t.clone());
    }
    let c = t.shape()[0];
    let tape = Tape::new();
    let x = tape.constant(t.clone().reshaped(&[1, c, t.shape()[1], t.shape()[2]])?);
    let y = x.resize_bilinear(res, res)?;
    (*y.value()).clone().reshaped(&[c, res, res])
}

/// Optimizer state plus the position in the schedule.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub unet: UNetConfig,
    pub params: UNetParams<f32>,
    pub adam: AdamState<f32>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, unet: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let params = unet_init(&unet, cfg.seed)?;
        let adam = AdamState::new(&params.tensors);
        Ok(Self {
            cfg,
            unet,
            params,
            adam,
            step: 0,
        })
    }

    /// Batch `b` of optimizer step `step`.
    pub fn sample_batch(&self, scenes: &[Scene], step: u64, b: usize) -> Result<Batch> {
        let seed = self.cfg.seed;
        if self.cfg.fixed_batch {
            return make_batch(&scenes[0], sub_seed(seed, TAG_BATCH, 0));
        }
        let idx = (step - 1) * self.cfg.batch as u64 + b as u64;
        let scene = rng::stream(seed, TAG_SCENE, idx).random_range(0..scenes.len());
        make_batch(&scenes[scene], sub_seed(seed, TAG_BATCH, idx))
    }

    /// Runs the next optimizer step.
    pub fn step(&mut self, scenes: &[Scene]) -> Result<StepMetrics> {
        if scenes.is_empty() {
            return Err(invalid!("training needs at least one scene"));
        }
        let step = self.step + 1;
        let cfg = &self.cfg;
        let lr = cosine_lr(step, cfg.total_steps, cfg.lr);
        let sr = cfg.supervise_res;
        let settings = RenderSettings::new(sr, sr);
        let (mut psnr_in, mut psnr_novel) = (Vec::new(), Vec::new());

        let (loss, mut grads) = {
            let tape = Tape::<f32>::new();
            let bound = self.params.bind(&tape, true);
            let mut total: Option<Var<'_, f32>> = None;
            for b in 0..cfg.batch {
                let batch = self.sample_batch(scenes, step, b)?;
                let idx = (step - 1) * cfg.batch as u64 + b as u64;
                let inputs = augment_inputs(&batch.inputs, cfg, sub_seed(cfg.seed, TAG_AUG, idx))?;
                let feats = unet_forward(&bound, &self.unet, tape.constant(view_inputs(&inputs)?))?;
                let gaussians = decode_features_var(feats, self.unet.k)?;
                for (vi, target) in batch.targets.iter().enumerate() {
                    let rendered = render_var(&gaussians, &target.camera.with_size(sr, sr), &settings)?;
                    let (gt_rgb, gt_alpha) = (resized(&target.image, sr)?, resized(&target.alpha, sr)?);
                    let rgb = rendered.rgb()?;
                    let p = psnr(rgb.value().data(), gt_rgb.data());
                    if vi < INPUT_VIEWS {
                        psnr_in.push(p);
                    } else {
                        psnr_novel.push(p);
                    }
                    let l = loss_rgb(rgb, tape.constant(gt_rgb), cfg.lambda_lpips)?
                        .try_add(loss_alpha(rendered.alpha()?, tape.constant(gt_alpha))?)?;
                    total = Some(match total {
                        Some(t) => t.try_add(l)?,
                        None => l,
                    });
                }
            }
            let loss = total.expect("batch >= 1").scale(1.0 / cfg.batch as f32);
            let value = loss.value().item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss {value} at step {step}")));
            }
            let g = tape.backward(loss)?;
            (value, bound.vars.iter().map(|&v| g.get(v)).collect::<Vec<Tensor<f32>>>())
        };

        clip_grad_norm(&mut grads, cfg.clip_norm)
            .map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
        adamw_step(&mut self.params.tensors, &grads, &mut self.adam, step, lr, cfg)?;
        self.step = step;
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        Ok(StepMetrics {
            step,
            lr,
            loss,
            psnr_in: mean(&psnr_in),
            psnr_novel: mean(&psnr_novel),
        })
    }

    /// Mean PSNR over the input targets and the other targets of `batch`
    /// when the network sees `inputs`, rendered at `supervise_res`.
    pub fn evaluate(&self, batch: &Batch, inputs: &[ViewSample]) -> Result<(f64, f64)> {
        let sr = self.cfg.supervise_res;
        let feats = self.params.predict(&view_inputs(inputs)?)?;
        let set = decode_features(&feats, self.unet.k)?;
        let settings = RenderSettings::new(sr, sr);
        let (mut p_in, mut p_novel) = (Vec::new(), Vec::new());
        for (vi, target) in batch.targets.iter().enumerate() {
            let out = render(&set, &target.camera.with_size(sr, sr), &settings)?;
            let gt = resized(&target.image, sr)?;
            let p = psnr(out.rgb.cast::<f32>().data(), gt.data());
            if vi < INPUT_VIEWS { p_in.push(p) } else { p_novel.push(p) }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        Ok((mean(&p_in), mean(&p_novel)))
    }

    fn reached_targets(&self, m: &StepMetrics) -> bool {
        let c = &self.cfg;
        (c.stop_psnr_in > 0.0 || c.stop_psnr_novel > 0.0)
            && m.psnr_in >= c.stop_psnr_in
            && m.psnr_novel >= c.stop_psnr_novel
    }

    /// Steps until `total_steps` or the PSNR targets, appending to
    /// `out/metrics.csv` and checkpointing into `out/` when given.
    pub fn run(&mut self, scenes: &[Scene], out: Option<&Path>) -> Result<Vec<StepMetrics>> {
        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join("metrics.csv");
                let fresh = !path.exists() || self.step == 0;
                let mut f = OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(path)?;
                if fresh {
                    writeln!(f, "{METRICS_HEADER}")?;
                }
                Some(f)
            }
            None => None,
        };
        let mut metrics = Vec::new();
        while self.step < self.cfg.total_steps {
            let m = self.step(scenes)?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", m.csv_line())?;
                f.flush()?;
            }
            log::info!("{}", m.csv_line());
            metrics.push(m);
            let done = self.reached_targets(&m) || self.step == self.cfg.total_steps;
            if let Some(dir) = out {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.step % every == 0 {
                    self.save_checkpoint(dir.join(format!("ckpt-{:06}", self.step)))?;
                }
                if done {
                    self.save_checkpoint(dir.join("final"))?;
                }
            }
            if done {
                break;
            }
        }
        Ok(metrics)
    }

    /// `params.lgma`, `optimizer.lgma` and `config.cfg` in `dir`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.params.save(dir.join("params.lgma"))?;
        let mut opt = Archive::new();
        for (i, name) in self.params.names.iter().enumerate() {
            opt.insert(format!("m.{name}"), self.adam.m[i].clone());
            opt.insert(format!("v.{name}"), self.adam.v[i].clone());
        }
        opt.insert("step", Tensor::<f64>::scalar(self.step as f64));
        opt.save(dir.join("optimizer.lgma"))?;
        let run = RunConfig {
            unet: self.unet.clone(),
            train: self.cfg.clone(),
            ..RunConfig::default()
        };
        run.save(dir.join("config.cfg"))
    }

    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let run = RunConfig::load(dir.join("config.cfg"))?;
        let params = UNetParams::<f32>::load(&run.unet, dir.join("params.lgma"))?;
        let opt = Archive::load(dir.join("optimizer.lgma"))?;
        let mut adam = AdamState::new(&params.tensors);
        for (i, name) in params.names.iter().enumerate() {
            for (slot, prefix) in [(&mut adam.m[i], "m"), (&mut adam.v[i], "v")] {
                let t = opt.require(&format!("{prefix}.{name}"))?.to_real::<f32>();
                if t.shape() != slot.shape() {
                    return Err(Error::Format(format!("optimizer slot {prefix}.{name} has shape {:?}", t.shape())));
                }
                *slot = t;
            }
        }
        let step = opt.require("step")?.to_real::<f64>().item();
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(Error::Format(format!("bad checkpoint step {step}")));
        }
        Ok(Self {
            cfg: run.train,
            unet: run.unet,
            params,
            adam,
            step: step as u64,
        })
    }
}

/// Fresh training run over `scenes`.
pub fn train_loop(
    cfg: &TrainConfig,
    unet: &UNetConfig,
    scenes: &[Scene],
    out: Option<&Path>,
) -> Result<(Trainer, Vec<StepMetrics>)> {
    let mut t = Trainer::new(cfg.clone(), unet.clone())?;
    let m = t.run(scenes, out)?;
    Ok((t, m))
}
