use std::collections::HashMap;
use std::path::Path;

use rand::Rng as _;

use super::arch::{param_specs, unet_forward, Init, ParamSpec};
use super::UNetConfig;
use crate::error::{invalid, shape_err, Result};
use crate::rng;
use crate::tensor::rtf::Archive;
use crate::tensor::{Real, Tape, Tensor, Var};

pub fn count_params(cfg: &UNetConfig) -> Result<usize> {
    Ok(param_specs(cfg)?.iter().map(ParamSpec::numel).sum())
}

/// Named weights of one network, in construction order.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams<T: Real> {
    pub config: UNetConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

/// Parameters placed on a tape.
pub struct BoundParams<'t, T: Real> {
    pub vars: Vec<Var<'t, T>>,
    pub(crate) by_name: HashMap<String, Var<'t, T>>,
}

pub fn unet_init<T: Real>(cfg: &UNetConfig, seed: u64) -> Result<UNetParams<T>> {
    let specs = param_specs(cfg)?;
    let mut r = rng::seeded(seed);
    let mut names = Vec::with_capacity(specs.len());
    let mut tensors = Vec::with_capacity(specs.len());
    for s in specs {
        let t = match s.init {
            Init::Zeros => Tensor::zeros(&s.shape),
            Init::Ones => Tensor::ones(&s.shape),
            Init::FanIn(fan) => {
                let bound = 1.0 / (fan as f64).sqrt();
                Tensor::from_fn(&s.shape, |_| T::of(r.random_range(-bound..bound)))
            }
        };
        names.push(s.name);
        tensors.push(t);
    }
    Ok(UNetParams { config: cfg.clone(), names, tensors })
}

impl<T: Real> UNetParams<T> {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> BoundParams<'t, T> {
        let vars: Vec<_> = self.tensors.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect();
        let by_name = self.names.iter().cloned().zip(vars.iter().copied()).collect();
        BoundParams { vars, by_name }
    }

    /// Binds externally created variables, one per tensor in order.
    pub fn with_vars<'t>(&self, vars: Vec<Var<'t, T>>) -> Result<BoundParams<'t, T>> {
        if vars.len() != self.tensors.len() {
            return Err(invalid!("expected {} parameter variables, got {}", self.tensors.len(), vars.len()));
        }
        for ((n, t), v) in self.names.iter().zip(&self.tensors).zip(&vars) {
            if v.shape() != t.shape() {
                return Err(shape_err!("variable for '{n}' is {:?}, expected {:?}", v.shape(), t.shape()));
            }
        }
        let by_name = self.names.iter().cloned().zip(vars.iter().copied()).collect();
        Ok(BoundParams { vars, by_name })
    }

    /// Gradient-free forward pass.
    pub fn predict(&self, views: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let out = unet_forward(&p, &self.config, tape.constant(views.clone()))?;
        Ok((*out.value()).clone())
    }

    pub fn to_archive(&self) -> Archive
    where
        Tensor<T>: Into<crate::tensor::rtf::StoredTensor>,
    {
        let mut a = Archive::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            a.insert(n.clone(), t.clone());
        }
        a
    }

    /// Weights for `cfg` taken from `archive`; names and shapes must match exactly.
    pub fn from_archive(cfg: &UNetConfig, archive: &Archive) -> Result<Self> {
        let specs = param_specs(cfg)?;
        if archive.len() != specs.len() {
            return Err(invalid!(
                "checkpoint holds {} tensors but the configured network has {}",
                archive.len(),
                specs.len()
            ));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for s in specs {
            let stored = archive.require(&s.name)?;
            if stored.shape() != s.shape {
                return Err(shape_err!("parameter '{}' is {:?} in the checkpoint, expected {:?}", s.name, stored.shape(), s.shape));
            }
            tensors.push(stored.to_real());
            names.push(s.name);
        }
        Ok(Self { config: cfg.clone(), names, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()>
    where
        Tensor<T>: Into<crate::tensor::rtf::StoredTensor>,
    {
        self.to_archive().save(path)
    }

    pub fn load(cfg: &UNetConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(cfg, &Archive::load(path)?)
    }
}
