//! Flat `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::raster::RenderSettings;
use crate::training::TrainConfig;
use crate::unet::UNetConfig;

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "LGM_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub scenes: usize,
    pub blobs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshConfig {
    pub resolution: usize,
    /// `None` picks half the largest opacity of the set.
    pub iso: Option<f64>,
    pub bake_views: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub background: [f64; 3],
    pub near: f64,
    pub far: f64,
    pub cutoff: f64,
    pub dilation: f64,
    pub min_transmittance: f64,
}

impl RenderConfig {
    pub fn settings(&self, width: usize, height: usize) -> RenderSettings {
        RenderSettings {
            width,
            height,
            background: self.background,
            near: self.near,
            far: self.far,
            cutoff: self.cutoff,
            dilation: self.dilation,
            min_transmittance: self.min_transmittance,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub mesh: MeshConfig,
    pub render: RenderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let r = RenderSettings::new(1, 1);
        Self {
            unet: UNetConfig::desk(),
            train: TrainConfig::default(),
            data: DataConfig { scenes: 8, blobs: 12 },
            mesh: MeshConfig {
                resolution: 128,
                iso: None,
                bake_views: 16,
            },
            render: RenderConfig {
                background: r.background,
                near: r.near,
                far: r.far,
                cutoff: r.cutoff,
                dilation: r.dilation,
                min_transmittance: r.min_transmittance,
            },
        }
    }
}

fn cfg_err(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key} = '{value}': expected {what}"))
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| cfg_err(key, v, "a number"))
}

fn real(key: &str, v: &str) -> Result<f64> {
    let x: f64 = num(key, v)?;
    if !x.is_finite() {
        return Err(cfg_err(key, v, "a finite number"));
    }
    Ok(x)
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(cfg_err(key, v, "true or false")),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn preset(name: &str) -> Result<UNetConfig> {
    Ok(match name {
        "desk" => UNetConfig::desk(),
        "paper" => UNetConfig::paper(),
        "paper_small_output" => UNetConfig::paper_small_output(),
        "paper_single_view" => UNetConfig::paper_single_view(),
        "linear_head" => UNetConfig::linear_head(64, 4, 1),
        _ => return Err(cfg_err("preset", name, "desk, paper, paper_small_output, paper_single_view or linear_head")),
    })
}

/// `(key, value)` pairs of a config text, in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Sets one key. `preset` replaces the whole network section.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (u, t) = (&mut self.unet, &mut self.train);
        match key {
            "preset" => *u = preset(v)?,
            "in_res" => u.in_res = num(key, v)?,
            "views" => u.views = num(key, v)?,
            "in_channels" => u.in_channels = num(key, v)?,
            "down_channels" => u.down_channels = list(key, v)?,
            "mid_channels" => u.mid_channels = num(key, v)?,
            "up_channels" => u.up_channels = list(key, v)?,
            "attention_blocks" => u.attention_blocks = list(key, v)?.into_iter().collect(),
            "groups" => u.groups = num(key, v)?,
            "layers" => u.layers = num(key, v)?,
            "heads" => u.heads = num(key, v)?,
            "k" => u.k = num(key, v)?,
            "lr" => t.lr = real(key, v)?,
            "weight_decay" => t.weight_decay = real(key, v)?,
            "beta1" => t.beta1 = real(key, v)?,
            "beta2" => t.beta2 = real(key, v)?,
            "clip_norm" => t.clip_norm = real(key, v)?,
            "total_steps" => t.total_steps = num(key, v)?,
            "batch" => t.batch = num(key, v)?,
            "lambda_lpips" => t.lambda_lpips = real(key, v)?,
            "aug_prob" => t.aug_prob = real(key, v)?,
            "independent_aug" => t.independent_aug = boolean(key, v)?,
            "distort_cells" => t.distort_cells = num(key, v)?,
            "distort_max" => t.distort_max = real(key, v)?,
            "jitter_max_deg" => t.jitter_max_deg = real(key, v)?,
            "supervise_res" => t.supervise_res = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "checkpoint_every" => t.checkpoint_every = num(key, v)?,
            "fixed_batch" => t.fixed_batch = boolean(key, v)?,
            "stop_psnr_in" => t.stop_psnr_in = real(key, v)?,
            "stop_psnr_novel" => t.stop_psnr_novel = real(key, v)?,
            "scenes" => self.data.scenes = num(key, v)?,
            "blobs" => self.data.blobs = num(key, v)?,
            "mesh_resolution" => self.mesh.resolution = num(key, v)?,
            "mesh_iso" => self.mesh.iso = if v == "auto" { None } else { Some(real(key, v)?) },
            "bake_views" => self.mesh.bake_views = num(key, v)?,
            "background" => {
                let c: Vec<f64> = v.split(',').map(|s| real(key, s.trim())).collect::<Result<_>>()?;
                self.render.background = c.try_into().map_err(|_| cfg_err(key, v, "three comma-separated numbers"))?;
            }
            "near" => self.render.near = real(key, v)?,
            "far" => self.render.far = real(key, v)?,
            "cutoff" => self.render.cutoff = real(key, v)?,
            "dilation" => self.render.dilation = real(key, v)?,
            "min_transmittance" => self.render.min_transmittance = real(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies pairs over `self`; a `preset` is applied before the other keys.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs.iter().filter(|(k, _)| k == "preset") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply(&parse_pairs(text)?)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Replaces the seed with `LGM_SEED` when that is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}='{v}' is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.unet.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.render.settings(1, 1).validate().map_err(wrap)?;
        if self.data.blobs == 0 || self.mesh.resolution < 8 {
            return Err(Error::Config("blobs must be positive and mesh_resolution at least 8".into()));
        }
        Ok(())
    }

    /// Every key with its current value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let (u, t, r) = (&self.unet, &self.train, &self.render);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("in_res", u.in_res.to_string());
        kv("views", u.views.to_string());
        kv("in_channels", u.in_channels.to_string());
        kv("down_channels", join(&u.down_channels));
        kv("mid_channels", u.mid_channels.to_string());
        kv("up_channels", join(&u.up_channels));
        kv("attention_blocks", join(&u.attention_blocks));
        kv("groups", u.groups.to_string());
        kv("layers", u.layers.to_string());
        kv("heads", u.heads.to_string());
        kv("k", u.k.to_string());
        kv("lr", t.lr.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("clip_norm", t.clip_norm.to_string());
        kv("total_steps", t.total_steps.to_string());
        kv("batch", t.batch.to_string());
        kv("lambda_lpips", t.lambda_lpips.to_string());
        kv("aug_prob", t.aug_prob.to_string());
        kv("independent_aug", t.independent_aug.to_string());
        kv("distort_cells", t.distort_cells.to_string());
        kv("distort_max", t.distort_max.to_string());
        kv("jitter_max_deg", t.jitter_max_deg.to_string());
        kv("supervise_res", t.supervise_res.to_string());
        kv("seed", t.seed.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("fixed_batch", t.fixed_batch.to_string());
        kv("stop_psnr_in", t.stop_psnr_in.to_string());
        kv("stop_psnr_novel", t.stop_psnr_novel.to_string());
        kv("scenes", self.data.scenes.to_string());
        kv("blobs", self.data.blobs.to_string());
        kv("mesh_resolution", self.mesh.resolution.to_string());
        kv("mesh_iso", self.mesh.iso.map_or("auto".into(), |v| v.to_string()));
        kv("bake_views", self.mesh.bake_views.to_string());
        kv("background", join(r.background));
        kv("near", r.near.to_string());
        kv("far", r.far.to_string());
        kv("cutoff", r.cutoff.to_string());
        kv("dilation", r.dilation.to_string());
        kv("min_transmittance", r.min_transmittance.to_string());
        s
    }
}
