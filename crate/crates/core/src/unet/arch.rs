//! Layer sequence of the network, walked by interchangeable backends: one
//! collects parameter shapes, one executes on a tape.

use super::params::BoundParams;
use super::UNetConfig;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{concat, scaled_dot_attention, Conv2dSpec, Real, Var};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/√fan_in`.
    FanIn(usize),
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

trait Backend {
    type X: Clone;
    fn shape(&self, x: &Self::X) -> Vec<usize>;
    fn conv(&mut self, x: &Self::X, name: &str, cout: usize, k: usize, stride: usize, zero: bool) -> Result<Self::X>;
    fn norm(&mut self, x: &Self::X, name: &str, groups: usize, silu: bool) -> Result<Self::X>;
    fn add(&mut self, a: &Self::X, b: &Self::X) -> Result<Self::X>;
    fn concat(&mut self, a: &Self::X, b: &Self::X) -> Result<Self::X>;
    fn upsample2(&mut self, x: &Self::X) -> Result<Self::X>;
    fn attention(&mut self, x: &Self::X, name: &str, heads: usize, groups: usize) -> Result<Self::X>;
}

fn resblock<B: Backend>(b: &mut B, x: &B::X, name: &str, cout: usize, groups: usize) -> Result<B::X> {
    let h = b.norm(x, &format!("{name}.norm1"), groups, true)?;
    let h = b.conv(&h, &format!("{name}.conv1"), cout, 3, 1, false)?;
    let h = b.norm(&h, &format!("{name}.norm2"), groups, true)?;
    let h = b.conv(&h, &format!("{name}.conv2"), cout, 3, 1, false)?;
    let skip = if b.shape(x)[1] != cout {
        b.conv(x, &format!("{name}.skip"), cout, 1, 1, false)?
    } else {
        x.clone()
    };
    b.add(&h, &skip)
}

fn walk<B: Backend>(b: &mut B, cfg: &UNetConfig, x: B::X) -> Result<B::X> {
    let out = cfg.out_channels();
    if cfg.is_linear_head() {
        return b.conv(&x, "head.conv", out, 1, 1, true);
    }
    let g = cfg.groups;
    let d = cfg.down_channels.len();
    let u = cfg.up_channels.len();
    let attn = |i: usize| cfg.attention_blocks.contains(&i);

    let mut h = b.conv(&x, "conv_in", cfg.down_channels[0], 3, 1, false)?;
    let mut skips = vec![h.clone()];
    for (i, &c) in cfg.down_channels.iter().enumerate() {
        for r in 0..cfg.layers {
            h = resblock(b, &h, &format!("down.{i}.res.{r}"), c, g)?;
            if attn(i) {
                h = b.attention(&h, &format!("down.{i}.attn.{r}"), cfg.heads, g)?;
            }
            skips.push(h.clone());
        }
        if i + 1 < d {
            h = b.conv(&h, &format!("down.{i}.downsample"), c, 3, 2, false)?;
            skips.push(h.clone());
        }
    }

    h = resblock(b, &h, "mid.res.0", cfg.mid_channels, g)?;
    if attn(d) {
        h = b.attention(&h, "mid.attn", cfg.heads, g)?;
    }
    h = resblock(b, &h, "mid.res.1", cfg.mid_channels, g)?;

    for (j, &c) in cfg.up_channels.iter().enumerate() {
        for r in 0..=cfg.layers {
            let skip = skips.pop().expect("up path consumes at most the collected skips");
            h = b.concat(&h, &skip)?;
            h = resblock(b, &h, &format!("up.{j}.res.{r}"), c, g)?;
            if attn(d + 1 + j) {
                h = b.attention(&h, &format!("up.{j}.attn.{r}"), cfg.heads, g)?;
            }
        }
        if j + 1 < u {
            h = b.upsample2(&h)?;
            h = b.conv(&h, &format!("up.{j}.upsample"), c, 3, 1, false)?;
        }
    }

    h = b.norm(&h, "head.norm", g, true)?;
    b.conv(&h, "head.conv", out, 1, 1, true)
}

/// Shape-only backend that records every parameter it meets.
struct ShapeWalker {
    specs: Vec<ParamSpec>,
}

impl ShapeWalker {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push(ParamSpec { name, shape, init });
    }
}

impl Backend for ShapeWalker {
    type X = Vec<usize>;

    fn shape(&self, x: &Vec<usize>) -> Vec<usize> {
        x.clone()
    }

    fn conv(&mut self, x: &Vec<usize>, name: &str, cout: usize, k: usize, stride: usize, zero: bool) -> Result<Vec<usize>> {
        let cin = x[1];
        let spec = Conv2dSpec { stride, padding: k / 2 };
        let (h, w) = (spec.output_extent(x[2], k)?, spec.output_extent(x[3], k)?);
        let init = if zero { Init::Zeros } else { Init::FanIn(cin * k * k) };
        self.param(format!("{name}.weight"), vec![cout, cin, k, k], init);
        self.param(format!("{name}.bias"), vec![cout], Init::Zeros);
        Ok(vec![x[0], cout, h, w])
    }

    fn norm(&mut self, x: &Vec<usize>, name: &str, groups: usize, _silu: bool) -> Result<Vec<usize>> {
        if x[1] % groups != 0 {
            return Err(invalid!("{name}: {} channels are not divisible into {groups} groups", x[1]));
        }
        self.param(format!("{name}.gamma"), vec![x[1]], Init::Ones);
        self.param(format!("{name}.beta"), vec![x[1]], Init::Zeros);
        Ok(x.clone())
    }

    fn add(&mut self, a: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        if a != b {
            return Err(shape_err!("residual shapes differ: {a:?} vs {b:?}"));
        }
        Ok(a.clone())
    }

    fn concat(&mut self, a: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        if a[0] != b[0] || a[2..] != b[2..] {
            return Err(shape_err!("skip connection shapes differ: {a:?} vs {b:?}"));
        }
        Ok(vec![a[0], a[1] + b[1], a[2], a[3]])
    }

    fn upsample2(&mut self, x: &Vec<usize>) -> Result<Vec<usize>> {
        Ok(vec![x[0], x[1], x[2] * 2, x[3] * 2])
    }

    fn attention(&mut self, x: &Vec<usize>, name: &str, heads: usize, groups: usize) -> Result<Vec<usize>> {
        let c = x[1];
        if c % heads != 0 {
            return Err(invalid!("{name}: {c} channels are not divisible by {heads} heads"));
        }
        self.norm(x, &format!("{name}.norm"), groups, false)?;
        self.param(format!("{name}.pos"), vec![x[2] * x[3], c], Init::Zeros);
        for p in ["q", "k", "v", "out"] {
            self.param(format!("{name}.{p}.weight"), vec![c, c], Init::FanIn(c));
            self.param(format!("{name}.{p}.bias"), vec![c], Init::Zeros);
        }
        Ok(x.clone())
    }
}

fn walk_shapes(cfg: &UNetConfig) -> Result<(Vec<ParamSpec>, Vec<usize>)> {
    cfg.validate()?;
    let mut w = ShapeWalker { specs: Vec::new() };
    let out = walk(&mut w, cfg, vec![cfg.views, cfg.in_channels, cfg.in_res, cfg.in_res])?;
    Ok((w.specs, out))
}

/// Every parameter of `cfg` in construction order.
pub fn param_specs(cfg: &UNetConfig) -> Result<Vec<ParamSpec>> {
    Ok(walk_shapes(cfg)?.0)
}

/// Output shape of [`unet_forward`] without allocating any weights.
pub fn output_shape(cfg: &UNetConfig) -> Result<Vec<usize>> {
    Ok(walk_shapes(cfg)?.1)
}

struct TapeWalker<'a, 't, T: Real> {
    params: &'a std::collections::HashMap<String, Var<'t, T>>,
}

impl<'t, T: Real> TapeWalker<'_, 't, T> {
    fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| invalid!("missing U-Net parameter '{name}'"))
    }

    fn linear(&self, x: Var<'t, T>, name: &str) -> Result<Var<'t, T>> {
        x.matmul_ex(self.get(&format!("{name}.weight"))?, false, true)?
            .try_add(self.get(&format!("{name}.bias"))?)
    }
}

impl<'t, T: Real> Backend for TapeWalker<'_, 't, T> {
    type X = Var<'t, T>;

    fn shape(&self, x: &Var<'t, T>) -> Vec<usize> {
        x.shape()
    }

    fn conv(&mut self, x: &Var<'t, T>, name: &str, _cout: usize, k: usize, stride: usize, _zero: bool) -> Result<Var<'t, T>> {
        let w = self.get(&format!("{name}.weight"))?;
        let b = self.get(&format!("{name}.bias"))?;
        x.conv2d(w, b, Conv2dSpec { stride, padding: k / 2 })
    }

    fn norm(&mut self, x: &Var<'t, T>, name: &str, groups: usize, silu: bool) -> Result<Var<'t, T>> {
        let y = x.group_norm(
            groups,
            self.get(&format!("{name}.gamma"))?,
            self.get(&format!("{name}.beta"))?,
            T::of(NORM_EPS),
        )?;
        Ok(if silu { y.silu() } else { y })
    }

    fn add(&mut self, a: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
        a.try_add(*b)
    }

    fn concat(&mut self, a: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
        concat(&[*a, *b], 1)
    }

    fn upsample2(&mut self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        x.resize_nearest(s[2] * 2, s[3] * 2)
    }

    fn attention(&mut self, x: &Var<'t, T>, name: &str, heads: usize, groups: usize) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (v, c, h, w) = (s[0], s[1], s[2], s[3]);
        let tokens = v * h * w;
        let n = self.norm(x, &format!("{name}.norm"), groups, false)?;
        // [V, C, h, w] -> [V, h·w, C], shared positional bias, then all views as one sequence
        let t = n.permute(&[0, 2, 3, 1])?.reshape(&[v, h * w, c])?;
        let t = t.try_add(self.get(&format!("{name}.pos"))?)?.reshape(&[tokens, c])?;
        let q = self.linear(t, &format!("{name}.q"))?;
        let k = self.linear(t, &format!("{name}.k"))?;
        let val = self.linear(t, &format!("{name}.v"))?;
        let d = c / heads;
        let split = |y: Var<'t, T>| -> Result<Var<'t, T>> { y.reshape(&[tokens, heads, d])?.permute(&[1, 0, 2]) };
        let a = scaled_dot_attention(split(q)?, split(k)?, split(val)?)?;
        let a = a.permute(&[1, 0, 2])?.reshape(&[tokens, c])?;
        let o = self.linear(a, &format!("{name}.out"))?;
        let o = o.reshape(&[v, h, w, c])?.permute(&[0, 3, 1, 2])?;
        x.try_add(o)
    }
}

/// `[V, 9, R, R]` views to `[V, 14·K, R', R']` Gaussian features.
pub fn unet_forward<'t, T: Real>(
    params: &BoundParams<'t, T>,
    cfg: &UNetConfig,
    views: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let expect = [cfg.views, cfg.in_channels, cfg.in_res, cfg.in_res];
    if views.shape() != expect {
        return Err(shape_err!("U-Net input must be {expect:?}, got {:?}", views.shape()));
    }
    walk(&mut TapeWalker { params: &params.by_name }, cfg, views)
}
