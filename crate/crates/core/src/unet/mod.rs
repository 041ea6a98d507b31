//! Asymmetric U-Net with cross-view self-attention.
//!
//! Blocks are indexed down blocks first, then the middle block, then up
//! blocks; `attention_blocks` refers to these indices.

mod arch;
mod params;

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{invalid, Result};

pub use arch::{output_shape, param_specs, unet_forward, Init, ParamSpec};
pub use params::{count_params, unet_init, BoundParams, UNetParams};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_res: usize,
    pub views: usize,
    pub in_channels: usize,
    pub down_channels: Vec<usize>,
    pub mid_channels: usize,
    pub up_channels: Vec<usize>,
    pub attention_blocks: BTreeSet<usize>,
    pub groups: usize,
    /// Residual blocks per down stage; up stages use one more.
    pub layers: usize,
    pub heads: usize,
    /// Gaussians per output pixel.
    pub k: usize,
}

impl UNetConfig {
    /// 6 down, 1 middle and 5 up blocks at 256² input.
    pub fn paper() -> Self {
        Self {
            in_res: 256,
            views: 4,
            in_channels: 9,
            down_channels: vec![64, 128, 256, 512, 1024, 1024],
            mid_channels: 1024,
            up_channels: vec![1024, 1024, 512, 256, 128],
            attention_blocks: (3..=9).collect(),
            groups: 32,
            layers: 2,
            heads: 1,
            k: 1,
        }
    }

    /// The full-size layout without its last up block (64² output).
    pub fn paper_small_output() -> Self {
        let mut c = Self::paper();
        c.up_channels.pop();
        c
    }

    /// Single input view, two Gaussians per pixel.
    pub fn paper_single_view() -> Self {
        Self {
            views: 1,
            k: 2,
            ..Self::paper()
        }
    }

    /// CPU-sized model: 64² input, 32² output.
    pub fn desk() -> Self {
        Self {
            in_res: 64,
            views: 4,
            in_channels: 9,
            down_channels: vec![16, 32, 64],
            mid_channels: 64,
            up_channels: vec![64, 32],
            attention_blocks: [2, 3, 4].into_iter().collect(),
            groups: 8,
            layers: 2,
            heads: 1,
            k: 1,
        }
    }

    /// A single 1×1 convolution from the input to the Gaussian features.
    pub fn linear_head(in_res: usize, views: usize, k: usize) -> Self {
        Self {
            in_res,
            views,
            in_channels: 9,
            down_channels: Vec::new(),
            mid_channels: 0,
            up_channels: Vec::new(),
            attention_blocks: BTreeSet::new(),
            groups: 1,
            layers: 0,
            heads: 1,
            k,
        }
    }

    pub fn is_linear_head(&self) -> bool {
        self.down_channels.is_empty()
    }

    pub fn out_channels(&self) -> usize {
        crate::gaussian::FEATURES_PER_GAUSSIAN * self.k
    }

    pub fn block_count(&self) -> usize {
        if self.is_linear_head() {
            0
        } else {
            self.down_channels.len() + 1 + self.up_channels.len()
        }
    }

    /// Resolution after the down path, where the middle block runs.
    pub fn bottom_res(&self) -> usize {
        self.in_res >> self.down_channels.len().saturating_sub(1)
    }

    pub fn out_res(&self) -> usize {
        if self.is_linear_head() {
            self.in_res
        } else {
            self.bottom_res() << self.up_channels.len().saturating_sub(1)
        }
    }

    /// Spatial resolution at which block `b` runs its residual layers.
    pub fn block_res(&self, b: usize) -> usize {
        let d = self.down_channels.len();
        if b < d {
            self.in_res >> b
        } else if b == d {
            self.bottom_res()
        } else {
            self.bottom_res() << (b - d - 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_res == 0 || self.views == 0 || self.in_channels == 0 || self.k == 0 {
            return Err(invalid!("in_res, views, in_channels and K must be positive"));
        }
        if self.is_linear_head() {
            if !self.up_channels.is_empty() || !self.attention_blocks.is_empty() {
                return Err(invalid!("a linear-head config has no up blocks or attention"));
            }
            return Ok(());
        }
        let d = self.down_channels.len();
        let u = self.up_channels.len();
        if u == 0 || u + 1 > d {
            return Err(invalid!("need 1 <= up blocks <= down blocks - 1, got {d} down and {u} up"));
        }
        if self.in_res % (1 << d) != 0 {
            return Err(invalid!("in_res {} must be divisible by 2^{d}", self.in_res));
        }
        if self.layers == 0 || self.heads == 0 || self.groups == 0 {
            return Err(invalid!("layers, heads and groups must be positive"));
        }
        let chans = self
            .down_channels
            .iter()
            .chain(std::iter::once(&self.mid_channels))
            .chain(&self.up_channels);
        for &c in chans {
            if c == 0 || c % self.groups != 0 {
                return Err(invalid!("channel count {c} is not a positive multiple of {} groups", self.groups));
            }
            if c % self.heads != 0 {
                return Err(invalid!("channel count {c} is not divisible by {} heads", self.heads));
            }
        }
        if let Some(&b) = self.attention_blocks.iter().find(|&&b| b >= self.block_count()) {
            return Err(invalid!("attention block {b} out of range (0..{})", self.block_count()));
        }
        Ok(())
    }
}

impl fmt::Display for UNetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "U-Net {}² x{} views: down {:?} mid {} up {:?} -> {}² x {}",
            self.in_res,
            self.views,
            self.down_channels,
            self.mid_channels,
            self.up_channels,
            self.out_res(),
            self.out_channels()
        )
    }
}
