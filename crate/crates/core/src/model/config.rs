use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of a densely connected network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNetConfig {
    /// Channels appended by every dense layer.
    pub growth_rate: usize,
    /// Dense layers per block.
    pub block_layout: Vec<usize>,
    /// Insert a 1×1 convolution of width `4 * growth_rate` before each 3×3.
    pub bottleneck: bool,
    /// Fraction of channels kept by each transition.
    pub compression: f64,
    pub stem_channels: usize,
    pub num_classes: usize,
    /// Input (height, width, channels).
    pub input_resolution: (usize, usize, usize),
}

/// Channel bookkeeping for one dense block and the transition after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPlan {
    pub layers: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Output width of the following transition, absent after the last block.
    pub transition_out: Option<usize>,
}

impl DenseNetConfig {
    /// DenseNet-BC-201: k=32, blocks [6, 12, 48, 32], θ=0.5, 64-channel stem.
    pub fn densenet201(num_classes: usize) -> Self {
        Self {
            growth_rate: 32,
            block_layout: vec![6, 12, 48, 32],
            bottleneck: true,
            compression: 0.5,
            stem_channels: 64,
            num_classes,
            input_resolution: (256, 256, 3),
        }
    }

    /// Desk-scale variant used for tests and synthetic runs.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            growth_rate: 8,
            block_layout: vec![2, 2],
            bottleneck: true,
            compression: 0.5,
            stem_channels: 16,
            num_classes,
            input_resolution: (32, 32, 3),
        }
    }

    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "densenet201" => Ok(Self::densenet201(num_classes)),
            "tiny" => Ok(Self::tiny(num_classes)),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected `densenet201` or `tiny`)"
            ))),
        }
    }

    pub fn with_resolution(mut self, height: usize, width: usize) -> Self {
        self.input_resolution.0 = height;
        self.input_resolution.1 = width;
        self
    }

    pub fn bottleneck_width(&self) -> usize {
        4 * self.growth_rate
    }

    /// Spatial downsampling factor between the input and the first block.
    pub const STEM_STRIDE: usize = 4;

    /// Compressed width of a transition fed with `channels` channels.
    pub fn compressed(&self, channels: usize) -> usize {
        (self.compression * channels as f64 + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_layout.is_empty() {
            return Err(Error::Config("block layout is empty".into()));
        }
        if self.block_layout.contains(&0) {
            return Err(Error::Config("every block needs at least one layer".into()));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config(format!(
                "compression must lie in (0, 1], got {}",
                self.compression
            )));
        }
        if self.growth_rate == 0 || self.stem_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "growth rate, stem channels and class count must be positive".into(),
            ));
        }
        let (h, w, c) = self.input_resolution;
        if c == 0 {
            return Err(Error::Config("input needs at least one channel".into()));
        }
        let factor = Self::STEM_STRIDE << (self.block_layout.len() - 1);
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!(
                "input {h}×{w} must be a positive multiple of {factor} for this layout"
            )));
        }
        for plan in self.plan() {
            if plan.transition_out == Some(0) {
                return Err(Error::Config(format!(
                    "compression {} leaves no channels after a block of width {}",
                    self.compression, plan.out_channels
                )));
            }
        }
        Ok(())
    }

    /// Width of every block, following the floor-compression recurrence.
    pub fn plan(&self) -> Vec<BlockPlan> {
        let mut channels = self.stem_channels;
        let last = self.block_layout.len().saturating_sub(1);
        self.block_layout
            .iter()
            .enumerate()
            .map(|(b, &layers)| {
                let out = channels + layers * self.growth_rate;
                let transition_out = (b < last).then(|| self.compressed(out));
                let plan = BlockPlan {
                    layers,
                    in_channels: channels,
                    out_channels: out,
                    transition_out,
                };
                channels = transition_out.unwrap_or(out);
                plan
            })
            .collect()
    }

    /// Width of the pooled feature vector fed to the classification head.
    pub fn feature_width(&self) -> usize {
        self.plan().last().map_or(self.stem_channels, |p| p.out_channels)
    }

    /// Spatial size of the final block's feature maps.
    pub fn final_spatial(&self) -> (usize, usize) {
        let factor = Self::STEM_STRIDE << self.block_layout.len().saturating_sub(1);
        (
            self.input_resolution.0 / factor,
            self.input_resolution.1 / factor,
        )
    }
}
