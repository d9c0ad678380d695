//! DenseNet critic scoring a (conditioning image, candidate image) pair.
//!
//! The pair is stacked into six channels. Each dense block appends
//! `growth_rate` channels per layer (layer norm, leaky ReLU, 3x3 conv) and ends
//! in dropout and is followed by a transition. Transitions halve the channel count with a 1x1 conv and halve
//! the grid with average pooling. The head pools globally and applies a single
//! linear unit with no output squashing.

use crate::error::{Error, Result};
use crate::generator::IMAGE_CHANNELS;
use crate::graph::{concat_channels, Var};
use crate::nn::{self, Ctx};
use crate::params::{Bound, ParameterStore};
use crate::rng::RngHandle;
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq)]
pub struct CriticConfig {
    pub input_size: usize,
    pub growth_rate: usize,
    pub num_dense_blocks: usize,
    pub layers_per_block: usize,
    pub dropout_rate: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            input_size: 64,
            growth_rate: 64,
            num_dense_blocks: 4,
            layers_per_block: 4,
            dropout_rate: 0.25,
        }
    }
}

/// Channel bookkeeping for one dense block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channels after the transition that follows the block.
    pub transition_channels: usize,
    pub spatial: usize,
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.growth_rate == 0 || self.num_dense_blocks == 0 || self.layers_per_block == 0 {
            problems.push("growth rate, block and layer counts must be positive".to_string());
        }
        match 1usize.checked_shl(self.num_dense_blocks as u32) {
            Some(s) if self.input_size > 0 && self.input_size.is_multiple_of(s) => {}
            _ => problems.push(format!(
                "input_size {} is not divisible by 2^{}",
                self.input_size, self.num_dense_blocks
            )),
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn blocks(&self) -> Vec<DenseBlock> {
        let mut c = 2 * IMAGE_CHANNELS;
        let mut spatial = self.input_size;
        (0..self.num_dense_blocks)
            .map(|_| {
                let out = c + self.layers_per_block * self.growth_rate;
                let block = DenseBlock {
                    in_channels: c,
                    out_channels: out,
                    transition_channels: out / 2,
                    spatial,
                };
                c = out / 2;
                spatial /= 2;
                block
            })
            .collect()
    }

    pub fn head_channels(&self) -> usize {
        self.blocks()
            .last()
            .map_or(2 * IMAGE_CHANNELS, |b| b.transition_channels)
    }
}

#[derive(Clone, Debug)]
pub struct Critic {
    pub config: CriticConfig,
}

impl Critic {
    pub fn new(config: CriticConfig) -> Result<Self> {
        config.validate()?;
        Ok(Critic { config })
    }

    pub fn init_params<T: Float>(&self, rng: &mut RngHandle) -> ParameterStore<T> {
        let cfg = &self.config;
        let mut s = ParameterStore::new();
        for (b, block) in cfg.blocks().iter().enumerate() {
            let mut c = block.in_channels;
            for l in 0..cfg.layers_per_block {
                nn::init_norm(&mut s, &format!("dense{b}.layer{l}.norm"), c, false);
                nn::init_conv(&mut s, &format!("dense{b}.layer{l}.conv"), cfg.growth_rate, c, 3, rng);
                c += cfg.growth_rate;
            }
            nn::init_norm(&mut s, &format!("trans{b}.norm"), c, false);
            nn::init_conv(&mut s, &format!("trans{b}.conv"), block.transition_channels, c, 1, rng);
        }
        let c = cfg.head_channels();
        nn::init_norm(&mut s, "head.norm", c, false);
        nn::init_linear(&mut s, "head.linear", c, 1, rng);
        s
    }

    /// Scores for a batch of pairs: `x_i, x [N, 3, S, S] -> [N]`.
    pub fn score<'g, T: Float>(
        &self,
        x_i: Var<'g, T>,
        x: Var<'g, T>,
        p: &Bound<'g, '_, T>,
        ctx: &mut Ctx<T>,
    ) -> Result<Var<'g, T>> {
        let size = self.config.input_size;
        let expected = |s: &[usize]| s.len() == 4 && s[1] == IMAGE_CHANNELS && s[2] == size && s[3] == size;
        let (a, b) = (x_i.shape(), x.shape());
        if !expected(&a) || a != b {
            return Err(Error::shape(
                "critic",
                format!("conditioning {a:?}, candidate {b:?}, extent {size}"),
            ));
        }
        let n = a[0];
        let mut h = concat_channels(&[x_i, x]);
        let cfg = &self.config;
        for bi in 0..cfg.num_dense_blocks {
            for l in 0..cfg.layers_per_block {
                let name = format!("dense{bi}.layer{l}");
                let y = nn::layer_norm(h, &p.layer(&format!("{name}.norm")))?;
                let y = nn::conv2d(nn::leaky_relu(y), &p.layer(&format!("{name}.conv")), 1)?;
                h = concat_channels(&[h, y]);
            }
            h = nn::dropout(h, cfg.dropout_rate, ctx)?;
            let y = nn::layer_norm(h, &p.layer(&format!("trans{bi}.norm")))?;
            let y = nn::conv2d(nn::leaky_relu(y), &p.layer(&format!("trans{bi}.conv")), 1)?;
            h = y.avg_pool2();
        }
        let h = nn::leaky_relu(nn::layer_norm(h, &p.layer("head.norm"))?);
        let pooled = h.global_avg_pool();
        Ok(nn::linear(pooled, &p.layer("head.linear"))?.reshape(&[n]))
    }
}
