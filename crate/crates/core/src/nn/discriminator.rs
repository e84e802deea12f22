//! Fully convolutional output-space discriminator.
//!
//! Five 4×4 convolutions with padding 1 and leaky-ReLU between them. The
//! reference design downsamples with stride 2 in every layer; here the
//! third and fourth layers use stride 1 so a 28×28 probability map still
//! produces a 2×2 logit map instead of collapsing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{he_uniform, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Padding, Tensor, Var};

pub const REFERENCE_STRIDES: [usize; 5] = [2, 2, 2, 2, 2];
pub const REFERENCE_CHANNELS: [usize; 5] = [64, 128, 256, 512, 1];

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub channels: [usize; 5],
    pub strides: [usize; 5],
    pub kernel: usize,
    pub padding: usize,
    pub slope: f64,
}

impl DiscriminatorConfig {
    /// Reference channel widths with the modified strides.
    pub fn paper(num_classes: usize) -> Self {
        Self::with_width(num_classes, REFERENCE_CHANNELS[0])
    }

    /// Same topology with every width scaled from `first` (64 in the
    /// reference).
    pub fn with_width(num_classes: usize, first: usize) -> Self {
        Self {
            in_channels: num_classes,
            channels: [first, 2 * first, 4 * first, 8 * first, 1],
            strides: [2, 2, 1, 1, 2],
            kernel: 4,
            padding: 1,
            slope: 0.2,
        }
    }

    /// Spatial size of the logit map for an `h×w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let step = |n: usize, s: usize| -> Result<usize> {
            let padded = n + 2 * self.padding;
            if padded < self.kernel {
                return Err(Error::Shape(format!(
                    "discriminator input {h}x{w} too small for its receptive field"
                )));
            }
            Ok((padded - self.kernel) / s + 1)
        };
        let (mut a, mut b) = (h, w);
        for &s in &self.strides {
            a = step(a, s)?;
            b = step(b, s)?;
        }
        Ok((a, b))
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    params: ParamSet,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if cfg.channels[4] != 1 || cfg.strides.contains(&0) {
            return Err(Error::Config(format!("invalid discriminator {cfg:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut in_c = cfg.in_channels;
        for (i, &out_c) in cfg.channels.iter().enumerate() {
            let fan_in = in_c * cfg.kernel * cfg.kernel;
            params.push(
                format!("disc{i}.w"),
                he_uniform(&mut rng, &[out_c, in_c, cfg.kernel, cfg.kernel], fan_in),
            );
            params.push(format!("disc{i}.b"), Tensor::zeros(&[out_c]));
            in_c = out_c;
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Domain logits `[N, 1, h', w']` for probability maps `[N, L, H, W]`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], s: Var) -> Result<Var> {
        let shape = g.shape(s).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects [N, {}, H, W], got {shape:?}",
                self.cfg.in_channels
            )));
        }
        self.cfg.output_size(shape[2], shape[3])?;
        let mut h = s;
        for (i, &stride) in self.cfg.strides.iter().enumerate() {
            h = g.conv2d(
                h,
                p[2 * i],
                Some(p[2 * i + 1]),
                stride,
                Padding::Explicit(self.cfg.padding),
            )?;
            if i + 1 < self.cfg.strides.len() {
                h = g.leaky_relu(h, self.cfg.slope)?;
            }
        }
        Ok(h)
    }
}
