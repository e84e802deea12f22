//! Reduced-depth U-Net for 2D slice segmentation.
//!
//! Each encoder level is two 3×3 convolutions with ReLU followed by a 2×2
//! max-pool; the decoder mirrors it with 2×2 stride-2 transposed
//! convolutions and skip concatenation. A final 1×1 convolution and a
//! per-pixel softmax produce class probabilities. No dropout, no batch
//! normalisation.
//!
//! In [`PaddingMode::PaperValid`] the convolutions are unpadded and skips are
//! center-cropped, so a 120×120 input bottoms out at 11×11 and yields a
//! 28×28 prediction. In [`PaddingMode::Same`] every convolution preserves
//! its input size and the output grid equals the input grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{he_uniform, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Padding, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaddingMode {
    PaperValid,
    Same,
}

impl PaddingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper_valid" | "valid" => Ok(Self::PaperValid),
            "same" => Ok(Self::Same),
            other => Err(Error::Config(format!("unknown padding mode '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::PaperValid => "paper_valid",
            Self::Same => "same",
        }
    }

    fn conv_padding(self) -> Padding {
        match self {
            Self::PaperValid => Padding::Valid,
            Self::Same => Padding::Same,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Number of max-pool operations.
    pub depth: usize,
    pub base_filters: usize,
    pub padding_mode: PaddingMode,
    pub input_size: (usize, usize),
}

impl UNetConfig {
    /// Three pools, unpadded convolutions, 120×120 input.
    pub fn paper(num_classes: usize, base_filters: usize) -> Self {
        Self {
            in_channels: 1,
            num_classes,
            depth: 3,
            base_filters,
            padding_mode: PaddingMode::PaperValid,
            input_size: (120, 120),
        }
    }

    /// Same-padded variant used for desk-scale experiments.
    pub fn desk(num_classes: usize, base_filters: usize, size: usize) -> Self {
        Self {
            in_channels: 1,
            num_classes,
            depth: 3,
            base_filters,
            padding_mode: PaddingMode::Same,
            input_size: (size, size),
        }
    }

    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Walks the spatial sizes through the network without running it.
    pub fn shape_walk(&self) -> Result<ShapeWalk> {
        if self.in_channels == 0 || self.num_classes < 2 || self.base_filters == 0 || self.depth == 0 {
            return Err(Error::Config(format!("degenerate U-Net configuration {self:?}")));
        }
        let (h, w) = self.input_size;
        let rows = walk_side(h, self.depth, self.padding_mode)?;
        let cols = walk_side(w, self.depth, self.padding_mode)?;
        let bottleneck_index = 2 * self.depth - 1;
        Ok(ShapeWalk {
            bottleneck: (rows[bottleneck_index], cols[bottleneck_index]),
            output: (*rows.last().expect("walk"), *cols.last().expect("walk")),
            rows,
            cols,
        })
    }
}

/// Spatial sizes after each double convolution, pool and up-convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeWalk {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub bottleneck: (usize, usize),
    pub output: (usize, usize),
}

fn walk_side(input: usize, depth: usize, mode: PaddingMode) -> Result<Vec<usize>> {
    let shrink = match mode {
        PaddingMode::PaperValid => 4,
        PaddingMode::Same => 0,
    };
    let double_conv = |n: usize| -> Result<usize> {
        if n <= shrink {
            return Err(Error::Config(format!(
                "shape walk reaches a non-positive size from input {input}"
            )));
        }
        Ok(n - shrink)
    };
    let mut seq = Vec::new();
    let mut skips = Vec::new();
    let mut n = input;
    for _ in 0..depth {
        n = double_conv(n)?;
        skips.push(n);
        seq.push(n);
        if n < 2 {
            return Err(Error::Config(format!("cannot pool size {n} (input {input})")));
        }
        if mode == PaddingMode::Same && n % 2 != 0 {
            return Err(Error::Config(format!(
                "same-padding input {input} must be divisible by 2^{depth}"
            )));
        }
        n /= 2;
        seq.push(n);
    }
    n = double_conv(n)?;
    seq.push(n);
    for skip in skips.iter().rev() {
        n *= 2;
        if n > *skip {
            return Err(Error::Config(format!(
                "upsampled size {n} exceeds skip size {skip} (input {input})"
            )));
        }
        seq.push(n);
        n = double_conv(n)?;
        seq.push(n);
    }
    Ok(seq)
}

#[derive(Clone, Copy, Debug)]
struct ConvIdx {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Level {
    conv1: ConvIdx,
    conv2: ConvIdx,
}

#[derive(Clone, Debug)]
struct UpLevel {
    up: ConvIdx,
    conv1: ConvIdx,
    conv2: ConvIdx,
}

/// U-Net parameters plus the layer layout needed to run them.
#[derive(Clone, Debug)]
pub struct UNet {
    cfg: UNetConfig,
    walk: ShapeWalk,
    params: ParamSet,
    encoder: Vec<Level>,
    middle: Level,
    decoder: Vec<UpLevel>,
    head: ConvIdx,
}

fn conv_param(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
) -> ConvIdx {
    let w = params.push(
        format!("{name}.w"),
        he_uniform(rng, &[out_c, in_c, k, k], in_c * k * k),
    );
    let b = params.push(format!("{name}.b"), Tensor::zeros(&[out_c]));
    ConvIdx { w, b }
}

impl UNet {
    /// Builds a network with He-uniform weights and zero biases drawn from
    /// `seed`.
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        let walk = cfg.shape_walk()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut encoder = Vec::with_capacity(cfg.depth);
        let mut in_c = cfg.in_channels;
        for l in 0..cfg.depth {
            let f = cfg.filters(l);
            encoder.push(Level {
                conv1: conv_param(&mut params, &mut rng, &format!("enc{l}.conv1"), f, in_c, 3),
                conv2: conv_param(&mut params, &mut rng, &format!("enc{l}.conv2"), f, f, 3),
            });
            in_c = f;
        }
        let fm = cfg.filters(cfg.depth);
        let middle = Level {
            conv1: conv_param(&mut params, &mut rng, "mid.conv1", fm, in_c, 3),
            conv2: conv_param(&mut params, &mut rng, "mid.conv2", fm, fm, 3),
        };
        let mut decoder = Vec::with_capacity(cfg.depth);
        let mut in_c = fm;
        for l in (0..cfg.depth).rev() {
            let f = cfg.filters(l);
            let up_w = params.push(
                format!("dec{l}.up.w"),
                he_uniform(&mut rng, &[in_c, f, 2, 2], f * 4),
            );
            let up_b = params.push(format!("dec{l}.up.b"), Tensor::zeros(&[f]));
            decoder.push(UpLevel {
                up: ConvIdx { w: up_w, b: up_b },
                conv1: conv_param(&mut params, &mut rng, &format!("dec{l}.conv1"), f, 2 * f, 3),
                conv2: conv_param(&mut params, &mut rng, &format!("dec{l}.conv2"), f, f, 3),
            });
            in_c = f;
        }
        let head = conv_param(&mut params, &mut rng, "head", cfg.num_classes, in_c, 1);
        Ok(Self {
            cfg,
            walk,
            params,
            encoder,
            middle,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn shape_walk(&self) -> &ShapeWalk {
        &self.walk
    }

    /// Spatial size of the prediction grid.
    pub fn output_size(&self) -> (usize, usize) {
        self.walk.output
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn conv_relu(&self, g: &mut Graph, p: &[Var], x: Var, c: ConvIdx) -> Result<Var> {
        let y = g.conv2d(x, p[c.w], Some(p[c.b]), 1, self.cfg.padding_mode.conv_padding())?;
        g.relu(y)
    }

    fn double_conv(&self, g: &mut Graph, p: &[Var], x: Var, level: &Level) -> Result<Var> {
        let y = self.conv_relu(g, p, x, level.conv1)?;
        self.conv_relu(g, p, y, level.conv2)
    }

    /// Pre-softmax class scores `[N, L, out_h, out_w]`. `p` comes from
    /// binding [`UNet::params`] on `g`.
    pub fn logits(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4
            || shape[1] != self.cfg.in_channels
            || (shape[2], shape[3]) != self.cfg.input_size
        {
            return Err(Error::Shape(format!(
                "U-Net expects [N, {}, {}, {}], got {shape:?}",
                self.cfg.in_channels, self.cfg.input_size.0, self.cfg.input_size.1
            )));
        }
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = x;
        for level in &self.encoder {
            h = self.double_conv(g, p, h, level)?;
            skips.push(h);
            h = g.maxpool2d(h)?;
        }
        h = self.double_conv(g, p, h, &self.middle)?;
        for (up, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            h = g.transposed_conv2d(h, p[up.up.w], Some(p[up.up.b]))?;
            let (uh, uw) = (g.shape(h)[2], g.shape(h)[3]);
            let s = match self.cfg.padding_mode {
                PaddingMode::PaperValid => g.crop_center(*skip, uh, uw)?,
                PaddingMode::Same => *skip,
            };
            h = g.concat(s, h, 1)?;
            h = self.conv_relu(g, p, h, up.conv1)?;
            h = self.conv_relu(g, p, h, up.conv2)?;
        }
        g.conv2d(h, p[self.head.w], Some(p[self.head.b]), 1, Padding::Valid)
    }

    /// Per-pixel class probabilities `[N, L, out_h, out_w]`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let z = self.logits(g, p, x)?;
        g.softmax(z, 1)
    }

    /// Inference on a batch `[N, C, H, W]` without gradient tracking.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let y = self.forward(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_shape_walk_is_exact() {
        let walk = UNetConfig::paper(4, 4).shape_walk().unwrap();
        let expected = vec![116, 58, 54, 27, 23, 11, 7, 14, 10, 20, 16, 32, 28];
        assert_eq!(walk.rows, expected);
        assert_eq!(walk.cols, expected);
        assert_eq!(walk.bottleneck, (11, 11));
        assert_eq!(walk.output, (28, 28));
    }

    #[test]
    fn valid_walk_degenerates_on_small_inputs() {
        let mut cfg = UNetConfig::paper(4, 4);
        cfg.input_size = (40, 40);
        assert!(matches!(cfg.shape_walk(), Err(Error::Config(_))));
    }

    #[test]
    fn same_walk_requires_divisibility() {
        let cfg = UNetConfig::desk(4, 4, 64);
        assert_eq!(cfg.shape_walk().unwrap().output, (64, 64));
        assert_eq!(cfg.shape_walk().unwrap().bottleneck, (8, 8));
        let cfg = UNetConfig::desk(4, 4, 60);
        assert!(cfg.shape_walk().is_err());
    }

    #[test]
    fn no_dropout_or_normalisation_parameters() {
        let net = UNet::new(UNetConfig::desk(3, 2, 16), 0).unwrap();
        assert!(net
            .params()
            .names()
            .iter()
            .all(|n| n.ends_with(".w") || n.ends_with(".b")));
        // 3 encoder levels + middle + 3 decoder levels (2 convs + up) + head
        assert_eq!(net.params().len(), 2 * (3 * 2 + 2 + 3 * 3 + 1));
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let net = UNet::new(UNetConfig::desk(3, 2, 16), 0).unwrap();
        assert!(net.predict(&Tensor::zeros(&[1, 1, 8, 8])).is_err());
    }
}
