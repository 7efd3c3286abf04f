//! ResNet-style CIFAR backbone: a 3×3 stem, three groups of basic residual
//! blocks at widths `channels[0..3]`, global average pooling and a linear
//! classifier. Blocks are routed individually through skip / quantized /
//! full-precision execution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, DfsError, Result};
use crate::graph::{Graph, Var};
use crate::ops::BnMode;
use crate::params::{ParamId, ParamStore};
use crate::quant::{quantized_conv, BitOption};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Residual blocks per group; the depth is `6·n + 2`.
    pub n_per_group: usize,
    pub channels: [usize; 3],
    pub num_classes: usize,
    /// Leading blocks that always run at full precision and are not gated.
    pub always_full_prefix: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub bn_momentum: f32,
    pub bn_eps: f32,
    /// Whether projection shortcuts are also quantized on quantized branches.
    pub quantize_projection: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_per_group: 6,
            channels: [16, 32, 64],
            num_classes: 10,
            always_full_prefix: 1,
            in_channels: 3,
            image_size: 32,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            quantize_projection: false,
        }
    }
}

impl BackboneConfig {
    pub fn num_blocks(&self) -> usize {
        3 * self.n_per_group
    }

    pub fn num_gated(&self) -> usize {
        self.num_blocks().saturating_sub(self.always_full_prefix)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_group == 0 {
            return config_err("backbone.n_per_group must be positive");
        }
        if self.always_full_prefix >= self.num_blocks() {
            return config_err(format!(
                "backbone.always_full_prefix {} leaves no gated block out of {}",
                self.always_full_prefix,
                self.num_blocks()
            ));
        }
        if self.channels.contains(&0) || self.in_channels == 0 || self.num_classes == 0 {
            return config_err("backbone channel and class counts must be positive");
        }
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return config_err("backbone.image_size must be a positive multiple of 4");
        }
        if !(self.bn_eps > 0.0) {
            return config_err("backbone.bn_eps must be positive");
        }
        Ok(())
    }
}

/// A bias-free convolution followed by batch normalization.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (c_in * kernel * kernel) as f32).sqrt();
        Self {
            weight: store.add_param(
                format!("{prefix}.weight"),
                Tensor::randn(&[c_out, c_in, kernel, kernel], std, rng),
            ),
            gamma: store.add_param(format!("{prefix}.bn.gamma"), Tensor::full(&[c_out], 1.0)),
            beta: store.add_param(format!("{prefix}.bn.beta"), Tensor::zeros(&[c_out])),
            running_mean: store.add_buffer(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[c_out])),
            running_var: store.add_buffer(format!("{prefix}.bn.running_var"), Tensor::full(&[c_out], 1.0)),
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        }
    }

    /// `bn(conv(x))`, with the convolution at `bits` precision when given.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: Var,
        bits: Option<u32>,
        mode: BnMode,
        cfg: &BackboneConfig,
    ) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = match bits {
            Some(b) => quantized_conv(g, x, w, b, self.stride, self.pad)?,
            None => g.conv2d(x, w, self.stride, self.pad)?,
        };
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let (rm, rv) = store.pair_mut(self.running_mean, self.running_var);
        g.batchnorm2d(y, gamma, beta, rm, rv, mode, cfg.bn_momentum, cfg.bn_eps)
    }
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub index: usize,
    pub stage: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Spatial extent of the block input.
    pub in_size: usize,
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    /// 1×1 strided projection shortcut for blocks that change shape.
    pub projection: Option<ConvBn>,
}

impl ResidualBlock {
    pub fn has_identity_shortcut(&self) -> bool {
        self.projection.is_none()
    }

    pub fn out_size(&self) -> usize {
        self.in_size / self.stride
    }

    /// Routes one block. `Skip` returns the input itself.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: Var,
        option: BitOption,
        mode: BnMode,
        cfg: &BackboneConfig,
    ) -> Result<Var> {
        let bits = match option {
            BitOption::Skip => {
                if !self.has_identity_shortcut() {
                    return Err(DfsError::Routing(format!(
                        "block {} has a projection shortcut and cannot be skipped",
                        self.index
                    )));
                }
                return Ok(x);
            }
            BitOption::Keep => None,
            BitOption::Quant(b) => Some(b),
        };
        let h = self.conv1.forward(g, store, x, bits, mode, cfg)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h, bits, mode, cfg)?;
        let shortcut = match &self.projection {
            Some(p) => {
                let pb = if cfg.quantize_projection { bits } else { None };
                p.forward(g, store, x, pb, mode, cfg)?
            }
            None => x,
        };
        let sum = g.add(h, shortcut)?;
        Ok(g.relu(sum))
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: ConvBn,
    pub blocks: Vec<ResidualBlock>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

pub const PREFIX: &str = "backbone.";

impl Backbone {
    /// Registers every parameter under `backbone.` with He-normal conv
    /// initialization, unit/zero batch-norm affine parameters and an
    /// N(0, 0.01²) classifier.
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let stem = ConvBn::register(store, "backbone.stem", config.in_channels, c[0], 3, 1, 1, rng);
        let mut blocks = Vec::with_capacity(config.num_blocks());
        let mut in_ch = c[0];
        let mut size = config.image_size;
        for stage in 0..3 {
            for j in 0..config.n_per_group {
                let index = blocks.len();
                let out_ch = c[stage];
                let stride = if stage > 0 && j == 0 { 2 } else { 1 };
                let p = format!("backbone.blocks.{index}");
                let conv1 = ConvBn::register(store, &format!("{p}.conv1"), in_ch, out_ch, 3, stride, 1, rng);
                let conv2 = ConvBn::register(store, &format!("{p}.conv2"), out_ch, out_ch, 3, 1, 1, rng);
                let projection = (stride != 1 || in_ch != out_ch)
                    .then(|| ConvBn::register(store, &format!("{p}.proj"), in_ch, out_ch, 1, stride, 0, rng));
                blocks.push(ResidualBlock {
                    index,
                    stage,
                    in_channels: in_ch,
                    out_channels: out_ch,
                    stride,
                    in_size: size,
                    conv1,
                    conv2,
                    projection,
                });
                in_ch = out_ch;
                size /= stride;
            }
        }
        // Small classifier weights: an untrained net predicts near-uniformly.
        let head_weight = store.add_param(
            "backbone.head.weight",
            Tensor::randn(&[config.num_classes, c[2]], 0.01, rng),
        );
        let head_bias = store.add_param("backbone.head.bias", Tensor::zeros(&[config.num_classes]));
        Ok(Self {
            config,
            stem,
            blocks,
            head_weight,
            head_bias,
        })
    }

    pub fn is_gated(&self, block: usize) -> bool {
        block >= self.config.always_full_prefix
    }

    /// Legal options for a block: projection blocks cannot skip.
    pub fn options_for(&self, block: usize, options: &[BitOption]) -> Vec<BitOption> {
        if self.blocks[block].has_identity_shortcut() {
            options.to_vec()
        } else {
            options.iter().copied().filter(|&o| o != BitOption::Skip).collect()
        }
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        let s = self.config.image_size;
        [batch, self.config.in_channels, s, s]
    }

    pub fn stem_forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, mode: BnMode) -> Result<Var> {
        let n = g.shape(x)[0];
        if g.shape(x) != self.input_shape(n) {
            return shape_err("stem_forward", g.shape(x), &self.input_shape(n));
        }
        let h = self.stem.forward(g, store, x, None, mode, &self.config)?;
        Ok(g.relu(h))
    }

    pub fn block_forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        block: usize,
        x: Var,
        option: BitOption,
        mode: BnMode,
    ) -> Result<Var> {
        self.blocks[block].forward(g, store, x, option, mode, &self.config)
    }

    pub fn head_forward(&self, g: &mut Graph, store: &mut ParamStore, features: Var) -> Result<Var> {
        let n = g.shape(features)[0];
        let s = self.config.image_size / 4;
        let expect = [n, self.config.channels[2], s, s];
        if g.shape(features) != expect {
            return shape_err("head_forward", g.shape(features), &expect);
        }
        let pooled = g.global_avg_pool(features)?;
        let w = g.param(store, self.head_weight);
        let b = g.param(store, self.head_bias);
        g.affine(pooled, w, b)
    }

    /// Gate-free forward with every block at full precision.
    pub fn forward_plain(&self, g: &mut Graph, store: &mut ParamStore, x: Var, mode: BnMode) -> Result<Var> {
        let mut h = self.stem_forward(g, store, x, mode)?;
        for i in 0..self.blocks.len() {
            h = self.block_forward(g, store, i, h, BitOption::Keep, mode)?;
        }
        self.head_forward(g, store, h)
    }
}
