//! Recurrent gating network.
//!
//! One LSTM is shared by all gated blocks. For each block it reads the
//! channel-wise average of the block's input, embedded to the hidden width by
//! a per-stage linear map (stages differ in channel count), and emits a
//! probability vector over the block's legal execution options.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ResidualBlock};
use crate::error::{config_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::quant::{default_options, validate_options, BitOption};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub hidden: usize,
    pub options: Vec<BitOption>,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            hidden: 10,
            options: default_options(),
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return config_err("gate.hidden must be positive");
        }
        validate_options(&self.options)
    }
}

/// Per-input recurrent state; zero at the start of every forward pass.
#[derive(Clone, Copy, Debug)]
pub struct GateState {
    pub h: Var,
    pub c: Var,
}

impl GateState {
    pub fn zeros(g: &mut Graph, batch: usize, hidden: usize) -> Self {
        Self {
            h: g.constant(Tensor::zeros(&[batch, hidden])),
            c: g.constant(Tensor::zeros(&[batch, hidden])),
        }
    }
}

/// Probability vector of one input at one block.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionVector {
    pub probs: Vec<f32>,
    pub options: Vec<BitOption>,
}

impl DecisionVector {
    /// Index of the largest entry; ties go to the cheapest option.
    pub fn argmax(&self) -> usize {
        argmax_lowest_cost(&self.probs)
    }

    pub fn chosen(&self) -> BitOption {
        self.options[self.argmax()]
    }

    pub fn is_simplex(&self, tol: f32) -> bool {
        let s: f32 = self.probs.iter().sum();
        self.probs.iter().all(|&p| p >= 0.0) && (s - 1.0).abs() <= tol
    }
}

/// First index of the maximum. Options are sorted by ascending cost, so this
/// breaks ties toward the cheaper option.
pub fn argmax_lowest_cost(probs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct Gate {
    pub config: GateConfig,
    /// `(weight [H, C_s], bias [H])` per backbone stage.
    pub embeds: Vec<(ParamId, ParamId)>,
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
}

pub const PREFIX: &str = "gate.";

impl Gate {
    pub fn new<R: Rng + ?Sized>(config: GateConfig, backbone: &Backbone, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let hd = config.hidden;
        let n = config.options.len();
        let hb = 1.0 / (hd as f32).sqrt();
        let embeds = backbone
            .config
            .channels
            .iter()
            .enumerate()
            .map(|(s, &c)| {
                let b = 1.0 / (c as f32).sqrt();
                (
                    store.add_param(format!("gate.embed.{s}.weight"), Tensor::uniform(&[hd, c], b, rng)),
                    store.add_param(format!("gate.embed.{s}.bias"), Tensor::uniform(&[hd], b, rng)),
                )
            })
            .collect();
        Ok(Self {
            embeds,
            w_ih: store.add_param("gate.lstm.w_ih", Tensor::uniform(&[4 * hd, hd], hb, rng)),
            w_hh: store.add_param("gate.lstm.w_hh", Tensor::uniform(&[4 * hd, hd], hb, rng)),
            bias: store.add_param("gate.lstm.bias", Tensor::uniform(&[4 * hd], hb, rng)),
            out_weight: store.add_param("gate.out.weight", Tensor::uniform(&[n, hd], hb, rng)),
            out_bias: store.add_param("gate.out.bias", Tensor::zeros(&[n])),
            config,
        })
    }

    /// Stage whose channel width the block's input carries.
    fn feature_stage(block: &ResidualBlock, n_per_group: usize) -> usize {
        if block.stage > 0 && block.index % n_per_group == 0 {
            block.stage - 1
        } else {
            block.stage
        }
    }

    /// One recurrent step: pool → embed → LSTM → logits → softmax over the
    /// block's legal options. Returns `[N, legal.len()]` probabilities.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        backbone: &Backbone,
        block: usize,
        features: Var,
        state: GateState,
    ) -> Result<(Var, GateState, Vec<BitOption>)> {
        let blk = &backbone.blocks[block];
        let stage = Self::feature_stage(blk, backbone.config.n_per_group);
        let pooled = g.global_avg_pool(features)?;
        let (ew, eb) = self.embeds[stage];
        let (ew, eb) = (g.param(store, ew), g.param(store, eb));
        let emb = g.affine(pooled, ew, eb)?;
        let (w_ih, w_hh, bias) = (g.param(store, self.w_ih), g.param(store, self.w_hh), g.param(store, self.bias));
        let (h, c) = g.lstm_cell(emb, state.h, state.c, w_ih, w_hh, bias)?;
        let (ow, ob) = (g.param(store, self.out_weight), g.param(store, self.out_bias));
        let mut logits = g.affine(h, ow, ob)?;
        let legal = backbone.options_for(block, &self.config.options);
        let n = self.config.options.len();
        if legal.len() < n {
            logits = g.slice_cols(logits, n - legal.len(), n)?;
        }
        let probs = g.softmax(logits);
        Ok((probs, GateState { h, c }, legal))
    }
}

/// FLOPs of one gate step on a `channels × size × size` input with `options`
/// outputs: pooling adds plus two multiply-add-counted FLOPs per MAC of the
/// embedding, the LSTM input/recurrent products and the output projection.
pub fn gate_flops(config: &GateConfig, channels: usize, size: usize) -> Result<u64> {
    config.validate()?;
    let (c, s, h, n) = (channels as u64, size as u64, config.hidden as u64, config.options.len() as u64);
    let pool = c * s * s;
    let embed = 2 * c * h;
    let lstm = 2 * 4 * h * (h + h);
    let out = 2 * h * n;
    Ok(pool + embed + lstm + out)
}
