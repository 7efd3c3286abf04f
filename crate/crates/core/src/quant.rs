//! Simulated low-bitwidth execution.
//!
//! Values are snapped to a symmetric uniform grid with `2^(b-1) - 1` positive
//! levels whose range is the tensor's own max-abs, then kept in `f32`.
//! Gradients pass straight through inside the clipping range.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, DfsError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const FULL_BITS: u32 = 32;
pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 31;

/// One execution choice for a gated block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BitOption {
    Skip,
    Quant(u32),
    Keep,
}

impl BitOption {
    /// Fraction of the full-precision cost: `(b/32)²`, 0 for skip, 1 for keep.
    pub fn rel_cost(self) -> f64 {
        match self {
            BitOption::Skip => 0.0,
            BitOption::Keep => 1.0,
            BitOption::Quant(b) => {
                let r = b as f64 / FULL_BITS as f64;
                r * r
            }
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            BitOption::Quant(b) if !(MIN_BITS..=MAX_BITS).contains(&b) => {
                config_err(format!("bitwidth {b} outside {MIN_BITS}..={MAX_BITS}"))
            }
            _ => Ok(()),
        }
    }

    pub fn label(self) -> String {
        self.to_string()
    }
}

impl fmt::Display for BitOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BitOption::Skip => f.write_str("skip"),
            BitOption::Keep => f.write_str("keep"),
            BitOption::Quant(b) => write!(f, "q{b}"),
        }
    }
}

impl FromStr for BitOption {
    type Err = DfsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skip" => Ok(BitOption::Skip),
            "keep" => Ok(BitOption::Keep),
            _ => {
                let bits = s
                    .strip_prefix('q')
                    .and_then(|b| b.parse::<u32>().ok())
                    .ok_or_else(|| DfsError::Config(format!("unknown option {s:?}")))?;
                let opt = BitOption::Quant(bits);
                opt.validate()?;
                Ok(opt)
            }
        }
    }
}

impl TryFrom<String> for BitOption {
    type Error = DfsError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BitOption> for String {
    fn from(o: BitOption) -> String {
        o.to_string()
    }
}

/// Checks that an option list is sorted by ascending cost, has no
/// duplicates, and contains `Keep` exactly once.
pub fn validate_options(options: &[BitOption]) -> Result<()> {
    for o in options {
        o.validate()?;
    }
    if options.iter().filter(|&&o| o == BitOption::Keep).count() != 1 {
        return config_err("option list must contain keep exactly once");
    }
    if options.windows(2).any(|w| w[0].rel_cost() >= w[1].rel_cost()) {
        return config_err("option list must be strictly ascending in cost");
    }
    Ok(())
}

/// The four-way default: skip, 8 bits, 16 bits, full.
pub fn default_options() -> Vec<BitOption> {
    vec![BitOption::Skip, BitOption::Quant(8), BitOption::Quant(16), BitOption::Keep]
}

fn check_bits(bits: u32) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return config_err(format!("bitwidth {bits} outside {MIN_BITS}..={MAX_BITS}"));
    }
    Ok(())
}

/// Grid step for a range `s`: `s / (2^(bits-1) - 1)`.
pub fn grid_step(max_abs: f64, bits: u32) -> f64 {
    max_abs / ((1u64 << (bits - 1)) - 1) as f64
}

/// Quantize-dequantize `x` with its own max-abs range.
pub fn fake_quantize_slice(x: &[f32], bits: u32) -> Result<Vec<f32>> {
    check_bits(bits)?;
    let s = x.iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
    if s == 0.0 {
        return Ok(x.to_vec());
    }
    let delta = grid_step(s, bits);
    Ok(x
        .iter()
        .map(|&v| {
            let c = (v as f64).clamp(-s, s);
            ((c / delta).round() * delta) as f32
        })
        .collect())
}

pub fn fake_quantize(x: &Tensor, bits: u32) -> Result<Tensor> {
    Tensor::new(x.shape(), fake_quantize_slice(x.data(), bits)?)
}

impl Graph {
    /// Per-tensor fake quantization with a straight-through gradient.
    pub fn fake_quantize(&mut self, x: Var, bits: u32) -> Result<Var> {
        let n = self.value(x).numel();
        self.fake_quantize_chunks(x, bits, n)
    }

    /// Fake quantization where every sample (leading-axis slice) uses its own range.
    pub fn fake_quantize_per_sample(&mut self, x: Var, bits: u32) -> Result<Var> {
        let n = self.shape(x)[0];
        let chunk = self.value(x).numel() / n;
        self.fake_quantize_chunks(x, bits, chunk)
    }

    fn fake_quantize_chunks(&mut self, x: Var, bits: u32, chunk: usize) -> Result<Var> {
        let xd = self.data(x);
        let mut out = Vec::with_capacity(xd.len());
        let mut pass = Vec::with_capacity(xd.len());
        for c in xd.chunks(chunk) {
            let s = c.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            out.extend(fake_quantize_slice(c, bits)?);
            pass.extend(c.iter().map(|v| v.abs() <= s));
        }
        let out = Tensor::new(self.shape(x), out)?;
        Ok(self.record1(
            &[x],
            out,
            Box::new(move |g| {
                let g = g[0].unwrap();
                vec![Some(g.iter().zip(&pass).map(|(&g, &p)| if p { g } else { 0.0 }).collect())]
            }),
        ))
    }
}

/// Convolution at `bits` precision: weights quantized per tensor, input
/// activations quantized per sample.
pub fn quantized_conv(g: &mut Graph, input: Var, weight: Var, bits: u32, stride: usize, pad: usize) -> Result<Var> {
    let wq = g.fake_quantize(weight, bits)?;
    let xq = g.fake_quantize_per_sample(input, bits)?;
    g.conv2d(xq, wq, stride, pad)
}
