//! Gated execution of the backbone.
//!
//! Soft mode mixes every legal branch of a block weighted by the gate's
//! probabilities, `F_i = Σ_k p_k · C_i^{b_k}(F_{i-1}) + p_skip · F_{i-1}`, and
//! carries a differentiable expected computation percentage. Hard mode runs
//! only the most probable option per input.

use std::io::{BufRead, Write};

use crate::backbone::{Backbone, ResidualBlock};
use crate::data::Dataset;
use crate::error::{config_err, DfsError, Result};
use crate::gate::{argmax_lowest_cost, GateState};
use crate::graph::{Graph, Var};
use crate::model::DfsModel;
use crate::ops::{conv_geom, BnMode};
use crate::quant::BitOption;
use crate::tensor::Tensor;

/// FLOPs of one convolution, counting a multiply-add as two.
pub fn conv_flops(c_in: usize, c_out: usize, kernel: usize, h_out: usize, w_out: usize) -> u64 {
    2 * (kernel * kernel * c_in * c_out * h_out * w_out) as u64
}

/// Full-precision FLOPs of a residual block on a `[C, H, W]` input:
/// both 3×3 convolutions plus the projection if present. Batch norm and
/// activations are not counted.
pub fn count_block_flops(block: &ResidualBlock, input_shape: [usize; 3]) -> Result<u64> {
    let [c, h, w] = input_shape;
    if c != block.in_channels {
        return Err(DfsError::Shape {
            op: "count_block_flops",
            lhs: input_shape.to_vec(),
            rhs: vec![block.in_channels],
        });
    }
    let g1 = conv_geom(c, h, w, block.conv1.kernel, block.conv1.kernel, block.conv1.stride, block.conv1.pad)?;
    let mut total = conv_flops(c, block.out_channels, block.conv1.kernel, g1.h_out, g1.w_out);
    let g2 = conv_geom(block.out_channels, g1.h_out, g1.w_out, 3, 3, block.conv2.stride, block.conv2.pad)?;
    total += conv_flops(block.out_channels, block.out_channels, block.conv2.kernel, g2.h_out, g2.w_out);
    if let Some(p) = &block.projection {
        let gp = conv_geom(c, h, w, p.kernel, p.kernel, p.stride, p.pad)?;
        total += conv_flops(c, block.out_channels, p.kernel, gp.h_out, gp.w_out);
    }
    Ok(total)
}

/// Static FLOP bookkeeping for computation-percentage (cp) accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsLedger {
    /// Block indices that carry a gate, in execution order.
    pub gated_blocks: Vec<usize>,
    /// Full-precision FLOPs of each gated block (parallel to `gated_blocks`).
    pub per_block_full_flops: Vec<u64>,
    /// Stem convolution, classifier and always-full blocks.
    pub fixed_flops: u64,
    pub denominator: u64,
}

impl FlopsLedger {
    pub fn new(bb: &Backbone) -> Self {
        let cfg = &bb.config;
        let s = cfg.image_size;
        let stem = conv_flops(cfg.in_channels, cfg.channels[0], 3, s, s);
        let head = 2 * (cfg.channels[2] * cfg.num_classes) as u64;
        let mut fixed = stem + head;
        let mut gated_blocks = Vec::new();
        let mut per_block = Vec::new();
        for b in &bb.blocks {
            let f = count_block_flops(b, [b.in_channels, b.in_size, b.in_size]).expect("consistent backbone");
            if bb.is_gated(b.index) {
                gated_blocks.push(b.index);
                per_block.push(f);
            } else {
                fixed += f;
            }
        }
        let denominator = fixed + per_block.iter().sum::<u64>();
        Self {
            gated_blocks,
            per_block_full_flops: per_block,
            fixed_flops: fixed,
            denominator,
        }
    }

    pub fn fixed_fraction(&self) -> f64 {
        self.fixed_flops as f64 / self.denominator as f64
    }

    /// cp contribution per unit probability of `option` at gated position `pos`.
    pub fn coefficient(&self, pos: usize, option: BitOption) -> f64 {
        option.rel_cost() * self.per_block_full_flops[pos] as f64 / self.denominator as f64
    }

    /// Executed cost (FLOPs) of an assignment over the gated blocks.
    pub fn executed_cost(&self, assignment: &[BitOption]) -> f64 {
        assignment
            .iter()
            .zip(&self.per_block_full_flops)
            .map(|(o, &f)| o.rel_cost() * f as f64)
            .sum()
    }

    pub fn cp(&self, assignment: &[BitOption]) -> f64 {
        (self.fixed_flops as f64 + self.executed_cost(assignment)) / self.denominator as f64
    }
}

/// Where soft-mode gate probabilities come from.
#[derive(Clone, Copy, Debug)]
pub enum GateDrive<'a> {
    /// The recurrent gating network.
    Learned,
    /// Fixed probabilities per gated block (over its legal options), shared by all inputs.
    Fixed(&'a [Vec<f32>]),
}

#[derive(Clone, Debug)]
pub struct SoftOutput {
    pub logits: Var,
    /// Batch-mean expected cp, a differentiable scalar.
    pub expected_cp: Var,
    /// Per-input expected cp, `[N]`.
    pub sample_cp: Var,
    /// `[N, legal]` probabilities per gated block.
    pub probs: Vec<Var>,
    pub legal: Vec<Vec<BitOption>>,
}

fn check_finite(g: &Graph, v: Var, block: usize) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(DfsError::Numeric {
            block,
            msg: "non-finite value in branch mixture".into(),
        })
    }
}

/// Training-time forward: every gated block computes all legal branches and
/// mixes them by the gate probabilities.
pub fn forward_soft(g: &mut Graph, model: &mut DfsModel, x: Var, mode: BnMode, drive: GateDrive<'_>) -> Result<SoftOutput> {
    let DfsModel {
        backbone,
        gate,
        store,
        ledger,
    } = model;
    let n = g.shape(x)[0];
    if let GateDrive::Fixed(p) = drive {
        if p.len() != ledger.gated_blocks.len() {
            return config_err(format!(
                "fixed gate probabilities cover {} blocks, expected {}",
                p.len(),
                ledger.gated_blocks.len()
            ));
        }
    }
    let mut h = backbone.stem_forward(g, store, x, mode)?;
    let mut state = GateState::zeros(g, n, gate.config.hidden);
    let mut cost: Option<Var> = None;
    let mut all_probs = Vec::new();
    let mut all_legal = Vec::new();
    let mut pos = 0;
    for b in 0..backbone.blocks.len() {
        if !backbone.is_gated(b) {
            h = backbone.block_forward(g, store, b, h, BitOption::Keep, mode)?;
            continue;
        }
        let (probs, legal) = match drive {
            GateDrive::Learned => {
                let (p, s, legal) = gate.step(g, store, backbone, b, h, state)?;
                state = s;
                (p, legal)
            }
            GateDrive::Fixed(all) => {
                let legal = backbone.options_for(b, &gate.config.options);
                let row = &all[pos];
                if row.len() != legal.len() {
                    return config_err(format!("block {b}: {} probabilities for {} options", row.len(), legal.len()));
                }
                let data = (0..n).flat_map(|_| row.iter().copied()).collect();
                (g.constant(Tensor::new(&[n, legal.len()], data)?), legal)
            }
        };
        let mut mix: Option<Var> = None;
        for (k, &opt) in legal.iter().enumerate() {
            let branch = backbone.block_forward(g, store, b, h, opt, mode)?;
            let w = g.column(probs, k)?;
            let term = g.mul_rows(branch, w)?;
            mix = Some(match mix {
                None => term,
                Some(m) => g.add(m, term)?,
            });
        }
        let mix = mix.expect("at least one legal option");
        check_finite(g, mix, b)?;
        h = mix;
        let coeffs: Vec<f32> = legal.iter().map(|&o| ledger.coefficient(pos, o) as f32).collect();
        let cvec = g.constant(Tensor::new(&[legal.len(), 1], coeffs)?);
        let c = g.matmul(probs, cvec)?;
        cost = Some(match cost {
            None => c,
            Some(acc) => g.add(acc, c)?,
        });
        all_probs.push(probs);
        all_legal.push(legal);
        pos += 1;
    }
    let logits = backbone.head_forward(g, store, h)?;
    let cost = cost.expect("at least one gated block");
    let cost = g.reshape(cost, &[n])?;
    let sample_cp = g.add_scalar(cost, ledger.fixed_fraction() as f32);
    let expected_cp = g.mean(sample_cp);
    Ok(SoftOutput {
        logits,
        expected_cp,
        sample_cp,
        probs: all_probs,
        legal: all_legal,
    })
}

/// How hard-mode inference chooses options.
#[derive(Clone, Copy, Debug)]
pub enum Routing<'a> {
    /// Argmax of the gating network's probabilities, ties to the cheaper option.
    Learned,
    /// The same option for every input at each gated block.
    Static(&'a [BitOption]),
}

/// Result of hard-mode inference on a batch.
#[derive(Clone, Debug)]
pub struct HardOutput {
    pub logits: Tensor,
    /// Executed option per input per gated block.
    pub choices: Vec<Vec<BitOption>>,
    /// Gate probabilities per input per gated block over the configured
    /// options (illegal options hold 0). Empty for static routing.
    pub probs: Vec<Vec<Vec<f32>>>,
    pub realized_cp: Vec<f64>,
}

/// Validates a static assignment against the backbone.
pub fn check_assignment(model: &DfsModel, assignment: &[BitOption]) -> Result<()> {
    let gated = model.gated_blocks();
    if assignment.len() != gated.len() {
        return config_err(format!(
            "assignment has {} entries for {} gated blocks",
            assignment.len(),
            gated.len()
        ));
    }
    for (&b, &o) in gated.iter().zip(assignment) {
        o.validate()?;
        if o == BitOption::Skip && !model.backbone.blocks[b].has_identity_shortcut() {
            return config_err(format!("block {b} has a projection shortcut and cannot be skipped"));
        }
    }
    Ok(())
}

/// Inference-time forward in eval mode, executing one option per input and block.
pub fn forward_hard(model: &mut DfsModel, x: &Tensor, routing: Routing<'_>) -> Result<HardOutput> {
    if let Routing::Static(a) = routing {
        check_assignment(model, a)?;
    }
    let DfsModel {
        backbone,
        gate,
        store,
        ledger,
    } = model;
    let mode = BnMode::Eval;
    let n = x.shape()[0];
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mut h = backbone.stem_forward(&mut g, store, xv, mode)?;
    let mut state = GateState::zeros(&mut g, n, gate.config.hidden);
    let options = gate.config.options.clone();
    let mut choices = vec![Vec::with_capacity(ledger.gated_blocks.len()); n];
    let mut probs_out = vec![Vec::new(); n];
    let mut pos = 0;
    for b in 0..backbone.blocks.len() {
        if !backbone.is_gated(b) {
            h = backbone.block_forward(&mut g, store, b, h, BitOption::Keep, mode)?;
            continue;
        }
        match routing {
            Routing::Static(a) => {
                h = backbone.block_forward(&mut g, store, b, h, a[pos], mode)?;
                for c in choices.iter_mut() {
                    c.push(a[pos]);
                }
            }
            Routing::Learned => {
                let (p, s, legal) = gate.step(&mut g, store, backbone, b, h, state)?;
                state = s;
                let k = legal.len();
                let pd = g.data(p).to_vec();
                let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
                for (i, row) in pd.chunks(k).enumerate() {
                    let best = argmax_lowest_cost(row);
                    groups[best].push(i);
                    choices[i].push(legal[best]);
                    let full: Vec<f32> = options
                        .iter()
                        .map(|o| legal.iter().position(|l| l == o).map_or(0.0, |j| row[j]))
                        .collect();
                    probs_out[i].push(full);
                }
                let input = g.value(h).clone();
                let mut next: Option<Tensor> = None;
                for (opt_idx, rows) in groups.iter().enumerate().filter(|(_, r)| !r.is_empty()) {
                    let sub = if rows.len() == n {
                        h
                    } else {
                        g.constant(input.gather_rows(rows)?)
                    };
                    let y = backbone.block_forward(&mut g, store, b, sub, legal[opt_idx], mode)?;
                    let yv = g.value(y);
                    let dst = next.get_or_insert_with(|| {
                        let mut shape = yv.shape().to_vec();
                        shape[0] = n;
                        Tensor::zeros(&shape)
                    });
                    dst.scatter_rows(rows, yv)?;
                }
                h = g.constant(next.expect("every input routed"));
            }
        }
        pos += 1;
    }
    let logits = backbone.head_forward(&mut g, store, h)?;
    let realized_cp = choices.iter().map(|c| ledger.cp(c)).collect();
    Ok(HardOutput {
        logits: g.value(logits).clone(),
        choices,
        probs: probs_out,
        realized_cp,
    })
}

/// Evaluator that bypasses the gates and routes by a fixed assignment.
pub struct StaticEvaluator<'m> {
    model: &'m mut DfsModel,
    assignment: Vec<BitOption>,
}

/// Fixed-policy evaluation: static quantization or fixed skipping patterns.
pub fn static_mode(model: &mut DfsModel, assignment: Vec<BitOption>) -> Result<StaticEvaluator<'_>> {
    check_assignment(model, &assignment)?;
    Ok(StaticEvaluator { model, assignment })
}

impl StaticEvaluator<'_> {
    pub fn forward(&mut self, x: &Tensor) -> Result<HardOutput> {
        forward_hard(self.model, x, Routing::Static(&self.assignment))
    }

    pub fn evaluate(&mut self, data: &Dataset, batch_size: usize) -> Result<EvalResult> {
        evaluate(self.model, data, Routing::Static(&self.assignment), batch_size)
    }

    pub fn cp(&self) -> f64 {
        self.model.ledger.cp(&self.assignment)
    }
}

// ------------------------------------------------------------- traces

#[derive(Clone, Debug, PartialEq)]
pub struct BlockDecision {
    pub block_index: usize,
    pub option: BitOption,
    /// Probabilities over the configured options; empty when not recorded.
    pub probs: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputTrace {
    pub input_id: usize,
    pub decisions: Vec<BlockDecision>,
    pub realized_cp: f64,
    pub prediction: usize,
    pub label: usize,
}

impl InputTrace {
    pub fn correct(&self) -> bool {
        self.prediction == self.label
    }
}

/// Per-input record of hard-mode decisions over an evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionTrace {
    pub options: Vec<BitOption>,
    pub inputs: Vec<InputTrace>,
}

impl DecisionTrace {
    pub fn header(&self) -> String {
        let probs: Vec<String> = self.options.iter().map(|o| format!("prob_{o}")).collect();
        format!("input_id,block_index,option,{},realized_cp,correct", probs.join(","))
    }

    /// One row per (input, gated block).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.header())?;
        for inp in &self.inputs {
            for d in &inp.decisions {
                let probs: Vec<String> = if d.probs.is_empty() {
                    self.options.iter().map(|&o| if o == d.option { "1".into() } else { "0".into() }).collect()
                } else {
                    d.probs.iter().map(|p| format!("{p}")).collect()
                };
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    inp.input_id,
                    d.block_index,
                    d.option,
                    probs.join(","),
                    inp.realized_cp,
                    u8::from(inp.correct())
                )?;
            }
        }
        Ok(())
    }

    /// Parses the CSV written by [`DecisionTrace::write_csv`]. Rows of one
    /// input must be contiguous. Predictions are not stored in the CSV, so
    /// `prediction`/`label` are reconstructed as equal iff `correct` is 1.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| DfsError::Input("empty trace".into()))?;
        let header = header?;
        let cols: Vec<&str> = header.trim().split(',').collect();
        let bad_header = || DfsError::Input(format!("line 1: malformed trace header {header:?}"));
        if cols.len() < 6 || cols[..3] != ["input_id", "block_index", "option"] || cols[cols.len() - 2..] != ["realized_cp", "correct"] {
            return Err(bad_header());
        }
        let options = cols[3..cols.len() - 2]
            .iter()
            .map(|c| c.strip_prefix("prob_").ok_or_else(bad_header).and_then(|s| s.parse::<BitOption>().map_err(|_| bad_header())))
            .collect::<Result<Vec<_>>>()?;
        let mut inputs: Vec<InputTrace> = Vec::new();
        for (i, line) in lines {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| DfsError::Input(format!("line {lineno}: malformed trace row ({what})"));
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != cols.len() {
                return Err(bad("wrong field count"));
            }
            let input_id: usize = f[0].parse().map_err(|_| bad("input_id"))?;
            let block_index: usize = f[1].parse().map_err(|_| bad("block_index"))?;
            let option: BitOption = f[2].parse().map_err(|_| bad("option"))?;
            if !options.contains(&option) {
                return Err(bad("option not in header"));
            }
            let probs = f[3..f.len() - 2]
                .iter()
                .map(|p| p.parse::<f32>().map_err(|_| bad("probability")))
                .collect::<Result<Vec<_>>>()?;
            let realized_cp: f64 = f[f.len() - 2].parse().map_err(|_| bad("realized_cp"))?;
            let correct = match f[f.len() - 1] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("correct")),
            };
            let decision = BlockDecision { block_index, option, probs };
            match inputs.last_mut() {
                Some(last) if last.input_id == input_id => last.decisions.push(decision),
                _ => inputs.push(InputTrace {
                    input_id,
                    decisions: vec![decision],
                    realized_cp,
                    prediction: usize::from(!correct),
                    label: 0,
                }),
            }
        }
        Ok(Self { options, inputs })
    }
}

/// Hard-mode evaluation summary.
#[derive(Clone, Debug)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_cp: f64,
    pub trace: DecisionTrace,
}

/// Runs hard-mode inference over a whole dataset in order (including a
/// final partial batch).
pub fn evaluate(model: &mut DfsModel, data: &Dataset, routing: Routing<'_>, batch_size: usize) -> Result<EvalResult> {
    if batch_size == 0 {
        return config_err("evaluation batch_size must be positive");
    }
    let gated = model.gated_blocks().to_vec();
    let mut inputs = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, labels) = data.batch::<rand_chacha::ChaCha8Rng>(chunk, None);
        let out = forward_hard(model, &x, routing)?;
        let classes = out.logits.shape()[1];
        for (j, &id) in chunk.iter().enumerate() {
            let row = &out.logits.data()[j * classes..(j + 1) * classes];
            let prediction = argmax_lowest_cost(row);
            let decisions = gated
                .iter()
                .enumerate()
                .map(|(p, &b)| BlockDecision {
                    block_index: b,
                    option: out.choices[j][p],
                    probs: out.probs.get(j).and_then(|v| v.get(p)).cloned().unwrap_or_default(),
                })
                .collect();
            inputs.push(InputTrace {
                input_id: id,
                decisions,
                realized_cp: out.realized_cp[j],
                prediction,
                label: labels[j],
            });
        }
    }
    let n = inputs.len().max(1) as f64;
    let accuracy = inputs.iter().filter(|t| t.correct()).count() as f64 / n;
    let mean_cp = inputs.iter().map(|t| t.realized_cp).sum::<f64>() / n;
    Ok(EvalResult {
        accuracy,
        mean_cp,
        trace: DecisionTrace {
            options: model.options().to_vec(),
            inputs,
        },
    })
}
