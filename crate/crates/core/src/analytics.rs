//! Decision-distribution reports, accuracy-vs-cp sweeps and plain SVG charts.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{config_err, DfsError, Result};
use crate::executor::DecisionTrace;
use crate::model::DfsModel;
use crate::quant::BitOption;
use crate::trainer::{train_step_two, RunConfig, TrainStep};

/// Hex SHA-256 of the compact JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value).map_err(|e| DfsError::Input(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockFrequencies {
    pub block_index: usize,
    pub total: usize,
    /// Count per configured option, in option order.
    pub counts: Vec<usize>,
}

impl BlockFrequencies {
    pub fn freq(&self, k: usize) -> f64 {
        self.counts[k] as f64 / self.total.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Per-block option frequencies over an evaluation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionReport {
    pub options: Vec<BitOption>,
    pub num_inputs: usize,
    pub blocks: Vec<BlockFrequencies>,
    pub cp_histogram: Vec<HistogramBin>,
    /// Blocks per residual group, used to single out group-leading blocks.
    pub group_size: Option<usize>,
}

pub const HISTOGRAM_BINS: usize = 20;

impl DecisionReport {
    pub fn from_trace(trace: &DecisionTrace, group_size: Option<usize>) -> Result<Self> {
        if group_size == Some(0) {
            return config_err("group size must be positive");
        }
        let mut blocks: Vec<BlockFrequencies> = Vec::new();
        for inp in &trace.inputs {
            for d in &inp.decisions {
                let k = trace
                    .options
                    .iter()
                    .position(|&o| o == d.option)
                    .ok_or_else(|| DfsError::Input(format!("option {} not in trace header", d.option)))?;
                let pos = match blocks.binary_search_by_key(&d.block_index, |b| b.block_index) {
                    Ok(p) => p,
                    Err(p) => {
                        blocks.insert(
                            p,
                            BlockFrequencies {
                                block_index: d.block_index,
                                total: 0,
                                counts: vec![0; trace.options.len()],
                            },
                        );
                        p
                    }
                };
                blocks[pos].total += 1;
                blocks[pos].counts[k] += 1;
            }
        }
        let mut cp_histogram: Vec<HistogramBin> = (0..HISTOGRAM_BINS)
            .map(|i| HistogramBin {
                lo: i as f64 / HISTOGRAM_BINS as f64,
                hi: (i + 1) as f64 / HISTOGRAM_BINS as f64,
                count: 0,
            })
            .collect();
        for inp in &trace.inputs {
            let bin = ((inp.realized_cp * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            cp_histogram[bin].count += 1;
        }
        Ok(Self {
            options: trace.options.clone(),
            num_inputs: trace.inputs.len(),
            blocks,
            cp_histogram,
            group_size,
        })
    }

    fn option_index(&self, o: BitOption) -> Option<usize> {
        self.options.iter().position(|&x| x == o)
    }

    pub fn block(&self, index: usize) -> Option<&BlockFrequencies> {
        self.blocks.iter().find(|b| b.block_index == index)
    }

    /// Frequency of `o` at block `index` (0 when the block or option is absent).
    pub fn frequency(&self, index: usize, o: BitOption) -> f64 {
        match (self.block(index), self.option_index(o)) {
            (Some(b), Some(k)) => b.freq(k),
            _ => 0.0,
        }
    }

    fn aggregate(&self, pred: impl Fn(BitOption) -> bool) -> f64 {
        let total: usize = self.blocks.iter().map(|b| b.total).sum();
        let hits: usize = self
            .blocks
            .iter()
            .flat_map(|b| b.counts.iter().zip(&self.options))
            .filter(|(_, &o)| pred(o))
            .map(|(c, _)| c)
            .sum();
        hits as f64 / total.max(1) as f64
    }

    /// Share of all (block, input) decisions that skip.
    pub fn skip_frequency(&self) -> f64 {
        self.aggregate(|o| o == BitOption::Skip)
    }

    /// Share of all (block, input) decisions that run quantized.
    pub fn low_bit_frequency(&self) -> f64 {
        self.aggregate(|o| matches!(o, BitOption::Quant(_)))
    }

    pub fn keep_frequency(&self) -> f64 {
        self.aggregate(|o| o == BitOption::Keep)
    }

    /// Blocks whose Skip frequency exceeds one half.
    pub fn flagged_blocks(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .filter(|b| self.frequency(b.block_index, BitOption::Skip) > 0.5)
            .map(|b| b.block_index)
            .collect()
    }

    /// Skip frequency over the first gated block of every residual group.
    pub fn group_leader_skip_frequency(&self) -> Option<f64> {
        let g = self.group_size?;
        let leaders: Vec<&BlockFrequencies> = self.blocks.iter().filter(|b| b.block_index % g == 0).collect();
        if leaders.is_empty() {
            return None;
        }
        let k = self.option_index(BitOption::Skip);
        let total: usize = leaders.iter().map(|b| b.total).sum();
        let skips: usize = leaders.iter().map(|b| k.map_or(0, |k| b.counts[k])).sum();
        Some(skips as f64 / total.max(1) as f64)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let cols: Vec<String> = self.options.iter().map(|o| format!("freq_{o}")).collect();
        writeln!(w, "block_index,total,{},flagged", cols.join(","))?;
        let flagged = self.flagged_blocks();
        for b in &self.blocks {
            let f: Vec<String> = (0..self.options.len()).map(|k| format!("{:.6}", b.freq(k))).collect();
            writeln!(
                w,
                "{},{},{},{}",
                b.block_index,
                b.total,
                f.join(","),
                u8::from(flagged.contains(&b.block_index))
            )?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "inputs: {}", self.num_inputs);
        let _ = writeln!(
            s,
            "aggregate: skip {:.4}, low-bit {:.4}, keep {:.4}",
            self.skip_frequency(),
            self.low_bit_frequency(),
            self.keep_frequency()
        );
        for b in &self.blocks {
            let parts: Vec<String> = self
                .options
                .iter()
                .enumerate()
                .map(|(k, o)| format!("{o} {:.3}", b.freq(k)))
                .collect();
            let _ = writeln!(s, "block {:>3}: {}", b.block_index, parts.join("  "));
        }
        let flagged = self.flagged_blocks();
        if flagged.is_empty() {
            let _ = writeln!(s, "no block is skipped for more than half of the inputs");
        } else {
            let _ = writeln!(s, "skipped for more than half of the inputs: {flagged:?}");
        }
        if let Some(f) = self.group_leader_skip_frequency() {
            let _ = writeln!(s, "first block of each group: skip {f:.4}");
        }
        let _ = writeln!(s, "cp histogram:");
        for bin in self.cp_histogram.iter().filter(|b| b.count > 0) {
            let _ = writeln!(s, "  [{:.2}, {:.2}): {}", bin.lo, bin.hi, bin.count);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub target_cp: f64,
    pub actual_cp: f64,
    pub accuracy: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepMetadata {
    pub config_hash: String,
    pub seed: u64,
    pub git_revision: Option<String>,
    pub created_unix: Option<u64>,
}

/// Accuracy against computation percentage, one entry per target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
    pub metadata: SweepMetadata,
}

/// Rejects an empty list and targets outside `(floor, 1]`.
pub fn validate_targets(targets: &[f64], floor: f64) -> Result<()> {
    if targets.is_empty() {
        return Err(DfsError::Usage("sweep needs at least one target cp".into()));
    }
    for &t in targets {
        if !(t > floor && t <= 1.0) {
            return config_err(format!("target cp {t} outside ({floor:.6}, 1]; the lowest reachable cp is {floor:.6}"));
        }
    }
    Ok(())
}

impl SweepResult {
    pub fn is_sorted(&self) -> bool {
        self.entries.windows(2).all(|w| w[0].target_cp <= w[1].target_cp)
    }

    /// CSV without timestamps, so identical runs give identical bytes.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "target_cp,actual_cp,accuracy,checkpoint")?;
        for e in &self.entries {
            let ckpt = e.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            writeln!(w, "{},{:.6},{:.6},{}", e.target_cp, e.actual_cp, e.accuracy, ckpt)?;
        }
        Ok(())
    }

    pub fn svg(&self) -> String {
        let pts: Vec<(f64, f64)> = self.entries.iter().map(|e| (e.actual_cp, e.accuracy)).collect();
        svg_line_chart(&pts, "computation percentage", "accuracy")
    }
}

/// Runs step two once per target, each from a copy of `base` (the shared
/// step-one model). Checkpoints go to `out_dir` when given.
pub fn run_sweep(
    base: &DfsModel,
    base_cfg: &RunConfig,
    targets: &[f64],
    train: &Dataset,
    test: &Dataset,
    out_dir: Option<&Path>,
) -> Result<SweepResult> {
    validate_targets(targets, base.cp_floor())?;
    if base_cfg.step != TrainStep::Two {
        return config_err("sweep runs step two; set step to \"two\"");
    }
    let mut sorted = targets.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut entries = Vec::with_capacity(sorted.len());
    for &t in &sorted {
        let mut model = base.clone();
        let cfg = RunConfig {
            target_cp: t,
            ..base_cfg.clone()
        };
        let report = train_step_two(&mut model, &cfg, train, Some(test), None)?;
        let eval = report.eval.expect("test split supplied");
        let checkpoint = match out_dir {
            Some(dir) => {
                let p = dir.join(format!("step2_cp{t:.4}.ckpt"));
                model.save(&p)?;
                Some(p)
            }
            None => None,
        };
        entries.push(SweepEntry {
            target_cp: t,
            actual_cp: eval.mean_cp,
            accuracy: eval.accuracy,
            checkpoint,
        });
    }
    Ok(SweepResult {
        entries,
        metadata: SweepMetadata {
            config_hash: config_hash(base_cfg)?,
            seed: base_cfg.seed,
            git_revision: None,
            created_unix: None,
        },
    })
}

/// Minimal self-contained SVG line chart of `(x, y)` points.
pub fn svg_line_chart(points: &[(f64, f64)], x_label: &str, y_label: &str) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let span = |f: fn(&(f64, f64)) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = span(|p| p.0);
    let (y0, y1) = span(|p| p.1);
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    let path: Vec<String> = points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| format!("{}{:.2} {:.2}", if i == 0 { "M" } else { "L" }, px(x), py(y)))
        .collect();
    if !path.is_empty() {
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, path.join(" "));
    }
    for &(x, y) in points {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#, px(x), py(y));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10">{x0:.3}</text>"#, m, h - m + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{x1:.3}</text>"#, w - m, h - m + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y0:.3}</text>"#, m - 4.0, h - m);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y1:.3}</text>"#, m - 4.0, m + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{x_label}</text>"#, w / 2.0, h - 8.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">{y_label}</text>"#,
        h / 2.0,
        h / 2.0
    );
    s.push_str("</svg>\n");
    s
}
