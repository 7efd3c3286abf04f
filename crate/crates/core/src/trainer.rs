//! Resource-aware objective, the dynamic-sign cp controller and the
//! pretrain / step-one / step-two procedures.

use std::collections::VecDeque;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone;
use crate::data::{BatchStream, Dataset};
use crate::error::{config_err, DfsError, Result};
use crate::executor::{evaluate, forward_hard, forward_soft, EvalResult, GateDrive, Routing};
use crate::gate::argmax_lowest_cost;
use crate::graph::{Graph, Var};
use crate::model::DfsModel;
use crate::ops::BnMode;
use crate::optim::{LrSchedule, Sgd};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainStep {
    One,
    Two,
}

/// How the sign of α is chosen each iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    /// +1 when the batch cp exceeds the target, otherwise −1.
    #[default]
    Dynamic,
    /// Always +1 (the ablation that keeps pushing cp down).
    ConstantPositive,
}

/// Which batch cp the sign decision reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignSignal {
    /// Mean expected cp under the soft gate probabilities.
    Expected,
    /// Mean cp the batch realizes in an inference-mode hard pass.
    #[default]
    Routed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub target_cp: f64,
    /// Weight of the expected executed FLOPs in the loss.
    pub alpha_abs: f64,
    pub lr: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    pub batch_size: usize,
    pub total_iters: usize,
    #[serde(default)]
    pub seed: u64,
    pub step: TrainStep,
    #[serde(default)]
    pub sign_mode: SignMode,
    #[serde(default)]
    pub sign_signal: SignSignal,
    /// Random pad-crop-flip on training batches.
    #[serde(default)]
    pub augment: bool,
}

fn default_momentum() -> f32 {
    0.9
}

fn default_weight_decay() -> f32 {
    1e-4
}

impl RunConfig {
    pub fn step_one(alpha_abs: f64, batch_size: usize, total_iters: usize, seed: u64) -> Self {
        Self {
            target_cp: 1.0,
            alpha_abs,
            lr: LrSchedule::standard(0.1, total_iters),
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size,
            total_iters,
            seed,
            step: TrainStep::One,
            sign_mode: SignMode::Dynamic,
            sign_signal: SignSignal::Routed,
            augment: false,
        }
    }

    pub fn step_two(target_cp: f64, alpha_abs: f64, batch_size: usize, total_iters: usize, seed: u64) -> Self {
        Self {
            target_cp,
            lr: LrSchedule::standard(0.01, total_iters),
            step: TrainStep::Two,
            ..Self::step_one(alpha_abs, batch_size, total_iters, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_cp > 0.0 && self.target_cp <= 1.0) {
            return config_err("target_cp must be in (0, 1]");
        }
        if !(self.alpha_abs > 0.0) {
            return config_err("alpha_abs must be positive");
        }
        if self.batch_size == 0 {
            return config_err("batch_size must be positive");
        }
        if self.total_iters == 0 {
            return config_err("total_iters must be positive");
        }
        if self.step == TrainStep::One && self.target_cp != 1.0 {
            return config_err("target_cp must be 1.0 for step one");
        }
        self.lr.validate(self.total_iters)
    }
}

/// Plain full-precision backbone training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    pub batch_size: usize,
    pub total_iters: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augment: bool,
}

impl PretrainConfig {
    pub fn new(batch_size: usize, total_iters: usize, seed: u64) -> Self {
        Self {
            lr: LrSchedule::standard(0.1, total_iters),
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size,
            total_iters,
            seed,
            augment: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return config_err("batch_size must be positive");
        }
        if self.total_iters == 0 {
            return config_err("total_iters must be positive");
        }
        self.lr.validate(self.total_iters)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iter: usize,
    pub cp: f64,
    pub loss: f64,
    pub accuracy: f64,
}

/// Controller memory: the current sign and a bounded history.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState {
    pub current_sign: i8,
    pub batch_cp: f64,
    pub history: VecDeque<HistoryEntry>,
    pub capacity: usize,
}

impl ControllerState {
    pub fn new(capacity: usize) -> Self {
        Self {
            current_sign: -1,
            batch_cp: f64::NAN,
            history: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    pub fn record(&mut self, entry: HistoryEntry) {
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history.push_back(entry);
    }
}

impl Default for ControllerState {
    fn default() -> Self {
        Self::new(1024)
    }
}

/// `+1` iff `batch_cp > target_cp` (equality counts as below).
pub fn dynamic_sign(batch_cp: f64, target_cp: f64) -> i8 {
    if batch_cp > target_cp {
        1
    } else {
        -1
    }
}

/// Scalar parts of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub ce: f64,
    /// Expected executed FLOPs per input.
    pub e: f64,
    pub sign: i8,
    pub batch_cp: f64,
}

/// Loss settings shared by every iteration of a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub target_cp: f64,
    pub alpha_abs: f64,
    pub sign_mode: SignMode,
    /// Full-model FLOPs, converting cp into FLOPs.
    pub denominator: f64,
}

/// `CE + sign·α·E` with `E = expected_cp · denominator`. The sign is decided
/// from `signal_cp` (defaulting to the value of `expected_cp`).
pub fn total_loss(
    g: &mut Graph,
    obj: &Objective,
    logits: Var,
    labels: &[usize],
    expected_cp: Var,
    signal_cp: Option<f64>,
    state: &ControllerState,
) -> Result<(Var, ControllerState, LossTerms)> {
    if !(obj.alpha_abs > 0.0) {
        return config_err("alpha_abs must be positive");
    }
    let cp_value = g.data(expected_cp)[0] as f64;
    let batch_cp = signal_cp.unwrap_or(cp_value);
    let sign = match obj.sign_mode {
        SignMode::Dynamic => dynamic_sign(batch_cp, obj.target_cp),
        SignMode::ConstantPositive => 1,
    };
    let ce = g.cross_entropy(logits, labels)?;
    let ce_value = g.data(ce)[0] as f64;
    let weight = sign as f64 * obj.alpha_abs * obj.denominator;
    let penalty = g.scale(expected_cp, weight as f32);
    let loss = g.add(ce, penalty)?;
    let mut next = state.clone();
    next.current_sign = sign;
    next.batch_cp = batch_cp;
    Ok((
        loss,
        next,
        LossTerms {
            ce: ce_value,
            e: cp_value * obj.denominator,
            sign,
            batch_cp,
        },
    ))
}

/// Maps a coefficient quoted against `reference_flops` full-model FLOPs onto
/// a model with `denominator` FLOPs so that `α·E` keeps the same size per
/// unit of cp.
pub fn rescale_alpha(alpha: f64, reference_flops: f64, denominator: f64) -> f64 {
    alpha * reference_flops / denominator
}

/// One JSON-lines training log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub loss: f64,
    pub ce: f64,
    #[serde(rename = "E")]
    pub e: f64,
    pub sign: i8,
    pub batch_cp: f64,
    pub lr: f32,
}

fn emit(log: &mut Option<&mut dyn Write>, rec: &LogRecord) -> Result<()> {
    if let Some(w) = log.as_deref_mut() {
        serde_json::to_writer(&mut *w, rec).map_err(|e| DfsError::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn batch_accuracy(g: &Graph, logits: Var, labels: &[usize]) -> f64 {
    let classes = g.shape(logits)[1];
    let hits = g
        .data(logits)
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax_lowest_cost(row) == l)
        .count();
    hits as f64 / labels.len() as f64
}

fn check_divergence(iter: usize, loss: f64, initial: f64) -> Result<()> {
    if !loss.is_finite() || loss > 10.0 * initial.abs().max(f64::MIN_POSITIVE) {
        return Err(DfsError::Divergence { iter, loss, initial });
    }
    Ok(())
}

fn augment_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean training loss over the first epoch.
    pub first_epoch_loss: f64,
    pub test_accuracy: Option<f64>,
}

/// Full-precision training of the backbone alone (gate frozen).
pub fn pretrain_backbone(
    model: &mut DfsModel,
    cfg: &PretrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    mut log: Option<&mut dyn Write>,
) -> Result<PretrainReport> {
    cfg.validate()?;
    model.freeze_gate(true);
    model.freeze_backbone(false);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut batches = BatchStream::new(train.len(), cfg.batch_size, cfg.seed)?;
    let mut rng = augment_rng(cfg.seed);
    let per_epoch = train.len() / cfg.batch_size;
    let mut initial = f64::NAN;
    let mut last = f64::NAN;
    let mut epoch_sum = 0.0;
    let mut epoch_count = 0usize;
    for iter in 0..cfg.total_iters {
        let idx = batches.next().expect("endless stream");
        let (x, labels) = train.batch(&idx, cfg.augment.then_some(&mut rng));
        let mut g = Graph::new();
        let xv = g.constant(x);
        let logits = model.backbone.forward_plain(&mut g, &mut model.store, xv, BnMode::Train)?;
        let loss = g.cross_entropy(logits, &labels)?;
        let value = g.data(loss)[0] as f64;
        if iter == 0 {
            initial = value;
        }
        check_divergence(iter, value, initial)?;
        if iter < per_epoch {
            epoch_sum += value;
            epoch_count += 1;
        }
        g.backward(loss)?;
        g.accumulate_param_grads(&mut model.store);
        let lr = cfg.lr.at(iter);
        opt.step(&mut model.store, lr);
        last = value;
        emit(
            &mut log,
            &LogRecord {
                iter,
                loss: value,
                ce: value,
                e: 0.0,
                sign: 0,
                batch_cp: 1.0,
                lr,
            },
        )?;
    }
    model.freeze_gate(false);
    let test_accuracy = match test {
        Some(t) => Some(plain_accuracy(model, t, 256)?),
        None => None,
    };
    Ok(PretrainReport {
        initial_loss: initial,
        final_loss: last,
        first_epoch_loss: epoch_sum / epoch_count.max(1) as f64,
        test_accuracy,
    })
}

/// Eval-mode accuracy of the gate-free full-precision backbone.
pub fn plain_accuracy(model: &mut DfsModel, data: &Dataset, batch_size: usize) -> Result<f64> {
    if batch_size == 0 {
        return config_err("evaluation batch_size must be positive");
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut hits = 0usize;
    for chunk in idx.chunks(batch_size) {
        let (x, labels) = data.batch::<ChaCha8Rng>(chunk, None);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let logits = model.backbone.forward_plain(&mut g, &mut model.store, xv, BnMode::Eval)?;
        let classes = g.shape(logits)[1];
        hits += g
            .data(logits)
            .chunks(classes)
            .zip(&labels)
            .filter(|(row, &l)| argmax_lowest_cost(row) == l)
            .count();
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Outcome of a gated training run.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub target_cp: f64,
    /// Mean batch cp (the sign signal) over the final 10% of iterations.
    pub tail_mean_cp: f64,
    /// Max minus min batch cp over the final 10% of iterations.
    pub tail_range: f64,
    /// Set when the final-phase cp swings by more than 10 points.
    pub oscillation_warning: bool,
    pub controller: ControllerState,
    pub records: Vec<LogRecord>,
    pub eval: Option<EvalResult>,
}

impl StepReport {
    /// Whether every logged sign obeys the dynamic rule.
    pub fn sign_rule_holds(&self) -> bool {
        self.records
            .iter()
            .all(|r| r.sign == dynamic_sign(r.batch_cp, self.target_cp))
    }
}

/// Serializable end-of-run summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub target_cp: f64,
    pub actual_cp: Option<f64>,
    pub accuracy: Option<f64>,
    pub tail_mean_cp: f64,
    pub oscillation_warning: bool,
    pub config: RunConfig,
}

impl StepReport {
    pub fn summary(&self, cfg: &RunConfig) -> FinalReport {
        FinalReport {
            target_cp: self.target_cp,
            actual_cp: self.eval.as_ref().map(|e| e.mean_cp),
            accuracy: self.eval.as_ref().map(|e| e.accuracy),
            tail_mean_cp: self.tail_mean_cp,
            oscillation_warning: self.oscillation_warning,
            config: cfg.clone(),
        }
    }
}

/// Mean realized cp of an inference-mode pass over the batch.
fn routed_cp(model: &mut DfsModel, x: &Tensor) -> Result<f64> {
    let out = forward_hard(model, x, Routing::Learned)?;
    Ok(out.realized_cp.iter().sum::<f64>() / out.realized_cp.len() as f64)
}

fn train_gated(
    model: &mut DfsModel,
    cfg: &RunConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    bn_mode: BnMode,
    log: &mut Option<&mut dyn Write>,
) -> Result<StepReport> {
    let obj = Objective {
        target_cp: cfg.target_cp,
        alpha_abs: cfg.alpha_abs,
        sign_mode: cfg.sign_mode,
        denominator: model.ledger.denominator as f64,
    };
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut batches = BatchStream::new(train.len(), cfg.batch_size, cfg.seed)?;
    let mut rng = augment_rng(cfg.seed);
    let mut state = ControllerState::default();
    let mut records = Vec::with_capacity(cfg.total_iters);
    let mut initial = f64::NAN;
    for iter in 0..cfg.total_iters {
        let idx = batches.next().expect("endless stream");
        let (x, labels) = train.batch(&idx, cfg.augment.then_some(&mut rng));
        let signal = match cfg.sign_signal {
            SignSignal::Expected => None,
            SignSignal::Routed => Some(routed_cp(model, &x)?),
        };
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = forward_soft(&mut g, model, xv, bn_mode, GateDrive::Learned)?;
        let (loss, next, terms) = total_loss(&mut g, &obj, out.logits, &labels, out.expected_cp, signal, &state)?;
        if iter == 0 {
            initial = terms.ce;
        }
        check_divergence(iter, terms.ce, initial)?;
        let loss_value = g.data(loss)[0] as f64;
        let accuracy = batch_accuracy(&g, out.logits, &labels);
        g.backward(loss)?;
        g.accumulate_param_grads(&mut model.store);
        let lr = cfg.lr.at(iter);
        opt.step(&mut model.store, lr);
        state = next;
        state.record(HistoryEntry {
            iter,
            cp: terms.batch_cp,
            loss: loss_value,
            accuracy,
        });
        let rec = LogRecord {
            iter,
            loss: loss_value,
            ce: terms.ce,
            e: terms.e,
            sign: terms.sign,
            batch_cp: terms.batch_cp,
            lr,
        };
        emit(log, &rec)?;
        records.push(rec);
    }
    let tail = &records[records.len() - (records.len() / 10).max(1)..];
    let tail_mean_cp = tail.iter().map(|r| r.batch_cp).sum::<f64>() / tail.len() as f64;
    let (lo, hi) = tail
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.batch_cp), hi.max(r.batch_cp)));
    let eval = match test {
        Some(t) => Some(evaluate(model, t, Routing::Learned, 256)?),
        None => None,
    };
    Ok(StepReport {
        target_cp: cfg.target_cp,
        tail_mean_cp,
        tail_range: hi - lo,
        oscillation_warning: (hi - cfg.target_cp).abs().max((lo - cfg.target_cp).abs()) > 0.10,
        controller: state,
        records,
        eval,
    })
}

/// Trains only the gates toward all-Keep at 100% cp while the backbone
/// (weights and batch-norm statistics) stays fixed.
pub fn train_step_one(
    model: &mut DfsModel,
    cfg: &RunConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    mut log: Option<&mut dyn Write>,
) -> Result<StepReport> {
    cfg.validate()?;
    if cfg.step != TrainStep::One {
        return config_err("step must be \"one\" for train_step_one");
    }
    model.freeze_backbone(true);
    model.freeze_gate(false);
    let before = model.store.snapshot(backbone::PREFIX);
    let report = train_gated(model, cfg, train, test, BnMode::Eval, &mut log);
    model.freeze_backbone(false);
    let report = report?;
    if model.store.snapshot(backbone::PREFIX) != before {
        return Err(DfsError::Invariant("backbone parameters changed during step one".into()));
    }
    Ok(report)
}

/// Jointly trains backbone and gates toward `cfg.target_cp`.
pub fn train_step_two(
    model: &mut DfsModel,
    cfg: &RunConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    mut log: Option<&mut dyn Write>,
) -> Result<StepReport> {
    cfg.validate()?;
    if cfg.step != TrainStep::Two {
        return config_err("step must be \"two\" for train_step_two");
    }
    model.freeze_backbone(false);
    model.freeze_gate(false);
    train_gated(model, cfg, train, test, BnMode::Train, &mut log)
}
