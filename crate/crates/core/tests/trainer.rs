mod common;

use dfs_core::data::{standardize_pair, Dataset, Split, SyntheticSpec};
use dfs_core::executor::{forward_soft, GateDrive};
use dfs_core::ops::BnMode;
use dfs_core::optim::LrSchedule;
use dfs_core::trainer::{
    dynamic_sign, pretrain_backbone, rescale_alpha, total_loss, train_step_one, train_step_two, ControllerState,
    LogRecord, Objective, PretrainConfig, RunConfig, SignMode,
};
use dfs_core::{BitOption, DfsError, DfsModel, Graph, Tensor};

fn tiny_data() -> (Dataset, Dataset) {
    let spec = SyntheticSpec {
        image_size: 8,
        num_classes: 4,
        samples_per_class: 16,
        test_samples_per_class: 8,
        ..Default::default()
    };
    let mut train = spec.generate(Split::Train).unwrap();
    let mut test = spec.generate(Split::Test).unwrap();
    standardize_pair(&mut train, &mut test);
    (train, test)
}

fn objective(target: f64, alpha: f64, m: &DfsModel) -> Objective {
    Objective {
        target_cp: target,
        alpha_abs: alpha,
        sign_mode: SignMode::Dynamic,
        denominator: m.ledger.denominator as f64,
    }
}

/// Loss, CE and expected cp at fixed gate probabilities.
fn loss_at(m: &DfsModel, x: &Tensor, labels: &[usize], obj: &Objective) -> (f64, f64, f64, i8) {
    loss_in_mode(m, x, labels, obj, BnMode::Eval)
}

fn loss_in_mode(m: &DfsModel, x: &Tensor, labels: &[usize], obj: &Objective, mode: BnMode) -> (f64, f64, f64, i8) {
    let mut m = m.clone();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = forward_soft(&mut g, &mut m, xv, mode, GateDrive::Learned).unwrap();
    let (loss, state, terms) =
        total_loss(&mut g, obj, out.logits, labels, out.expected_cp, None, &ControllerState::default()).unwrap();
    assert_eq!(state.current_sign, terms.sign);
    (g.data(loss)[0] as f64, terms.ce, g.data(out.expected_cp)[0] as f64, terms.sign)
}

#[test]
fn sign_rule_and_boundary() {
    assert_eq!(dynamic_sign(0.51, 0.5), 1);
    assert_eq!(dynamic_sign(0.49, 0.5), -1);
    assert_eq!(dynamic_sign(0.5, 0.5), -1);

    let m = common::small_model(1);
    let x = common::random_images(4, 3, 8, 2);
    let labels = [0, 1, 2, 3];
    let probe = objective(0.5, 1e-8, &m);
    let (_, _, cp, _) = loss_at(&m, &x, &labels, &probe);
    // Target equal to the batch cp: negative sign, loss = CE − α·E.
    let cp32 = cp as f32 as f64;
    let obj = objective(cp32, 1e-8, &m);
    let (loss, ce, cp_again, sign) = loss_at(&m, &x, &labels, &obj);
    assert_eq!(cp_again, cp32);
    assert_eq!(sign, -1);
    let want = ce - 1e-8 * m.ledger.denominator as f64 * cp;
    assert!((loss - want).abs() < 1e-5, "{loss} vs {want}");
}

#[test]
fn alpha_must_be_positive() {
    let m = common::small_model(3);
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(&[1, 4]));
    let cp = g.constant(Tensor::scalar(0.5));
    for bad in [0.0, -1e-6, f64::NAN] {
        let obj = objective(0.5, bad, &m);
        let r = total_loss(&mut g, &obj, logits, &[0], cp, None, &ControllerState::default());
        assert!(matches!(r, Err(DfsError::Config(_))));
    }
    let ok = objective(0.5, 5e-6, &m);
    assert!(total_loss(&mut g, &ok, logits, &[0], cp, None, &ControllerState::default()).is_ok());
    assert!(RunConfig::step_two(0.5, 0.0, 8, 10, 0).validate().is_err());
    assert!(RunConfig::step_two(0.5, 5e-6, 8, 10, 0).validate().is_ok());
}

#[test]
fn constant_sign_ignores_the_batch() {
    let m = common::small_model(4);
    let x = common::random_images(2, 3, 8, 5);
    let mut obj = objective(0.99, 1e-8, &m);
    obj.sign_mode = SignMode::ConstantPositive;
    let (_, _, cp, sign) = loss_at(&m, &x, &[0, 1], &obj);
    assert!(cp < 0.99);
    assert_eq!(sign, 1);
}

/// Above target the cost term pushes a gate probability by
/// `α·rel_cost·full_flops_i` per unit of batch-mean probability. Checked on
/// the last gated block, whose probabilities reach the cost only directly.
#[test]
fn cost_gradient_on_gate_probabilities() {
    let mut m = common::small_model(6);
    let x = common::random_images(3, 3, 8, 7);
    let labels = [0, 1, 2];
    let alpha = 1e-7;
    let grads = |target: f64, m: &mut DfsModel| {
        let obj = objective(target, alpha, m);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = forward_soft(&mut g, m, xv, BnMode::Eval, GateDrive::Learned).unwrap();
        let (loss, _, terms) =
            total_loss(&mut g, &obj, out.logits, &labels, out.expected_cp, None, &ControllerState::default()).unwrap();
        g.backward(loss).unwrap();
        let grads: Vec<Vec<f32>> = out.probs.iter().map(|&p| g.grad(p).unwrap().to_vec()).collect();
        (terms.sign, grads, out.legal)
    };
    let (up, above, legal) = grads(0.01, &mut m);
    let (down, below, _) = grads(1.0, &mut m);
    assert_eq!((up, down), (1, -1));
    let last = legal.len() - 1;
    for (pos, opts) in legal.iter().enumerate().skip(last) {
        let full = m.ledger.per_block_full_flops[pos] as f64;
        for (j, (a, b)) in above[pos].iter().zip(&below[pos]).enumerate() {
            let opt: BitOption = opts[j % opts.len()];
            // Difference of the two signs isolates 2·α·rel_cost·full / N.
            let want = 2.0 * alpha * opt.rel_cost() * full / labels.len() as f64;
            let got = (a - b) as f64;
            assert!((got - want).abs() <= 1e-4 * want.max(1e-3), "block {pos} {opt}: {got} vs {want}");
        }
    }
}

#[test]
fn total_loss_matches_finite_differences_on_a_gate_logit() {
    // High bitwidths keep rounding below f32 resolution so the
    // straight-through gradient equals the true one.
    let options = vec![BitOption::Skip, BitOption::Quant(24), BitOption::Quant(28), BitOption::Keep];
    let m = common::smooth_point_model(options, 8);
    let x = common::random_images(3, 3, 8, 9);
    let labels = [0, 2, 1];
    // α·denominator = 1 keeps the two loss terms on comparable scales.
    let alpha = 1.0 / m.ledger.denominator as f64;
    let obj = objective(0.05, alpha, &m);
    let bias = m.gate.out_bias;
    let mut mm = m.clone();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = forward_soft(&mut g, &mut mm, xv, BnMode::Train, GateDrive::Learned).unwrap();
    let (loss, _, terms) =
        total_loss(&mut g, &obj, out.logits, &labels, out.expected_cp, None, &ControllerState::default()).unwrap();
    assert_eq!(terms.sign, 1);
    g.backward(loss).unwrap();
    mm.store.zero_grads();
    g.accumulate_param_grads(&mut mm.store);
    let analytic = mm.store.get(bias).grad.clone().unwrap();
    for k in 0..analytic.len() {
        let numeric = common::richardson(5e-2, |d| {
            let mut p = m.clone();
            p.store.get_mut(bias).data_mut()[k] += d;
            loss_in_mode(&p, &x, &labels, &obj, BnMode::Train).0
        });
        let a = analytic[k] as f64;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(common::FLOOR);
        assert!(rel <= 1e-3, "logit {k}: analytic {a}, numeric {numeric}");
    }
}

#[test]
fn alpha_rescaling_preserves_per_cp_weight() {
    let a = rescale_alpha(5e-6, 2.0e8, 2.0e7);
    assert!((a - 5e-5).abs() < 1e-18);
    assert!((a * 2.0e7 - 5e-6 * 2.0e8).abs() < 1e-9);
}

#[test]
fn schedule_validation() {
    let mut cfg = RunConfig::step_two(0.5, 1e-6, 8, 100, 0);
    cfg.lr = LrSchedule {
        initial: 0.01,
        milestones: vec![60, 50],
        factor: 0.1,
    };
    assert!(cfg.validate().is_err());
    cfg.lr.milestones = vec![50, 100];
    assert!(cfg.validate().is_err());
    cfg.lr.milestones = vec![50, 75];
    assert!(cfg.validate().is_ok());
    assert_eq!(cfg.lr.at(49), 0.01);
    assert!((cfg.lr.at(50) - 0.001).abs() < 1e-9);
    assert!((cfg.lr.at(99) - 0.0001).abs() < 1e-9);
    for t in [0.0, -0.1, 1.01] {
        assert!(RunConfig::step_two(t, 1e-6, 8, 100, 0).validate().is_err());
    }
    let mut one = RunConfig::step_one(1e-6, 8, 100, 0);
    one.target_cp = 0.9;
    assert!(one.validate().is_err());
}

#[test]
fn step_one_freezes_backbone_and_trains_gate() {
    let (train, test) = tiny_data();
    let mut m = common::small_model(10);
    let before_backbone = m.store.snapshot("backbone.");
    let before_gate = m.store.snapshot("gate.");
    let cfg = RunConfig::step_one(1e-8, 8, 6, 11);
    let mut log = Vec::new();
    let report = train_step_one(&mut m, &cfg, &train, Some(&test), Some(&mut log)).unwrap();
    assert_eq!(m.store.snapshot("backbone."), before_backbone);
    assert_ne!(m.store.snapshot("gate."), before_gate);
    assert!(report.sign_rule_holds());
    assert!(report.records.iter().all(|r| r.sign == -1));

    let text = String::from_utf8(log).unwrap();
    assert_eq!(text.lines().count(), 6);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        for k in ["iter", "loss", "ce", "E", "sign", "batch_cp", "lr"] {
            assert!(keys.contains(&k), "missing {k} in {line}");
        }
        let rec: LogRecord = serde_json::from_str(line).unwrap();
        assert!(rec.batch_cp > 0.0 && rec.batch_cp <= 1.0);
    }
    assert!(matches!(
        train_step_one(&mut m, &RunConfig::step_two(0.5, 1e-8, 8, 6, 0), &train, None, None),
        Err(DfsError::Config(_))
    ));
}

#[test]
fn step_two_updates_both_parts_and_obeys_sign_rule() {
    let (train, _) = tiny_data();
    let mut m = common::small_model(12);
    let before_backbone = m.store.snapshot("backbone.");
    let before_gate = m.store.snapshot("gate.");
    let cfg = RunConfig::step_two(0.5, 1e-7, 8, 8, 13);
    let report = train_step_two(&mut m, &cfg, &train, None, None).unwrap();
    assert_ne!(m.store.snapshot("backbone."), before_backbone);
    assert_ne!(m.store.snapshot("gate."), before_gate);
    assert!(report.sign_rule_holds());
    assert!(report.eval.is_none());
}

#[test]
fn training_is_deterministic() {
    let (train, _) = tiny_data();
    let run = || {
        let mut m = common::small_model(14);
        let pre = pretrain_backbone(&mut m, &PretrainConfig::new(8, 6, 15), &train, None, None).unwrap();
        let cfg = RunConfig::step_two(0.5, 1e-7, 8, 6, 16);
        let r = train_step_two(&mut m, &cfg, &train, None, None).unwrap();
        (pre.final_loss, r.records)
    };
    assert_eq!(run(), run());
}

#[test]
fn pretraining_reduces_loss() {
    let (train, test) = tiny_data();
    let mut m = common::small_model(17);
    let mut cfg = PretrainConfig::new(16, 24, 18);
    cfg.lr = LrSchedule {
        initial: 0.05,
        milestones: vec![],
        factor: 0.1,
    };
    let r = pretrain_backbone(&mut m, &cfg, &train, Some(&test), None).unwrap();
    assert!(r.first_epoch_loss < r.initial_loss || r.final_loss < r.initial_loss);
    assert!(r.final_loss < r.initial_loss);
    assert!(r.test_accuracy.is_some());
}

#[test]
fn exploding_learning_rate_aborts_with_divergence() {
    let (train, _) = tiny_data();
    let mut m = common::small_model(19);
    let mut cfg = PretrainConfig::new(8, 40, 20);
    cfg.lr = LrSchedule {
        initial: 1e4,
        milestones: vec![],
        factor: 0.1,
    };
    cfg.momentum = 0.99;
    match pretrain_backbone(&mut m, &cfg, &train, None, None) {
        Err(DfsError::Divergence { loss, initial, .. }) => assert!(!(loss <= 10.0 * initial)),
        other => panic!("expected divergence, got {other:?}"),
    }
}
