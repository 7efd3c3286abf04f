mod common;

use dfs_core::backbone::BackboneConfig;
use dfs_core::data::{Split, SyntheticSpec};
use dfs_core::executor::{
    conv_flops, count_block_flops, forward_hard, forward_soft, static_mode, DecisionTrace, GateDrive, Routing,
};
use dfs_core::gate::{argmax_lowest_cost, GateConfig};
use dfs_core::ops::BnMode;
use dfs_core::trainer::plain_accuracy;
use dfs_core::{BitOption, DfsError, DfsModel, Graph, Tensor};
use proptest::prelude::*;

use BitOption::{Keep, Quant, Skip};

fn plain_logits(m: &mut DfsModel, x: &Tensor, mode: BnMode) -> Vec<f32> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = m.backbone.forward_plain(&mut g, &mut m.store, xv, mode).unwrap();
    g.data(y).to_vec()
}

fn one_hot_rows(m: &DfsModel, pick: impl Fn(usize, &[BitOption]) -> BitOption) -> Vec<Vec<f32>> {
    m.gated_blocks()
        .iter()
        .map(|&b| {
            let legal = m.legal_options(b);
            let want = pick(b, &legal);
            legal.iter().map(|&o| if o == want { 1.0 } else { 0.0 }).collect()
        })
        .collect()
}

fn soft(m: &mut DfsModel, x: &Tensor, mode: BnMode, rows: &[Vec<f32>]) -> (Vec<f32>, f32) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = forward_soft(&mut g, m, xv, mode, GateDrive::Fixed(rows)).unwrap();
    (g.data(out.logits).to_vec(), g.data(out.expected_cp)[0])
}

#[test]
fn one_hot_keep_reproduces_plain_logits_bit_exactly() {
    for mode in [BnMode::Eval, BnMode::Train] {
        let mut m = common::small_model(1);
        let x = common::random_images(4, 3, 8, 2);
        let rows = one_hot_rows(&m, |_, _| Keep);
        let mut reference = m.clone();
        let want = plain_logits(&mut reference, &x, mode);
        let (got, cp) = soft(&mut m, &x, mode, &rows);
        assert_eq!(got, want, "{mode:?}");
        assert_eq!(cp, 1.0);
    }
    let mut m = common::small_model(1);
    let x = common::random_images(4, 3, 8, 2);
    let want = plain_logits(&mut m.clone(), &x, BnMode::Eval);
    let all_keep = vec![Keep; m.gated_blocks().len()];
    let out = forward_hard(&mut m, &x, Routing::Static(&all_keep)).unwrap();
    assert_eq!(out.logits.data(), want.as_slice());
    assert!(out.realized_cp.iter().all(|&c| c == 1.0));
}

#[test]
fn one_hot_skip_passes_identity_blocks_through() {
    let mut m = common::small_model(3);
    let x = common::random_images(2, 3, 8, 4);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mut h = m.backbone.stem_forward(&mut g, &mut m.store, xv, BnMode::Eval).unwrap();
    for b in 0..m.backbone.blocks.len() {
        if m.backbone.blocks[b].has_identity_shortcut() {
            let y = m.backbone.block_forward(&mut g, &mut m.store, b, h, Skip, BnMode::Eval).unwrap();
            assert_eq!(g.data(y), g.data(h), "block {b}");
        } else {
            let err = m.backbone.block_forward(&mut g, &mut m.store, b, h, Skip, BnMode::Eval);
            assert!(matches!(err, Err(DfsError::Routing(_))));
        }
        h = m.backbone.block_forward(&mut g, &mut m.store, b, h, Keep, BnMode::Eval).unwrap();
    }

    // Soft mixture with all mass on Skip is the identity, and the cost is
    // the fixed part plus the projection blocks that cannot skip.
    let rows = one_hot_rows(&m, |_, legal| if legal.contains(&Skip) { Skip } else { Keep });
    let (_, cp) = soft(&mut m, &x, BnMode::Eval, &rows);
    let assignment: Vec<BitOption> = m
        .gated_blocks()
        .iter()
        .map(|&b| if m.legal_options(b).contains(&Skip) { Skip } else { Keep })
        .collect();
    assert!((cp as f64 - m.ledger.cp(&assignment)).abs() < 1e-6);
    let l = &m.ledger;
    assert_eq!(l.executed_cost(&vec![Skip; l.per_block_full_flops.len()]), 0.0);
    assert_eq!(l.cp(&vec![Skip; l.per_block_full_flops.len()]), l.fixed_fraction());
}

#[test]
fn uniform_gate_contributes_average_cost() {
    let mut m = common::small_model(5);
    let x = common::random_images(2, 3, 8, 6);
    let base_rows = one_hot_rows(&m, |_, _| Skip);
    let pos = 0;
    assert!(m.legal_options(m.gated_blocks()[pos]).contains(&Skip));
    // Every other block at its cheapest legal option.
    let mut rows: Vec<Vec<f32>> = base_rows
        .iter()
        .map(|r| if r.iter().any(|&v| v == 1.0) { r.clone() } else { vec![1.0, 0.0, 0.0] })
        .collect();
    let (_, before) = soft(&mut m, &x, BnMode::Eval, &rows);
    rows[pos] = vec![0.25; 4];
    let (_, after) = soft(&mut m, &x, BnMode::Eval, &rows);
    let full = m.ledger.per_block_full_flops[pos] as f64;
    let want = 0.25 * (0.0 + 1.0 / 16.0 + 0.25 + 1.0) * full / m.ledger.denominator as f64;
    assert!(((after - before) as f64 - want).abs() < 1e-6, "{} vs {want}", after - before);
}

#[test]
fn expected_cp_is_affine_in_each_gate_entry() {
    let mut m = common::small_model(7);
    let x = common::random_images(2, 3, 8, 8);
    let rows: Vec<Vec<f32>> = m
        .gated_blocks()
        .iter()
        .map(|&b| {
            let k = m.legal_options(b).len();
            vec![1.0 / k as f32; k]
        })
        .collect();
    let (_, base) = soft(&mut m, &x, BnMode::Eval, &rows);
    for pos in 0..rows.len() {
        let legal = m.legal_options(m.gated_blocks()[pos]);
        for (k, &opt) in legal.iter().enumerate() {
            let delta = 0.125f32;
            let mut moved = rows.clone();
            moved[pos][k] += delta;
            let (_, cp) = soft(&mut m, &x, BnMode::Eval, &moved);
            let want = delta as f64 * m.ledger.coefficient(pos, opt);
            assert!(((cp - base) as f64 - want).abs() < 1e-6, "block {pos} option {opt}");
        }
    }
}

#[test]
fn argmax_rule_and_tie_break() {
    assert_eq!(argmax_lowest_cost(&[0.1, 0.2, 0.3, 0.4]), 3);
    assert_eq!(argmax_lowest_cost(&[0.1, 0.4, 0.1, 0.4]), 1);
    assert_eq!(argmax_lowest_cost(&[0.3, 0.3, 0.2, 0.2]), 0);
}

/// 2·k²·Cin·Cout per output element, counted by visiting every output.
fn counted_conv_flops(c_in: usize, c_out: usize, k: usize, size_out: usize) -> u64 {
    let mut macs = 0u64;
    for _o in 0..c_out {
        for _y in 0..size_out {
            for _x in 0..size_out {
                for _c in 0..c_in {
                    macs += (k * k) as u64;
                }
            }
        }
    }
    2 * macs
}

#[test]
fn flop_counting_examples() {
    assert_eq!(conv_flops(16, 16, 3, 32, 32), 4_718_592);
    assert_eq!(counted_conv_flops(16, 16, 3, 32), 4_718_592);
    assert_eq!(conv_flops(1, 1, 1, 1, 1), 2);

    let m = DfsModel::new(BackboneConfig::default(), GateConfig::default(), 0).unwrap();
    let bb = &m.backbone;
    let proj = bb.blocks.iter().find(|b| !b.has_identity_shortcut()).unwrap();
    let twin = bb
        .blocks
        .iter()
        .find(|b| b.has_identity_shortcut() && b.stage == proj.stage)
        .unwrap();
    let proj_count = count_block_flops(proj, [proj.in_channels, proj.in_size, proj.in_size]).unwrap();
    let twin_first = conv_flops(twin.in_channels, twin.out_channels, 3, twin.in_size, twin.in_size);
    assert!(proj_count > twin_first);
    assert!(count_block_flops(proj, [proj.in_channels + 1, proj.in_size, proj.in_size]).is_err());
}

/// Independent tally of the default-shaped network: per stage channel and
/// resolution, counted conv by conv.
fn hand_tally(n: usize, c: [usize; 3], size: usize, classes: usize) -> (u64, Vec<u64>) {
    let stem = counted_conv_flops(3, c[0], 3, size);
    let mut blocks = Vec::new();
    let mut in_c = c[0];
    let mut s = size;
    for (stage, &out_c) in c.iter().enumerate() {
        for j in 0..n {
            let down = stage > 0 && j == 0;
            let so = if down { s / 2 } else { s };
            let mut f = counted_conv_flops(in_c, out_c, 3, so) + counted_conv_flops(out_c, out_c, 3, so);
            if down {
                f += counted_conv_flops(in_c, out_c, 1, so);
            }
            blocks.push(f);
            in_c = out_c;
            s = so;
        }
    }
    (stem + 2 * (c[2] * classes) as u64, blocks)
}

#[test]
fn all_q8_realized_cp_matches_hand_tally() {
    let cfg = BackboneConfig::default();
    let mut m = DfsModel::new(cfg.clone(), GateConfig::default(), 0).unwrap();
    let (stem_head, blocks) = hand_tally(cfg.n_per_group, cfg.channels, cfg.image_size, cfg.num_classes);
    let fixed = stem_head + blocks[0];
    let gated: u64 = blocks[1..].iter().sum();
    assert_eq!(m.ledger.fixed_flops, fixed);
    assert_eq!(m.ledger.per_block_full_flops, blocks[1..].to_vec());
    assert_eq!(m.ledger.denominator, fixed + gated);
    let want = (fixed as f64 + gated as f64 / 16.0) / (fixed + gated) as f64;
    let x = common::random_images(1, 3, 32, 1);
    let assignment = vec![Quant(8); m.gated_blocks().len()];
    let out = forward_hard(&mut m, &x, Routing::Static(&assignment)).unwrap();
    assert_eq!(out.realized_cp[0], want);
}

#[test]
fn static_mode_validation_and_baselines() {
    let mut m = common::small_model(9);
    let n = m.gated_blocks().len();
    assert!(matches!(static_mode(&mut m, vec![Keep; n - 1]), Err(DfsError::Config(_))));
    let proj_pos = m
        .gated_blocks()
        .iter()
        .position(|&b| !m.backbone.blocks[b].has_identity_shortcut())
        .unwrap();
    let mut bad = vec![Keep; n];
    bad[proj_pos] = Skip;
    assert!(matches!(static_mode(&mut m, bad), Err(DfsError::Config(_))));

    let spec = SyntheticSpec {
        image_size: 8,
        num_classes: 4,
        samples_per_class: 4,
        test_samples_per_class: 30,
        ..Default::default()
    };
    let test = spec.generate(Split::Test).unwrap();
    let plain = plain_accuracy(&mut m, &test, 64).unwrap();
    let keep = static_mode(&mut m, vec![Keep; n]).unwrap().evaluate(&test, 64).unwrap();
    assert_eq!(keep.accuracy, plain);
    assert_eq!(keep.mean_cp, 1.0);
    let q31 = static_mode(&mut m, vec![Quant(31); n]).unwrap().evaluate(&test, 64).unwrap();
    assert!((q31.accuracy - keep.accuracy).abs() <= 0.005);
}

#[test]
fn soft_and_hard_agree_when_gates_are_confident() {
    let mut m = common::small_model(11);
    // Push the gate's output bias hard toward Keep.
    let ob = m.gate.out_bias;
    let k = m.options().len();
    m.store.get_mut(ob).data_mut()[k - 1] = 12.0;
    let x = common::random_images(5, 3, 8, 12);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = forward_soft(&mut g, &mut m, xv, BnMode::Eval, GateDrive::Learned).unwrap();
    for &p in &out.probs {
        let rows = g.data(p).chunks(g.shape(p)[1]);
        for row in rows {
            assert!(row.iter().cloned().fold(0.0, f32::max) > 0.99);
        }
    }
    let soft_logits = g.data(out.logits).to_vec();
    let hard = forward_hard(&mut m, &x, Routing::Learned).unwrap();
    for (a, b) in soft_logits.iter().zip(hard.logits.data()) {
        assert!((a - b).abs() <= 1e-2, "{a} vs {b}");
    }
}

#[test]
fn learned_gate_rows_are_simplex_and_projection_drops_skip() {
    let mut m = common::small_model(13);
    let x = common::random_images(3, 3, 8, 14);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let out = forward_soft(&mut g, &mut m, xv, BnMode::Train, GateDrive::Learned).unwrap();
    for (p, legal) in out.probs.iter().zip(&out.legal) {
        assert_eq!(g.shape(*p)[1], legal.len());
        for row in g.data(*p).chunks(legal.len()) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() <= 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
    let k = m.options().len();
    assert!(out.legal.iter().any(|l| l.len() == k - 1 && !l.contains(&Skip)));
}

#[test]
fn nan_in_mixture_names_the_block() {
    let mut m = common::small_model(15);
    let mut x = common::random_images(2, 3, 8, 16);
    x.data_mut()[0] = f32::NAN;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let err = forward_soft(&mut g, &mut m, xv, BnMode::Eval, GateDrive::Learned).unwrap_err();
    let first = m.gated_blocks()[0];
    assert!(matches!(err, DfsError::Numeric { block, .. } if block == first), "{err:?}");
}

#[test]
fn trace_csv_round_trip_and_errors() {
    let mut m = common::small_model(17);
    let spec = SyntheticSpec {
        image_size: 8,
        num_classes: 4,
        samples_per_class: 2,
        test_samples_per_class: 3,
        ..Default::default()
    };
    let test = spec.generate(Split::Test).unwrap();
    let res = dfs_core::executor::evaluate(&mut m, &test, Routing::Learned, 5).unwrap();
    let mut buf = Vec::new();
    res.trace.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "input_id,block_index,option,prob_skip,prob_q8,prob_q16,prob_keep,realized_cp,correct"
    );
    assert_eq!(text.lines().count(), 1 + test.len() * m.gated_blocks().len());
    let back = DecisionTrace::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.options, res.trace.options);
    for (a, b) in back.inputs.iter().zip(&res.trace.inputs) {
        assert_eq!(a.input_id, b.input_id);
        assert_eq!(a.decisions, b.decisions);
        assert_eq!(a.realized_cp, b.realized_cp);
        assert_eq!(a.correct(), b.correct());
    }

    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[3] = lines[3].replacen(',', ",x", 1);
    let broken = lines.join("\n");
    match DecisionTrace::read_csv(broken.as_bytes()) {
        Err(DfsError::Input(msg)) => assert!(msg.contains("line 4"), "{msg}"),
        other => panic!("expected an input error, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cp_stays_within_bounds(seed in 0u64..500, raw in prop::collection::vec(0.0f32..1.0, 64)) {
        let mut m = common::small_model(seed);
        let floor = m.ledger.fixed_fraction();
        let mut it = raw.iter().cycle();
        let rows: Vec<Vec<f32>> = m
            .gated_blocks()
            .iter()
            .map(|&b| {
                let k = m.legal_options(b).len();
                let v: Vec<f32> = (0..k).map(|_| *it.next().unwrap() + 1e-3).collect();
                let s: f32 = v.iter().sum();
                v.iter().map(|x| x / s).collect()
            })
            .collect();
        let x = common::random_images(2, 3, 8, seed);
        let (_, cp) = soft(&mut m, &x, BnMode::Eval, &rows);
        prop_assert!(cp as f64 >= floor - 1e-6 && cp <= 1.0 + 1e-6);
        let hard = forward_hard(&mut m, &x, Routing::Learned).unwrap();
        for c in hard.realized_cp {
            prop_assert!(c >= floor && c <= 1.0);
        }
        let l = &m.ledger;
        prop_assert_eq!(l.denominator, l.fixed_flops + l.per_block_full_flops.iter().sum::<u64>());
    }
}
