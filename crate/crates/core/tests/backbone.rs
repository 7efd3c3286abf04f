mod common;

use dfs_core::backbone::{Backbone, BackboneConfig};
use dfs_core::data::{standardize_pair, Split, SyntheticSpec};
use dfs_core::ops::BnMode;
use dfs_core::params::EntryKind;
use dfs_core::{BitOption, DfsError, Graph, ParamStore, Tensor};

fn build(cfg: BackboneConfig, seed: u64) -> (Backbone, ParamStore) {
    let mut store = ParamStore::new();
    let bb = Backbone::new(cfg, &mut store, &mut common::rng(seed)).unwrap();
    (bb, store)
}

fn trainable(store: &ParamStore, prefix: &str) -> usize {
    store
        .ids()
        .filter(|&id| store.kind(id) == EntryKind::Param && store.name(id).starts_with(prefix))
        .map(|id| store.get(id).numel())
        .sum()
}

/// Per-layer count: bias-free convs, two affine scalars per normalized
/// channel, 1×1 projections where the width or resolution changes, and the
/// linear head.
fn tally(n: usize, widths: [usize; 3], classes: usize) -> usize {
    let conv_bn = |cin: usize, cout: usize, k: usize| cin * cout * k * k + 2 * cout;
    let mut total = conv_bn(3, widths[0], 3);
    let mut cin = widths[0];
    for (stage, &w) in widths.iter().enumerate() {
        for j in 0..n {
            total += conv_bn(cin, w, 3) + conv_bn(w, w, 3);
            if cin != w || (stage > 0 && j == 0) {
                total += conv_bn(cin, w, 1);
            }
            cin = w;
        }
    }
    total + widths[2] * classes + classes
}

#[test]
fn parameter_count_for_six_blocks_per_group() {
    let (bb, store) = build(BackboneConfig::default(), 0);
    assert_eq!(bb.config.n_per_group, 6);
    assert_eq!(bb.blocks.len(), 18);
    assert_eq!(tally(6, [16, 32, 64], 10), 564_122);
    assert_eq!(trainable(&store, "backbone."), 564_122);
    for n in [1, 2, 3] {
        let cfg = BackboneConfig { n_per_group: n, ..Default::default() };
        let (_, store) = build(cfg, 1);
        assert_eq!(trainable(&store, "backbone."), tally(n, [16, 32, 64], 10), "n = {n}");
    }
}

#[test]
fn projections_sit_exactly_where_shape_changes() {
    let (bb, _) = build(BackboneConfig::default(), 0);
    let with_proj: Vec<usize> = bb.blocks.iter().filter(|b| b.projection.is_some()).map(|b| b.index).collect();
    assert_eq!(with_proj, vec![6, 12]);
    for b in &bb.blocks {
        assert_eq!(b.has_identity_shortcut(), b.stride == 1 && b.in_channels == b.out_channels);
    }
    assert_eq!(bb.options_for(6, &dfs_core::quant::default_options()).len(), 3);
    assert_eq!(bb.options_for(5, &dfs_core::quant::default_options()).len(), 4);
}

#[test]
fn gated_count_and_prefix_validation() {
    let cfg = BackboneConfig::default();
    assert_eq!(cfg.num_gated(), 17);
    assert_eq!(cfg.always_full_prefix, 1);
    let bad = BackboneConfig { n_per_group: 1, always_full_prefix: 3, ..Default::default() };
    assert!(matches!(bad.validate(), Err(DfsError::Config(_))));
    let zero = BackboneConfig { n_per_group: 0, ..Default::default() };
    assert!(zero.validate().is_err());
}

#[test]
fn skip_returns_the_input_and_is_refused_on_projections() {
    let (bb, mut store) = build(common::small_backbone(8), 2);
    let x = common::random_images(2, 4, 8, 3);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = bb.block_forward(&mut g, &mut store, 1, xv, BitOption::Skip, BnMode::Train).unwrap();
    assert_eq!(g.data(y), x.data());
    let proj = bb.blocks.iter().find(|b| b.projection.is_some()).unwrap().index;
    let r = bb.block_forward(&mut g, &mut store, proj, xv, BitOption::Skip, BnMode::Eval);
    assert!(matches!(r, Err(DfsError::Routing(_))));
}

#[test]
fn zero_residual_branch_reduces_to_relu_of_the_input() {
    let (bb, mut store) = build(common::small_backbone(8), 4);
    for name in ["backbone.blocks.1.conv1.weight", "backbone.blocks.1.conv2.weight"] {
        let id = store.find(name).unwrap();
        store.get_mut(id).data_mut().fill(0.0);
    }
    let x = common::random_images(2, 4, 8, 5);
    let relu: Vec<f32> = x.data().iter().map(|&v| v.max(0.0)).collect();
    for mode in [BnMode::Eval, BnMode::Train] {
        for opt in [BitOption::Keep, BitOption::Quant(8)] {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = bb.block_forward(&mut g, &mut store, 1, xv, opt, mode).unwrap();
            assert_eq!(g.data(y), relu.as_slice(), "{mode:?} {opt}");
        }
    }
}

#[test]
fn sixteen_bits_stay_close_to_full_precision() {
    let (bb, mut store) = build(BackboneConfig::default(), 6);
    let x = common::random_images(2, 16, 32, 7);
    let run = |store: &mut ParamStore, opt| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = bb.block_forward(&mut g, store, 1, xv, opt, BnMode::Eval).unwrap();
        g.data(y).to_vec()
    };
    let full = run(&mut store, BitOption::Keep);
    let q = run(&mut store, BitOption::Quant(16));
    let diff: f64 = full.iter().zip(&q).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = full.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    assert!(diff / norm <= 0.05, "relative deviation {}", diff / norm);
    assert_ne!(full, q);
}

#[test]
fn stem_and_head_shapes() {
    let (bb, mut store) = build(BackboneConfig::default(), 8);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3, 32, 32]));
    let s = bb.stem_forward(&mut g, &mut store, x, BnMode::Eval).unwrap();
    assert_eq!(g.shape(s), &[2, 16, 32, 32]);
    let feats = g.constant(Tensor::zeros(&[2, 64, 8, 8]));
    let logits = bb.head_forward(&mut g, &mut store, feats).unwrap();
    assert_eq!(g.shape(logits), &[2, 10]);
    let wrong = g.constant(Tensor::zeros(&[2, 3, 28, 28]));
    assert!(matches!(bb.stem_forward(&mut g, &mut store, wrong, BnMode::Eval), Err(DfsError::Shape { .. })));
    assert!(matches!(bb.forward_plain(&mut g, &mut store, wrong, BnMode::Eval), Err(DfsError::Shape { .. })));
}

#[test]
fn zero_input_and_zero_head_give_zero_logits() {
    let (bb, mut store) = build(BackboneConfig::default(), 9);
    store.get_mut(bb.head_weight).data_mut().fill(0.0);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 3, 32, 32]));
    let y = bb.forward_plain(&mut g, &mut store, x, BnMode::Eval).unwrap();
    assert!(g.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn untrained_network_is_near_uniform() {
    let spec = SyntheticSpec {
        samples_per_class: 13,
        test_samples_per_class: 1,
        ..Default::default()
    };
    let mut train = spec.generate(Split::Train).unwrap();
    let mut test = spec.generate(Split::Test).unwrap();
    standardize_pair(&mut train, &mut test);
    let idx: Vec<usize> = (0..128).collect();
    let (x, labels) = train.batch(&idx, None::<&mut rand_chacha::ChaCha8Rng>);
    let (bb, mut store) = build(BackboneConfig::default(), 10);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let logits = bb.forward_plain(&mut g, &mut store, xv, BnMode::Train).unwrap();
    assert_eq!(g.shape(logits), &[128, 10]);
    let ce = g.cross_entropy(logits, &labels).unwrap();
    let ce = g.value(ce).data()[0] as f64;
    assert!((ce - 10f64.ln()).abs() <= 0.1, "cross-entropy {ce}");
}
