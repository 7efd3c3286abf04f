#![allow(dead_code)]

use dfs_core::backbone::BackboneConfig;
use dfs_core::executor::{forward_soft, GateDrive};
use dfs_core::ops::BnMode;
use dfs_core::params::EntryKind;
use dfs_core::BitOption;
use dfs_core::gate::GateConfig;
use dfs_core::{DfsModel, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Analytic and central-difference derivative at one coordinate.
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Smallest denominator of the relative gap.
    pub floor: f64,
}

/// Relative gap with the denominator floored at `FLOOR`, so coordinates
/// whose true derivative is ~0 are judged on an absolute 1e-5 scale.
pub const FLOOR: f64 = 1e-2;

impl Probe {
    pub fn rel_err(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(self.floor)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Checks `f(inputs)` against central differences through the scalar
/// probe loss `Σ r·f` with fixed random weights `r`. `f` is rebuilt on a
/// fresh graph for every evaluation.
pub fn grad_check<F>(inputs: &[Tensor], probes: usize, eps: f32, seed: u64, f: F) -> Vec<Probe>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut r = rng(seed);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let y = f(&mut g, &vars);
    let weights = Tensor::uniform(g.shape(y), 1.0, &mut r);
    let wv = g.constant(weights.clone());
    let prod = g.mul(y, wv).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let grads: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or(vec![0.0; t.numel()], <[f32]>::to_vec))
        .collect();
    let eval = |perturbed: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars);
        dot(g.data(y), weights.data())
    };
    (0..probes)
        .map(|_| {
            let input = r.random_range(0..inputs.len());
            let index = r.random_range(0..inputs[input].numel());
            let numeric = richardson(eps, |d| {
                let mut moved = inputs.to_vec();
                let v = &mut moved[input].data_mut()[index];
                *v += d;
                eval(&moved)
            });
            Probe {
                input,
                index,
                analytic: grads[input][index] as f64,
                numeric,
                floor: FLOOR,
            }
        })
        .collect()
}

/// Central differences at `eps` and `eps/2`, combined to cancel the
/// second-order truncation term. `f(d)` evaluates with the coordinate
/// shifted by `d`.
pub fn richardson(eps: f32, f: impl Fn(f32) -> f64) -> f64 {
    let central = |h: f32| (f(h) - f(-h)) / (2.0 * h as f64);
    (4.0 * central(eps / 2.0) - central(eps)) / 3.0
}

/// Random tensor with entries bounded away from zero, keeping ReLU and
/// max-abs kinks outside a finite-difference step.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let mut t = Tensor::randn(shape, 1.0, &mut r);
    for v in t.data_mut() {
        if v.abs() < 0.2 {
            *v = if *v < 0.0 { -0.2 - v.abs() } else { 0.2 + v.abs() };
        }
    }
    t
}

/// Backbone with one block per group: block 0 (identity) is gated along
/// with the two projection blocks.
pub fn tiny_backbone(image_size: usize) -> BackboneConfig {
    BackboneConfig {
        n_per_group: 1,
        channels: [3, 4, 4],
        num_classes: 3,
        always_full_prefix: 0,
        image_size,
        ..Default::default()
    }
}

/// Two blocks per group with the standard always-full prefix.
pub fn small_backbone(image_size: usize) -> BackboneConfig {
    BackboneConfig {
        n_per_group: 2,
        channels: [4, 8, 8],
        num_classes: 4,
        always_full_prefix: 1,
        image_size,
        ..Default::default()
    }
}

pub fn tiny_model(seed: u64) -> DfsModel {
    DfsModel::new(tiny_backbone(8), GateConfig::default(), seed).unwrap()
}

pub fn small_model(seed: u64) -> DfsModel {
    DfsModel::new(small_backbone(8), GateConfig::default(), seed).unwrap()
}

pub fn random_images(n: usize, c: usize, size: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::randn(&[n, c, size, size], 1.0, &mut r)
}

/// Gated model with every normalization shifted to +2 and scaled to 0.5, so
/// pre-activations sit about four standard deviations above the ReLU kink.
pub fn smooth_point_model(options: Vec<BitOption>, seed: u64) -> DfsModel {
    let gate = GateConfig { hidden: 6, options };
    let mut m = DfsModel::new(tiny_backbone(8), gate, seed).unwrap();
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        let name = m.store.name(id).to_string();
        if name.ends_with("bn.beta") {
            m.store.get_mut(id).data_mut().fill(2.0);
        } else if name.ends_with("bn.gamma") {
            m.store.get_mut(id).data_mut().fill(0.5);
        }
    }
    m
}

/// Directional central-difference check of a full soft forward pass
/// (three gated blocks, the first with four options, learned gate, batch
/// statistics). Each probe is a random direction over the input images and
/// every trainable parameter; the probe loss mixes logits and expected cp.
/// A directional derivative is N(0, ‖g‖²) over random directions, so the
/// floor is `FLOOR·‖g‖`: near-cancelling directions are judged against
/// the gradient's own scale.
///
/// Bitwidths are high enough that rounding is below `f32` resolution, so
/// the straight-through gradient coincides with the true derivative.
pub fn soft_forward_check(probes: usize, eps: f32, seed: u64) -> Vec<Probe> {
    let options = vec![BitOption::Skip, BitOption::Quant(28), BitOption::Quant(30), BitOption::Keep];
    let base = smooth_point_model(options, seed);
    let x = random_images(3, 3, 8, seed + 1);
    let mut r = rng(seed + 2);
    let classes = base.backbone.config.num_classes;
    let weights = Tensor::uniform(&[3, classes], 1.0, &mut r);
    let cp_weight = 4.0f64;
    let params: Vec<_> = base.store.ids().filter(|&id| base.store.kind(id) == EntryKind::Param).collect();
    let loss_of = |model: &DfsModel, x: &Tensor| {
        let mut m = model.clone();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = forward_soft(&mut g, &mut m, xv, BnMode::Train, GateDrive::Learned).unwrap();
        dot(g.data(out.logits), weights.data()) + cp_weight * g.data(out.expected_cp)[0] as f64
    };

    let mut m = base.clone();
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let out = forward_soft(&mut g, &mut m, xv, BnMode::Train, GateDrive::Learned).unwrap();
    let wv = g.constant(weights.clone());
    let prod = g.mul(out.logits, wv).unwrap();
    let l1 = g.sum(prod);
    let l2 = g.scale(out.expected_cp, cp_weight as f32);
    let loss = g.add(l1, l2).unwrap();
    g.backward(loss).unwrap();
    let x_grad = g.grad(xv).unwrap().to_vec();
    m.store.zero_grads();
    g.accumulate_param_grads(&mut m.store);
    let mut norm_sq = dot(&x_grad, &x_grad);
    for &id in &params {
        if let Some(gr) = &m.store.get(id).grad {
            norm_sq += dot(gr, gr);
        }
    }
    let floor = FLOOR * norm_sq.sqrt();

    (0..probes)
        .map(|i| {
            let dx = Tensor::randn(x.shape(), 1.0, &mut r);
            let dp: Vec<Tensor> = params
                .iter()
                .map(|&id| Tensor::randn(base.store.get(id).shape(), 1.0, &mut r))
                .collect();
            let mut analytic = dot(dx.data(), &x_grad);
            for (d, &id) in dp.iter().zip(&params) {
                if let Some(gr) = &m.store.get(id).grad {
                    analytic += dot(d.data(), gr);
                }
            }
            let numeric = richardson(eps, |h| {
                let mut xp = x.clone();
                xp.data_mut().iter_mut().zip(dx.data()).for_each(|(a, b)| *a += h * b);
                let mut mp = base.clone();
                for (d, &id) in dp.iter().zip(&params) {
                    mp.store.get_mut(id).data_mut().iter_mut().zip(d.data()).for_each(|(a, b)| *a += h * b);
                }
                loss_of(&mp, &xp)
            });
            Probe {
                input: 0,
                index: i,
                analytic,
                numeric,
                floor,
            }
        })
        .collect()
}
