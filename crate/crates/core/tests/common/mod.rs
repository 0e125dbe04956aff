//! Helpers shared by the gradient, attention and acceptance suites.
#![allow(dead_code)]

use graphnf::autodiff::{Gradients, OpKind, ParamId, ParamStore, Tape, Tensor};
use graphnf::dataset::ring_grid;
use graphnf::features::{FeatureKind, Standardizer};
use graphnf::graphs::{Adjacency, SpatialLayout, SpatialParams};
use graphnf::model_p::{GraphCache, ModelP, PDims, PInput, PSetup, Wiring};
use graphnf::model_u::{ModelU, SpatialStencil, UDims};
use graphnf::nn::{lsd_loss, Ctx, GatDims, GatLayer, GraphTensors, GraphVars, Normalizer, Trainable};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `sum(op(inputs) ⊙ r)` for a fixed random `r`, so every output element
/// contributes to the scalar.
fn probe(op: &OpKind, inputs: &[Tensor], r: Option<&Tensor>) -> (f64, Vec<Vec<f64>>, Tensor) {
    let mut t = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| t.variable(x.clone())).collect();
    let y = t.apply(op.clone(), &vars).unwrap();
    let out = t.value(y).clone();
    let r = r.cloned().unwrap_or_else(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let data = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(out.shape().to_vec(), data).unwrap()
    });
    let rv = t.constant(r.clone());
    let p = t.mul(y, rv).unwrap();
    let s = t.sum(p).unwrap();
    let value = t.value(s).data()[0];
    t.backward(s).unwrap();
    let grads = vars.iter().map(|v| t.grad(*v).map(<[f64]>::to_vec).unwrap_or_default()).collect();
    (value, grads, r)
}

/// Worst relative error of the tape gradient against central differences
/// over every input element.
pub fn op_gradient_error(op: OpKind, inputs: Vec<Tensor>) -> f64 {
    let (_, analytic, r) = probe(&op, &inputs, None);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let fd = (probe(&op, &plus, Some(&r)).0 - probe(&op, &minus, Some(&r)).0) / (2.0 * h);
            let a = analytic[k][i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1.0));
        }
    }
    worst
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// One representative case per op, with inputs kept off activation kinks
/// and inside the domains of `log` and `sqrt`.
pub fn op_cases(seed: u64) -> Vec<(OpKind, Vec<Tensor>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |s: &[usize]| random_tensor(s, -2.0, 2.0, &mut rng);
    let (a, b, c, row, col) = (t(&[3, 4]), t(&[4, 2]), t(&[3, 4]), t(&[1, 4]), t(&[3, 1]));
    let (u, v, nt) = (t(&[3]), t(&[4]), t(&[5, 4]));
    let (x, w, y) = (t(&[3, 4]), t(&[3, 2, 4]), t(&[2, 8]));
    let off: Tensor =
        Tensor::new(vec![3, 4], a.data().iter().map(|z| if z.abs() < 0.05 { z + 0.1 } else { *z }).collect()).unwrap();
    let pos = Tensor::new(vec![3, 4], a.data().iter().map(|z| z.abs() + 0.2).collect()).unwrap();
    vec![
        (OpKind::MatMul, vec![a.clone(), b]),
        (OpKind::MatMulNt, vec![a.clone(), nt]),
        (OpKind::Transpose, vec![a.clone()]),
        (OpKind::Add, vec![a.clone(), row.clone()]),
        (OpKind::Sub, vec![col.clone(), a.clone()]),
        (OpKind::Mul, vec![a.clone(), c.clone()]),
        (OpKind::Mul, vec![col, row]),
        (OpKind::Scale(-1.7), vec![a.clone()]),
        (OpKind::Shift(0.3), vec![a.clone()]),
        (OpKind::Concat { axis: 1 }, vec![a.clone(), c]),
        (OpKind::Slice { axis: 1, start: 1, end: 3 }, vec![a.clone()]),
        (OpKind::Reshape { shape: vec![6, 2] }, vec![a.clone()]),
        (OpKind::Exp, vec![a.clone()]),
        (OpKind::Log, vec![pos.clone()]),
        (OpKind::Sqrt, vec![pos]),
        (OpKind::Square, vec![a.clone()]),
        (OpKind::Sum, vec![a.clone()]),
        (OpKind::Mean, vec![a.clone()]),
        (OpKind::SumAxis { axis: 0 }, vec![a.clone()]),
        (OpKind::Outer, vec![u, v]),
        (OpKind::Elu { alpha: 1.0 }, vec![off.clone()]),
        (OpKind::LeakyRelu { slope: 0.01 }, vec![off]),
        (OpKind::Softmax { axis: 1 }, vec![a]),
        (OpKind::ConvTranspose1d { stride: 2, padding: 1 }, vec![x, w.clone()]),
        (OpKind::Conv1d { stride: 2, padding: 1 }, vec![y, w]),
    ]
}

pub fn small_p(wiring: Wiring, seed: u64) -> ModelP {
    let dims = PDims {
        k: 16,
        gat1_heads: 2,
        gat1_head_dim: 4,
        gat2_dim: 6,
        clue_dim: 5,
        fusion_heads: 2,
        fusion_head_dim: 3,
        decoder_hidden: 8,
        rff_features: 4,
        rff_sigma: 0.5,
    };
    let setup = PSetup {
        retrieval: FeatureKind::Ild,
        m: 3,
        clue_feature: FeatureKind::Ild,
        measured: vec![0, 1, 2],
        clue_standardizer: Standardizer::identity(3),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = Normalizer { mean: (0..32).map(|_| rng.random_range(-10.0..0.0)).collect(), scale: 4.0 };
    ModelP::new(dims, wiring, setup, norm, seed).unwrap()
}

type Loss<'a> = dyn Fn(&ParamStore, Trainable) -> (f64, Option<Gradients>) + 'a;

/// Samples `samples` scalar parameters and compares their tape gradients
/// with central differences; returns the count and the worst relative error.
fn sampled_gradient_error(loss: &Loss, store: &ParamStore, samples: usize, seed: u64) -> (usize, f64) {
    let grads = loss(store, Trainable::All).1.unwrap();
    let slots: Vec<(ParamId, usize)> =
        store.ids().flat_map(|id| (0..store.get(id).len()).map(move |i| (id, i))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let (id, i) = slots[rng.random_range(0..slots.len())];
        let mut s = store.clone();
        s.get_mut(id).data_mut()[i] += h;
        let up = loss(&s, Trainable::Nothing).0;
        s.get_mut(id).data_mut()[i] -= 2.0 * h;
        let down = loss(&s, Trainable::Nothing).0;
        let fd = (up - down) / (2.0 * h);
        let a = grads.get(id).map_or(0.0, |g| g[i]);
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
    }
    (samples, worst)
}

fn lsd_of(ctx: &mut Ctx, y: graphnf::autodiff::Var, truth: &[f64], train: bool) -> (f64, Option<Gradients>) {
    let l = lsd_loss(ctx, y, truth).unwrap();
    let v = ctx.tape.value(l).data()[0];
    if !train {
        return (v, None);
    }
    ctx.tape.backward(l).unwrap();
    (v, Some(ctx.tape.param_grads(ctx.store)))
}

/// LSD through decode∘encode of the personalization network.
pub fn p_gradient_error(wiring: Wiring, samples: usize) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..32).map(|_| rng.random_range(-20.0..5.0)).collect()).collect();
    let clues: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let target: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let truth: Vec<f64> = (0..32).map(|_| rng.random_range(-20.0..5.0)).collect();
    let model = small_p(wiring, 3);
    let input =
        PInput { neighbors: rows.iter().map(|r| r.as_slice()).collect(), neighbor_clues: clues, target_clue: target };
    let graph = GraphCache::default().complete(3).clone();
    let loss = |store: &ParamStore, tr: Trainable| {
        let train = tr == Trainable::All;
        let mut ctx = Ctx::new(store, tr);
        let y = model.forward(&mut ctx, &input, &graph).unwrap();
        lsd_of(&mut ctx, y, &truth, train)
    };
    sampled_gradient_error(&loss, &model.store, samples, 5)
}

/// LSD through the upsampling network on one leave-one-out graph.
pub fn u_gradient_error(samples: usize) -> (usize, f64) {
    let dirs = ring_grid(60);
    let params = SpatialParams { delta_d: 40.0, ..SpatialParams::default() };
    let stencils = SpatialStencil::leave_one_out(&dirs, &params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let field: Vec<Vec<f64>> = (0..60).map(|_| (0..16).map(|_| rng.random_range(-20.0..5.0)).collect()).collect();
    let norm = Normalizer::fit(field.iter().map(|r| r.as_slice()));
    let model = ModelU::new(UDims { k: 8, gat1_heads: 2, gat1_head_dim: 4, gat2_dim: 16 }, params, norm, 4).unwrap();
    let s = &stencils[7];
    let rows: Vec<&[f64]> = s.layout.neighbors.iter().map(|&i| field[i].as_slice()).collect();
    let loss = |store: &ParamStore, tr: Trainable| {
        let train = tr == Trainable::All;
        let mut ctx = Ctx::new(store, tr);
        let y = model.forward(&mut ctx, &rows, s).unwrap();
        lsd_of(&mut ctx, y, &field[7], train)
    };
    sampled_gradient_error(&loss, &model.store, samples, 6)
}

pub fn random_graph(n: usize, rng: &mut ChaCha8Rng) -> Adjacency {
    let mut adj = Adjacency::empty(n);
    for i in 0..n {
        adj.connect(i, i, 1.0);
        for j in 0..i {
            if rng.random_bool(0.6) {
                adj.connect(i, j, rng.random_range(0.05..1.0));
            }
        }
    }
    adj
}

pub fn random_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

pub fn gat_run(gat: &GatLayer, store: &ParamStore, x: &[Vec<f64>], adj: &Adjacency) -> (Tensor, Vec<Tensor>) {
    let mut ctx = Ctx::new(store, Trainable::Nothing);
    let g = GraphVars::bind(&mut ctx, &GraphTensors::new(adj));
    let xv = ctx.constant(Tensor::from_rows(x).unwrap());
    let (out, alphas) = gat.forward_with_attention(&mut ctx, xv, &g).unwrap();
    (ctx.tape.value(out).clone(), alphas.iter().map(|a| ctx.tape.value(*a).clone()).collect())
}

/// Largest `|Σ_j α_ij − 1|` over heads and nodes, and whether any
/// non-edge received weight.
pub fn attention_row_error(seed: u64, n: usize, heads: usize) -> (f64, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let gat = GatLayer::new(&mut store, "g", GatDims { heads, d_in: 5, d_head: 3 }, &mut rng);
    let adj = random_graph(n, &mut rng);
    let (_, alphas) = gat_run(&gat, &store, &random_rows(n, 5, &mut rng), &adj);
    let mut worst = 0.0f64;
    let mut leaked = false;
    for a in &alphas {
        for i in 0..n {
            worst = worst.max((a.row(i).iter().sum::<f64>() - 1.0).abs());
            leaked |= a.row(i).iter().enumerate().any(|(j, v)| adj.weight(i, j).is_none() && *v != 0.0);
        }
    }
    (worst, leaked)
}

/// Largest deviation between permuted outputs and outputs of permuted inputs.
pub fn gat_equivariance_error(seed: u64, n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let gat = GatLayer::new(&mut store, "g", GatDims { heads: 3, d_in: 4, d_head: 2 }, &mut rng);
    let adj = random_graph(n, &mut rng);
    let x = random_rows(n, 4, &mut rng);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let xp: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
    let (y, _) = gat_run(&gat, &store, &x, &adj);
    let (yp, _) = gat_run(&gat, &store, &xp, &adj.permuted(&perm));
    perm.iter()
        .enumerate()
        .flat_map(|(i, &src)| yp.row(i).iter().zip(y.row(src)).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest change of the pooled feature or the prediction under node
/// reordering, over all wirings and a few orders.
pub fn encode_permutation_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = random_rows(5, 32, &mut rng);
    let clues = random_rows(5, 5, &mut rng);
    let target: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut worst = 0.0f64;
    for wiring in [Wiring::Full, Wiring::ClueNoFusion, Wiring::NoClueNoFusion] {
        let model = small_p(wiring, seed ^ 0x5a);
        let graph = GraphCache::default().complete(5).clone();
        let run = |order: &[usize]| {
            let input = PInput {
                neighbors: order.iter().map(|&i| rows[i].as_slice()).collect(),
                neighbor_clues: order.iter().map(|&i| clues[i].clone()).collect(),
                target_clue: target.clone(),
            };
            let mut ctx = Ctx::new(&model.store, Trainable::Nothing);
            let f = model.encode(&mut ctx, &input, &graph).unwrap();
            let f = ctx.tape.value(f).data().to_vec();
            (f, model.predict(&input, &mut GraphCache::default()).unwrap())
        };
        let (f0, y0) = run(&[0, 1, 2, 3, 4]);
        let mut order: Vec<usize> = (0..5).collect();
        for _ in 0..3 {
            order.shuffle(&mut rng);
            let (f, y) = run(&order);
            worst = worst.max(max_diff(&f0, &f)).max(max_diff(&y0, &y));
        }
    }
    worst
}

/// Largest change of the upsampler output when the neighbor list is
/// enumerated in a different order.
pub fn forward_u_permutation_error(seed: u64) -> f64 {
    let dirs = ring_grid(80);
    let params = SpatialParams { delta_d: 35.0, ..SpatialParams::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = random_rows(80, 16, &mut rng);
    let model = ModelU::new(
        UDims { k: 8, gat1_heads: 2, gat1_head_dim: 4, gat2_dim: 8 },
        params,
        Normalizer::identity(16),
        seed,
    )
    .unwrap();
    let mut worst = 0.0f64;
    for target in [0, 17, 40, 79] {
        let base = SpatialLayout::around(&dirs, dirs[target], &params, true).unwrap();
        let run = |neighbors: Vec<usize>| {
            let stencil =
                SpatialStencil::new(SpatialLayout::new(&dirs, neighbors.clone(), dirs[target], &params).unwrap());
            let rows: Vec<&[f64]> = neighbors.iter().map(|&i| field[i].as_slice()).collect();
            model.predict(&rows, &stencil).unwrap()
        };
        let y0 = run(base.neighbors.clone());
        let mut shuffled = base.neighbors.clone();
        for _ in 0..3 {
            shuffled.shuffle(&mut rng);
            worst = worst.max(max_diff(&y0, &run(shuffled.clone())));
        }
    }
    worst
}
