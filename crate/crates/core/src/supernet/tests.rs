use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::archspace::{
    cell_frame_cost, count_params_flops, derive_genotype, head_cost, stem_cost, AlphaParams, BlockSpec, CellType,
    Genotype, MacroConfig, OpKind, SearchSpace,
};
use crate::autograd::softmax;
use crate::gradcheck::{max_relative_error, numeric_gradient};
use crate::nn::{Builder, Ctx, GradTarget, ParamGroup, ParamStore};
use crate::tensor::Tensor;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn tiny() -> MacroConfig {
    MacroConfig {
        channels: 4,
        layers: [1, 1, 1, 1],
        blocks: 2,
        input_hw: [32, 16],
        num_ids: 5,
        embed_dim: 8,
        ..Default::default()
    }
}

fn edge(space: SearchSpace, c: usize, stride: usize) -> (ParamStore, MixedEdge) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let e = MixedEdge::new(&mut Builder::new(&mut store, &mut rng), space, c, stride, 4).unwrap();
    (store, e)
}

fn edge_output(store: &ParamStore, e: &MixedEdge, x: &Tensor, logits: &[f64]) -> Tensor {
    let mut ctx = Ctx::eval(store);
    let xv = ctx.input(x.clone());
    let a = ctx.input(Tensor::from_vec(logits.to_vec()));
    let y = mixed_edge_forward(&mut ctx, xv, e, a).unwrap();
    ctx.value(y).clone()
}

#[test]
fn mixed_edge_identity_zero_halves() {
    let (store, e) = edge(SearchSpace::Reid, 4, 1);
    let x = rand_tensor(&[2, 4, 8, 8], &mut ChaCha8Rng::seed_from_u64(1));
    let logits: Vec<f64> = OpKind::ALL
        .iter()
        .map(|op| if matches!(op, OpKind::Identity | OpKind::Zero) { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    let y = edge_output(&store, &e, &x, &logits);
    let mut half = x.clone();
    half.scale_assign(0.5);
    assert!(y.max_abs_diff(&half) < 1e-15);
}

#[test]
fn mixed_edge_saturates_to_identity() {
    let (store, e) = edge(SearchSpace::Reid, 4, 1);
    let x = rand_tensor(&[2, 4, 8, 8], &mut ChaCha8Rng::seed_from_u64(2));
    let mut logits = vec![0.0; 7];
    logits[OpKind::Identity.ordinal()] = 40.0;
    let y = edge_output(&store, &e, &x, &logits);
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3));
    }
}

#[test]
fn mixed_edge_shift_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for stride in [1, 2] {
        let (store, e) = edge(SearchSpace::Reid, 4, stride);
        let x = rand_tensor(&[2, 4, 8, 8], &mut rng);
        let logits: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = edge_output(&store, &e, &x, &logits);
        for shift in [-7.5, 3.0, 100.0] {
            let moved: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            assert!(edge_output(&store, &e, &x, &moved).max_abs_diff(&y) < 1e-10);
        }
    }
}

#[test]
fn mixed_edge_rejects_bad_shapes() {
    let (store, e) = edge(SearchSpace::Classic, 4, 2);
    let mut ctx = Ctx::eval(&store);
    let a = ctx.input(Tensor::zeros(&[6]));
    let x = ctx.input(Tensor::zeros(&[1, 3, 8, 8]));
    assert!(mixed_edge_forward(&mut ctx, x, &e, a).is_err());
    let x = ctx.input(Tensor::zeros(&[1, 4, 7, 8]));
    assert!(mixed_edge_forward(&mut ctx, x, &e, a).is_err());
    let x = ctx.input(Tensor::zeros(&[1, 4, 8, 8]));
    let bad = ctx.input(Tensor::zeros(&[7]));
    assert!(mixed_edge_forward(&mut ctx, x, &e, bad).is_err());
}

#[test]
fn mixed_edge_alpha_gradient() {
    let (store, e) = edge(SearchSpace::Reid, 4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[2, 4, 8, 8], &mut rng);
    let r = rand_tensor(&[2, 4, 8, 8], &mut rng);
    let alpha = Tensor::from_vec((0..7).map(|_| rng.random_range(-1.0..1.0)).collect());
    let loss = |a: &Tensor, want_grad: bool| {
        let mut ctx = Ctx::new(&store, true, GradTarget::None, 0);
        let xv = ctx.input(x.clone());
        let av = ctx.tape.leaf(a.clone(), true);
        let y = mixed_edge_forward(&mut ctx, xv, &e, av).unwrap();
        let rv = ctx.input(r.clone());
        let p = ctx.tape.mul(y, rv);
        let l = ctx.tape.sum(p);
        let grad = want_grad.then(|| ctx.tape.backward(l).get(av).unwrap().clone());
        (ctx.value(l).item(), grad)
    };
    let analytic = loss(&alpha, true).1.unwrap();
    let numeric = numeric_gradient(&alpha, 1e-6, |a| loss(a, false).0);
    let err = max_relative_error(&analytic, &numeric, 1e-8);
    assert!(err < 1e-4, "relative error {err}");
}

fn single_cell(space: SearchSpace, blocks: usize) -> (ParamStore, Cell, Vec<Vec<crate::nn::ParamId>>) {
    let m = MacroConfig {
        blocks,
        ..tiny()
    };
    let plan = m.plan()[0].clone();
    let mut store = ParamStore::new();
    let alpha: Vec<Vec<_>> = (0..blocks)
        .map(|i| {
            (0..2 + i)
                .map(|j| store.add(format!("a{i}{j}"), ParamGroup::Arch, Tensor::zeros(&[space.len()])))
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cell = Cell::mixed(&mut Builder::new(&mut store, &mut rng), &plan, space, &alpha, 4).unwrap();
    (store, cell, alpha)
}

fn set_logits(store: &mut ParamStore, ids: &[Vec<crate::nn::ParamId>], f: impl Fn(OpKind) -> f64) {
    for id in ids.iter().flatten() {
        let v: Vec<f64> = OpKind::ALL.iter().map(|&op| f(op)).collect();
        store.get_mut(*id).data_mut().copy_from_slice(&v);
    }
}

#[test]
fn cell_of_zero_edges_is_zero() {
    let (mut store, cell, ids) = single_cell(SearchSpace::Reid, 1);
    set_logits(&mut store, &ids, |op| if op == OpKind::Zero { 0.0 } else { f64::NEG_INFINITY });
    let x = rand_tensor(&[2, 4, 32, 16], &mut ChaCha8Rng::seed_from_u64(6));
    let mut ctx = Ctx::new(&store, true, GradTarget::None, 0);
    let xv = ctx.input(x);
    let t = cell.trace(&mut ctx, xv, xv).unwrap();
    assert!(ctx.value(t.concat).data().iter().all(|&v| v == 0.0));
}

#[test]
fn cell_of_identity_edges_sums_inputs() {
    let (mut store, cell, ids) = single_cell(SearchSpace::Reid, 1);
    set_logits(&mut store, &ids, |op| if op == OpKind::Identity { 0.0 } else { f64::NEG_INFINITY });
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (a, b) = (rand_tensor(&[2, 4, 32, 16], &mut rng), rand_tensor(&[2, 4, 32, 16], &mut rng));
    let mut ctx = Ctx::new(&store, true, GradTarget::None, 0);
    let (av, bv) = (ctx.input(a), ctx.input(b));
    let t = cell.trace(&mut ctx, av, bv).unwrap();
    let mut sum = ctx.value(t.states[0]).clone();
    sum.add_assign(ctx.value(t.states[1]));
    assert!(ctx.value(t.concat).max_abs_diff(&sum) < 1e-12);
}

/// Re-evaluates a relaxed cell edge by edge and operation by operation,
/// accumulating in reverse order with a scalar softmax.
#[test]
fn cell_matches_manual_unrolling() {
    let (mut store, cell, ids) = single_cell(SearchSpace::Reid, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for id in ids.iter().flatten() {
        for v in store.get_mut(*id).data_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
    }
    let (a, b) = (rand_tensor(&[2, 4, 32, 16], &mut rng), rand_tensor(&[2, 4, 32, 16], &mut rng));
    let mut ctx = Ctx::eval(&store);
    let (av, bv) = (ctx.input(a.clone()), ctx.input(b.clone()));
    let got = cell.forward(&mut ctx, av, bv).unwrap();
    let got = ctx.value(got).clone();

    let CellEdges::Mixed(rows) = &cell.edges else { panic!() };
    let mut ctx = Ctx::eval(&store);
    let (av, bv) = (ctx.input(a), ctx.input(b));
    let s0 = cell.pre0.forward(&mut ctx, av);
    let s1 = cell.pre1.forward(&mut ctx, bv);
    let mut states = vec![ctx.value(s0).clone(), ctx.value(s1).clone()];
    for row in rows {
        let mut block = Tensor::zeros(states[0].shape());
        for (j, (edge, id)) in row.iter().enumerate().rev() {
            let w = softmax(store.get(*id).data());
            for (k, op) in edge.ops.iter().enumerate().rev() {
                let x = ctx.input(states[j].clone());
                let y = op.forward(&mut ctx, x).unwrap();
                for (acc, v) in block.data_mut().iter_mut().zip(ctx.value(y).data()) {
                    *acc += w[k] * v;
                }
            }
        }
        states.push(block);
    }
    let parts: Vec<_> = states[2..].iter().map(|s| ctx.input(s.clone())).collect();
    let cat = ctx.tape.concat_channels(&parts);
    let y = cell.post.forward(&mut ctx, cat);
    let expect = cell.post_bn.forward(&mut ctx, y);
    assert!(got.max_abs_diff(ctx.value(expect)) < 1e-6);
}

#[test]
fn default_skeleton_layout() {
    let m = MacroConfig {
        channels: 4,
        ..Default::default()
    };
    let model = build_supernet(&m, SearchSpace::Reid, 0).unwrap();
    let net = &model.net;
    assert_eq!(net.cells.len(), 8);
    let red: Vec<usize> = net.cells.iter().filter(|c| c.plan.is_reduction()).map(|c| c.plan.index).collect();
    assert_eq!(red, [2, 4, 6]);
    let x = rand_tensor(&[2, 3, 384, 128], &mut ChaCha8Rng::seed_from_u64(9));
    let mut ctx = Ctx::eval(&model.store);
    let xv = ctx.input(x);
    let out = net.forward(&mut ctx, xv).unwrap();
    assert_eq!(ctx.value(out.h).shape(), [2, 751]);
    assert_eq!(ctx.value(out.g).shape(), [2, 512]);
    assert_eq!(ctx.value(out.f).shape(), [2, 32]);
}

#[test]
fn rejects_wrong_image_size() {
    let model = build_supernet(&tiny(), SearchSpace::Reid, 0).unwrap();
    let mut ctx = Ctx::eval(&model.store);
    let x = ctx.input(Tensor::zeros(&[1, 3, 16, 16]));
    assert!(model.net.forward(&mut ctx, x).is_err());
}

fn forward(model: &Model, x: &Tensor, train: bool) -> (Tensor, Tensor) {
    let mut ctx = Ctx::new(&model.store, train, GradTarget::None, 3);
    let xv = ctx.input(x.clone());
    let o = model.net.forward(&mut ctx, xv).unwrap();
    (ctx.value(o.g).clone(), ctx.value(o.h).clone())
}

#[test]
fn discretized_supernet_matches_final_network() {
    let m = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&[3, 3, 32, 16], &mut rng);
    for trial in 0..3 {
        let mut sup = build_supernet(&m, SearchSpace::Reid, trial).unwrap();
        let alpha = AlphaParams::random(SearchSpace::Reid, m.blocks, 2.0, &mut rng);
        let g = derive_genotype(&alpha).unwrap();
        sup.net.set_alpha(&mut sup.store, &one_hot_alpha(&g).unwrap()).unwrap();
        let mut fin = build_final_network(&g, &m, 1000 + trial).unwrap();
        assert_eq!(fin.store.copy_matching(&sup.store), fin.store.len());
        for train in [false, true] {
            let (g1, h1) = forward(&sup, &x, train);
            let (g2, h2) = forward(&fin, &x, train);
            assert!(g1.max_abs_diff(&g2) < 1e-5 && h1.max_abs_diff(&h2) < 1e-5);
        }
    }
}

#[test]
fn one_hot_alpha_derives_back() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let g = derive_genotype(&AlphaParams::random(SearchSpace::Classic, 3, 1.0, &mut rng)).unwrap();
        let back = derive_genotype(&one_hot_alpha(&g).unwrap()).unwrap();
        for kind in [CellType::Normal, CellType::Reduction] {
            for (a, b) in g.cell(kind).iter().zip(back.cell(kind)) {
                let mut ea = a.edges();
                let mut eb = b.edges();
                ea.sort();
                eb.sort();
                assert_eq!(ea, eb);
            }
        }
    }
    let dup = Genotype {
        space: SearchSpace::Reid,
        normal: vec![BlockSpec::new(0, 0, OpKind::Identity, OpKind::Identity)],
        reduction: vec![BlockSpec::new(0, 1, OpKind::Identity, OpKind::Identity)],
    };
    assert!(one_hot_alpha(&dup).is_err());
}

#[test]
fn supernet_alpha_gradient() {
    let m = tiny();
    let mut model = build_supernet(&m, SearchSpace::Reid, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let alpha = AlphaParams::random(SearchSpace::Reid, m.blocks, 0.5, &mut rng);
    model.net.set_alpha(&mut model.store, &alpha).unwrap();
    let x = rand_tensor(&[4, 3, 32, 16], &mut rng);
    let labels = [0, 1, 2, 1];
    let loss = |store: &ParamStore, grads: bool| {
        let mut ctx = Ctx::new(store, true, GradTarget::Arch, 21);
        let xv = ctx.input(x.clone());
        let o = model.net.forward(&mut ctx, xv).unwrap();
        let ce = ctx.tape.cross_entropy(o.h, &labels, true);
        let d = ctx.tape.pairwise_dist(o.f, 1e-12);
        let d = ctx.tape.mean(d);
        let l = ctx.tape.add(ce, d);
        let g = grads.then(|| ctx.gradients(l));
        (ctx.value(l).item(), g)
    };
    let grads = loss(&model.store, true).1.unwrap();
    let ids: Vec<_> = model.net.alpha.as_ref().unwrap().all().collect();
    assert_eq!(grads.len(), ids.len());
    let mut worst: f64 = 0.0;
    for (id, g) in grads {
        let mut probe = model.store.clone();
        let numeric = numeric_gradient(model.store.get(id), 1e-5, |t| {
            *probe.get_mut(id) = t.clone();
            loss(&probe, false).0
        });
        worst = worst.max(max_relative_error(&g, &numeric, 1e-6));
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn static_and_dynamic_counts_agree() {
    let m = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let space = if rng.random_bool(0.5) { SearchSpace::Reid } else { SearchSpace::Classic };
        let g = Genotype::random(space, m.blocks, &mut rng);
        let model = build_final_network(&g, &m, 0).unwrap();
        let stat = count_params_flops(&g, &m).unwrap();
        assert_eq!(model.store.count(ParamGroup::Weight) as u64, stat.params, "{}", g.render());
    }
}

#[test]
fn identity_genotype_params_come_from_frame() {
    let m = MacroConfig {
        blocks: 3,
        ..tiny()
    };
    let blocks: Vec<_> = (0..3).map(|i| BlockSpec::new(i, i + 1, OpKind::Identity, OpKind::Identity)).collect();
    let g = Genotype {
        space: SearchSpace::Reid,
        normal: blocks.clone(),
        reduction: blocks,
    };
    let model = build_final_network(&g, &m, 0).unwrap();
    let frame: u64 = m.plan().iter().map(|c| cell_frame_cost(c, 3).params).sum();
    let expect = stem_cost(&m).params + frame + head_cost(&m).params;
    assert_eq!(model.store.count(ParamGroup::Weight) as u64, expect);
    let is_edge = |name: &str| name.split('.').any(|p| p.len() > 1 && p.starts_with('b') && p[1..].parse::<usize>().is_ok());
    assert!(model.store.entries().all(|(_, e)| !is_edge(&e.name)));
}

#[test]
fn builds_are_deterministic() {
    let g = derive_genotype(&AlphaParams::random(SearchSpace::Reid, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(15))).unwrap();
    let a = build_final_network(&g, &tiny(), 42).unwrap();
    let b = build_final_network(&g, &tiny(), 42).unwrap();
    let c = build_final_network(&g, &tiny(), 43).unwrap();
    assert_eq!(a.store, b.store);
    assert_ne!(a.store, c.store);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut sup = build_supernet(&tiny(), SearchSpace::Reid, 5).unwrap();
    let alpha = AlphaParams::random(SearchSpace::Reid, 2, 1.0, &mut rng);
    sup.net.set_alpha(&mut sup.store, &alpha).unwrap();
    let mut ckpt = Checkpoint::from_model(&sup, 17);
    ckpt.optim.insert("weights".into(), [("m:x".to_string(), vec![0.1, f64::MIN_POSITIVE, -0.0])].into());
    ckpt.meta = serde_json::json!({"seed": 5});
    let path = dir.path().join("sup.ckpt");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    let restored = back.to_model().unwrap();
    assert_eq!(restored.net.alpha_params(&restored.store).unwrap(), alpha);
    let x = rand_tensor(&[2, 3, 32, 16], &mut rng);
    assert_eq!(forward(&restored, &x, false), forward(&sup, &x, false));

    let g = derive_genotype(&alpha).unwrap();
    let fin = build_final_network(&g, &tiny(), 3).unwrap();
    let path = dir.path().join("final.ckpt");
    save_checkpoint(&path, &Checkpoint::from_model(&fin, 0)).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.kind, NetworkKind::Final(g));
    assert_eq!(back.to_model().unwrap().store, fin.store);

    std::fs::write(&path, b"ARCK\x09\0\0\0").unwrap();
    assert!(load_checkpoint(&path).is_err());
}
