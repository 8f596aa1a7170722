//! Randomized invariants of the engine, the gate, filter selection and training.

use adafilter_core::checkpoint::Checkpoint;
use adafilter_core::data::Dataset;
use adafilter_core::gate::{policy_stats, Estimator, GateConfig, GateNetwork, PolicyMatrix};
use adafilter_core::gated::{filter_select_forward, BnMode, GatedConvBlock};
use adafilter_core::layers::BackboneSpec;
use adafilter_core::model::{Gating, Network, PolicySource};
use adafilter_core::params::{Group, Mode, ParamStore, Session};
use adafilter_core::train::{apply_strategy, OptimizerState, SgdConfig, StrategySpec, TransferOptions};
use adafilter_core::{Graph, Tensor, Var};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(cases: u32) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(0),
        failure_persistence: None,
        ..Config::default()
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn binary(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect()
}

/// conv -> batch norm -> relu -> two projections; returns the leaves and both losses.
fn two_losses(g: &mut Graph, rng: &mut ChaCha8Rng, n: usize, c: usize) -> (Vec<Var>, Var, Var) {
    let x = g.leaf(random(rng, &[n, c, 4, 4]).with_grad());
    let w = g.leaf(random(rng, &[3, c, 3, 3]).with_grad());
    let gamma = g.leaf(random(rng, &[3]).with_grad());
    let beta = g.leaf(random(rng, &[3]).with_grad());
    let y = g.conv2d(x, w, 1, 1).unwrap();
    let y = g.batch_norm(y, gamma, beta, 1e-5, None).unwrap();
    let y = g.tanh(y).unwrap();
    let mut proj = |g: &mut Graph| {
        let r = g.constant(&[n, 3, 4, 4], random(rng, &[n, 3, 4, 4]).into_data()).unwrap();
        let p = g.mul(y, r).unwrap();
        g.sum(p).unwrap()
    };
    let l1 = proj(g);
    let l2 = proj(g);
    (vec![x, w, gamma, beta], l1, l2)
}

fn grads(g: &Graph, vars: &[Var]) -> Vec<f64> {
    vars.iter().flat_map(|&v| g.grad(v).unwrap().to_vec()).collect()
}

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn backward_is_linear_in_the_loss(seed in any::<u64>(), n in 1usize..4, c in 1usize..4, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let build = || {
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (vars, l1, l2) = two_losses(&mut g, &mut rng, n, c);
            (g, vars, l1, l2)
        };
        let (mut g1, v1, l1, _) = build();
        g1.backward(l1).unwrap();
        let (mut g2, v2, _, l2) = build();
        g2.backward(l2).unwrap();
        let (mut g, v, l1, l2) = build();
        let s1 = g.scale(l1, a).unwrap();
        let s2 = g.scale(l2, b).unwrap();
        let l = g.add(s1, s2).unwrap();
        g.backward(l).unwrap();
        for ((got, x), y) in grads(&g, &v).iter().zip(grads(&g1, &v1)).zip(grads(&g2, &v2)) {
            let want = a * x + b * y;
            prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {}", got, want);
        }
    }

    #[test]
    fn gradients_accumulate_across_passes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = store.add_weight("w", random(&mut rng, &[2, 3]), Group::Backbone, true);
        let xs = [random(&mut rng, &[4, 3]), random(&mut rng, &[4, 3])];
        let pass = |store: &mut ParamStore, x: &Tensor| {
            let mut sess = Session::new(store, Mode::Train);
            let xv = sess.graph.leaf(x.clone());
            let wv = sess.param(w);
            let y = sess.graph.linear(xv, wv, None).unwrap();
            let y = sess.graph.sigmoid(y).unwrap();
            let l = sess.graph.sum(y).unwrap();
            sess.backward(l).unwrap();
        };
        let mut single = Vec::new();
        for x in &xs {
            let mut s = store.clone();
            pass(&mut s, x);
            single.push(s.tensor(w).grad().unwrap().to_vec());
        }
        for x in &xs {
            pass(&mut store, x);
        }
        let both = store.tensor(w).grad().unwrap();
        for (i, g) in both.iter().enumerate() {
            prop_assert_eq!(*g, single[0][i] + single[1][i]);
        }
    }

    #[test]
    fn replay_and_repeat_are_bit_exact(seed in any::<u64>(), n in 1usize..4, c in 1usize..4) {
        let run = || {
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (vars, l1, _) = two_losses(&mut g, &mut rng, n, c);
            g.backward(l1).unwrap();
            let value = g.value(l1).data()[0];
            (g, vars, value)
        };
        let (g, vars, value) = run();
        prop_assert_eq!(g.replay().unwrap(), None);
        let visits = g.backward_visits();
        let mut sorted = visits.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), visits.len());
        prop_assert!(visits.windows(2).all(|w| w[0] > w[1]));
        let (g2, vars2, value2) = run();
        prop_assert_eq!(value.to_bits(), value2.to_bits());
        let (a, b) = (grads(&g, &vars), grads(&g2, &vars2));
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn filter_select_equals_full_convolutions_then_selection(seed in any::<u64>(), n in 1usize..4, ci in 1usize..4, co in 1usize..5, h in 1usize..6, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = GatedConvBlock::new(&mut store, "g", &random(&mut rng, &[co, ci, 3, 3]), 1, 1, BnMode::Gated).unwrap();
        let fine = random(&mut rng, &[co, ci, 3, 3]);
        store.tensor_mut(block.bank.fine).data_mut().copy_from_slice(fine.data());
        let x = random(&mut rng, &[n, ci, h, w]);
        let g = binary(&mut rng, n * co);
        let mut sess = Session::inference(&mut store, Mode::Train);
        let xv = sess.graph.leaf(x);
        let p = sess.constant(&[n, co], g.clone()).unwrap();
        let mixed = filter_select_forward(&mut sess, xv, &block.bank, p).unwrap();
        let f = sess.param(block.bank.fine);
        let s = sess.param(block.bank.frozen);
        let full_f = sess.graph.conv2d(xv, f, 1, 1).unwrap();
        let full_s = sess.graph.conv2d(xv, s, 1, 1).unwrap();
        let (m, a, b) = (sess.graph.value(mixed).data(), sess.graph.value(full_f).data(), sess.graph.value(full_s).data());
        let hw = h * w;
        for (j, gv) in g.iter().enumerate() {
            let src = if *gv == 1.0 { a } else { b };
            for i in j * hw..(j + 1) * hw {
                prop_assert_eq!(m[i].to_bits(), src[i].to_bits());
            }
        }
    }

    #[test]
    fn gate_policies_are_binary_and_per_example(seed in any::<u64>(), n in 2usize..5, widths in prop::collection::vec(1usize..6, 3), victim in 0usize..5) {
        let victim = victim % n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = GateConfig { embed_size: 4, hidden_size: 5, estimator: Estimator::StraightThrough };
        let gate = GateNetwork::new(&mut store, &[(widths[0], widths[1]), (widths[1], widths[2])], cfg, &mut rng).unwrap();
        let inputs = [random(&mut rng, &[n, widths[0], 3, 3]), random(&mut rng, &[n, widths[1], 3, 3])];
        // Same example `victim`, every other example replaced and reordered.
        let mut order: Vec<usize> = (0..n).collect();
        order.rotate_left(1);
        let others: Vec<Tensor> = inputs.iter().map(|t| {
            let per = t.len() / n;
            let fresh = random(&mut rng, t.shape());
            let mut data = Vec::with_capacity(t.len());
            for (k, &src) in order.iter().enumerate() {
                let from = if k == victim { t.data() } else { fresh.data() };
                let src = if k == victim { victim } else { src };
                data.extend_from_slice(&from[src * per..(src + 1) * per]);
            }
            Tensor::new(t.shape(), data).unwrap()
        }).collect();
        let run = |store: &mut ParamStore, xs: &[Tensor]| {
            let mut sess = Session::inference(store, Mode::Eval);
            let mut state = None;
            xs.iter().enumerate().map(|(l, x)| {
                let xv = sess.graph.leaf(x.clone());
                let p = gate.step(&mut sess, l, xv, &mut state).unwrap();
                sess.graph.value(p.bits).data().to_vec()
            }).collect::<Vec<_>>()
        };
        let base = run(&mut store, &inputs);
        let moved = run(&mut store, &others);
        for (l, (a, b)) in base.iter().zip(&moved).enumerate() {
            prop_assert!(a.iter().all(|&v| v == 0.0 || v == 1.0));
            let c = widths[l + 1];
            prop_assert_eq!(&a[victim * c..(victim + 1) * c], &b[victim * c..(victim + 1) * c]);
        }
    }

    #[test]
    fn gate_state_carries_across_layers(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = GateConfig { embed_size: 4, hidden_size: 6, estimator: Estimator::StraightThrough };
        let gate = GateNetwork::new(&mut store, &[(3, 8), (3, 8)], cfg, &mut rng).unwrap();
        let xs = [random(&mut rng, &[2, 3, 3, 3]), random(&mut rng, &[2, 3, 3, 3])];
        let probs = |store: &mut ParamStore, order: [usize; 2]| {
            let mut sess = Session::inference(store, Mode::Eval);
            let mut state = None;
            order.iter().map(|&l| {
                let xv = sess.graph.leaf(xs[l].clone());
                let p = gate.step(&mut sess, l, xv, &mut state).unwrap();
                sess.graph.value(p.probs.unwrap()).data().to_vec()
            }).collect::<Vec<_>>()
        };
        let forward = probs(&mut store, [0, 1]);
        let swapped = probs(&mut store, [1, 0]);
        prop_assert_ne!(&forward[1], &swapped[0]);
        prop_assert_ne!(&forward[0], &swapped[1]);
    }

    #[test]
    fn policy_fractions_stay_in_unit_interval(seed in any::<u64>(), widths in prop::collection::vec(1usize..9, 1..5), n in 1usize..9, p in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<PolicyMatrix> = widths.iter().map(|&w| {
            let mut m = PolicyMatrix::new(w);
            let bits: Vec<f64> = (0..n * w).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect();
            m.extend_from(&[n, w], &bits).unwrap();
            m
        }).collect();
        let stats = policy_stats(&layers).unwrap();
        prop_assert_eq!(stats.len(), widths.len());
        prop_assert!(stats.iter().all(|f| (0.0..=1.0).contains(f)));
    }

    #[test]
    fn epoch_batches_cover_split_once(seed in any::<u64>(), len in 1usize..60, bs in 1usize..17, epoch in 0usize..5) {
        let data = Dataset::new([1, 1, 1], 2, vec![0.0; len], (0..len).map(|i| i % 2).collect()).unwrap();
        let batches = data.shuffled(bs, seed, epoch);
        prop_assert_eq!(batches.iter().map(|b| b.len()).sum::<usize>(), len);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        prop_assert_eq!(seen.clone(), data.epoch_order(seed, epoch));
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..len).collect::<Vec<_>>());
    }
}

fn tiny_data(seed: u64, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n * 3 * 6 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Dataset::new([3, 6, 6], 3, images, (0..n).map(|i| i % 3).collect()).unwrap()
}

proptest! {
    #![proptest_config(config(6))]

    #[test]
    fn frozen_tensors_never_change(seed in any::<u64>(), strategy in prop::sample::select(vec!["adafilter", "random_policy", "finetune_half"]), steps in 1usize..6) {
        let (_, pstore) = Network::build(&BackboneSpec::desk(3, 5), seed).unwrap();
        let ckpt = Checkpoint::from_store(&pstore);
        let mut model = apply_strategy(&StrategySpec::from_name(strategy).unwrap(), &ckpt, &BackboneSpec::desk(3, 3), &TransferOptions::default(), seed).unwrap();
        let frozen: Vec<String> = model.store.iter().filter(|(_, e)| e.is_weight() && !e.trainable()).map(|(_, e)| e.path.clone()).collect();
        prop_assert!(!frozen.is_empty());
        let hash = |m: &adafilter_core::train::Model| m.store.content_hash(|p| frozen.iter().any(|f| f == p));
        let before = hash(&model);
        let mut opt = OptimizerState::new(SgdConfig::default()).unwrap();
        let data = tiny_data(seed, 4 * steps);
        model.train_epoch(&data, 4, seed, 0, &mut opt).unwrap();
        prop_assert_eq!(hash(&model), before);
        for id in opt.buffer_ids() {
            prop_assert!(model.store.entry(id).trainable());
        }
    }

    #[test]
    fn eval_policies_are_per_example(seed in any::<u64>()) {
        let (_, pstore) = Network::build(&BackboneSpec::desk(3, 5), seed).unwrap();
        let ckpt = Checkpoint::from_store(&pstore);
        let gating = Gating::Gated { bn_mode: BnMode::Gated, gate: Some(GateConfig::default()) };
        let (net, mut store) = Network::init_from_pretrained(&ckpt, &BackboneSpec::desk(3, 3), &gating, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[3, 3, 6, 6]);
        let mut swapped = random(&mut rng, &[3, 3, 6, 6]).into_data();
        swapped[..108].copy_from_slice(&x.data()[..108]);
        let bits = |store: &mut ParamStore, x: Tensor| {
            let mut sess = Session::inference(store, Mode::Eval);
            let xv = sess.graph.leaf(x);
            let out = net.forward(&mut sess, xv, &mut PolicySource::Gate).unwrap();
            out.policies.iter().map(|p| {
                let c = sess.graph.shape(p.bits)[1];
                sess.graph.value(p.bits).data()[..c].to_vec()
            }).collect::<Vec<_>>()
        };
        prop_assert_eq!(bits(&mut store, x), bits(&mut store, Tensor::new(&[3, 3, 6, 6], swapped).unwrap()));
    }
}
