//! Randomized finite-difference trials over every graph primitive and the
//! composite blocks built from them.
//!
//! Each case draws fresh shapes and values per trial, reduces the output to a
//! scalar through a fixed random projection and compares analytic against
//! central-difference gradients. Composites run the real layer code on a graph
//! whose parameters are bound to the checked tensors.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::mem;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_diff_check, numeric_gradient, relative_error, FdOptions};
use crate::error::{Error, Result};
use crate::gate::{Estimator, GateConfig, GateNetwork};
use crate::gated::{filter_select_forward, gated_bn_forward, BnMode, GatedConvBlock};
use crate::graph::{Graph, Var};
use crate::layers::{LstmCell, LstmState, BN_EPSILON};
use crate::params::{Group, Mode, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// Tolerance for smooth elementwise primitives.
pub const SMOOTH_TOL: f64 = 1e-6;
/// Tolerance for everything else.
pub const DEFAULT_TOL: f64 = 1e-4;

pub const PRIMITIVES: [&str; 23] = [
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "matmul",
    "linear",
    "sigmoid",
    "tanh",
    "relu",
    "conv2d",
    "global_avg_pool",
    "max_pool",
    "channel_mean",
    "channel_var",
    "channel_affine",
    "batch_norm",
    "batch_norm_masked",
    "channel_mix",
    "reshape",
    "cross_entropy",
    "threshold",
];

pub const COMPOSITES: [&str; 6] = ["conv_bn", "filter_select", "gated_bn", "gated_block", "lstm_chain", "gate_pipeline"];

/// Outcome of all trials of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseSummary {
    pub name: &'static str,
    pub trials: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl CaseSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One randomized trial: parameters plus the scalar function of them.
struct Trial {
    params: Vec<Tensor>,
    build: Build,
}

fn case_tol(name: &str) -> f64 {
    match name {
        "add" | "sub" | "mul" | "scale" | "sum" | "mean" | "sigmoid" | "tanh" | "reshape" => SMOOTH_TOL,
        _ => DEFAULT_TOL,
    }
}

/// Runs `trials` randomized checks of case `name`.
pub fn run_case(name: &str, trials: usize, seed: u64) -> Result<CaseSummary> {
    let name: &'static str = PRIMITIVES
        .iter()
        .chain(COMPOSITES.iter())
        .find(|&&n| n == name)
        .ok_or_else(|| Error::InvalidArgument(format!("no gradient case named `{name}`")))?;
    let tol = case_tol(name);
    let opts = FdOptions {
        tol,
        ..FdOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3)));
    let mut failures = 0;
    let mut max_rel_error: f64 = 0.0;
    for _ in 0..trials {
        let err = match name {
            "threshold" => straight_through_trial(&mut rng, opts, threshold_pipeline)?,
            "gate_pipeline" => straight_through_trial(&mut rng, opts, gate_pipeline)?,
            _ => {
                let t = trial(name, &mut rng);
                let report = finite_diff_check(t.build, &t.params, opts)?;
                report.max_rel_error()
            }
        };
        if !(err <= tol) {
            failures += 1;
        }
        max_rel_error = max_rel_error.max(err);
    }
    Ok(CaseSummary {
        name,
        trials,
        failures,
        max_rel_error,
        tol,
    })
}

/// Every primitive and composite case, in declaration order.
pub fn run_all(trials: usize, seed: u64) -> Result<Vec<CaseSummary>> {
    PRIMITIVES
        .iter()
        .chain(COMPOSITES.iter())
        .map(|n| run_case(n, trials, seed))
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

/// Values at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

fn binary(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect()
}

fn any_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.gen_range(1..=4);
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

fn nchw(rng: &mut ChaCha8Rng, min_n: usize) -> [usize; 4] {
    [rng.gen_range(min_n..=3), rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)]
}

/// `sum(r * y)` with `r` fixed at construction.
fn projection(rng: &mut ChaCha8Rng, shape: &[usize]) -> impl Fn(&mut Graph, Var) -> Result<Var> {
    let r = rand_t(rng, shape);
    move |g: &mut Graph, y: Var| {
        let r = g.constant(r.shape(), r.data().to_vec())?;
        let p = g.mul(y, r)?;
        g.sum(p)
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

fn trial(name: &str, rng: &mut ChaCha8Rng) -> Trial {
    match name {
        "add" | "sub" | "mul" => {
            let s = any_shape(rng);
            let proj = projection(rng, &s);
            let op: fn(&mut Graph, Var, Var) -> Result<Var> = match name {
                "add" => |g, a, b| g.add(a, b),
                "sub" => |g, a, b| g.sub(a, b),
                _ => |g, a, b| g.mul(a, b),
            };
            Trial {
                params: vec![rand_t(rng, &s), rand_t(rng, &s)],
                build: Box::new(move |g, v| {
                    let y = op(g, v[0], v[1])?;
                    proj(g, y)
                }),
            }
        }
        "scale" | "sigmoid" | "tanh" | "relu" | "reshape" => {
            let s = any_shape(rng);
            let proj = projection(rng, &[s.iter().product()]);
            let c = rng.gen_range(-2.0..2.0);
            let x = match name {
                "relu" => away_from_zero(rng, &s, 1e-3),
                "sigmoid" | "tanh" => uniform(rng, &s, -3.0, 3.0),
                _ => rand_t(rng, &s),
            };
            let op: fn(&mut Graph, Var, f64) -> Result<Var> = match name {
                "scale" => |g, x, c| g.scale(x, c),
                "sigmoid" => |g, x, _| g.sigmoid(x),
                "tanh" => |g, x, _| g.tanh(x),
                "relu" => |g, x, _| g.relu(x),
                _ => |_, x, _| Ok(x),
            };
            Trial {
                params: vec![x],
                build: Box::new(move |g, v| {
                    let y = op(g, v[0], c)?;
                    let n = g.value(y).len();
                    let flat = g.reshape(y, &[n])?;
                    proj(g, flat)
                }),
            }
        }
        "sum" | "mean" => {
            let s = any_shape(rng);
            let c = rng.gen_range(0.5..2.0);
            let mean = name == "mean";
            Trial {
                params: vec![rand_t(rng, &s)],
                build: Box::new(move |g, v| {
                    let y = if mean { g.mean(v[0])? } else { g.sum(v[0])? };
                    let sq = g.mul(y, y)?;
                    let sq = g.scale(sq, c)?;
                    g.add(sq, y)
                }),
            }
        }
        "matmul" => {
            let (m, k, n) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let proj = projection(rng, &[m, n]);
            Trial {
                params: vec![rand_t(rng, &[m, k]), rand_t(rng, &[k, n])],
                build: Box::new(move |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    proj(g, y)
                }),
            }
        }
        "linear" => {
            let (n, i, o) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let proj = projection(rng, &[n, o]);
            Trial {
                params: vec![rand_t(rng, &[n, i]), rand_t(rng, &[o, i]), rand_t(rng, &[o])],
                build: Box::new(move |g, v| {
                    let y = g.linear(v[0], v[1], Some(v[2]))?;
                    proj(g, y)
                }),
            }
        }
        "conv2d" => {
            let k = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=1);
            let (n, ci, co) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (h, w) = (rng.gen_range(k..=k + 3), rng.gen_range(k..=k + 3));
            let proj = projection(rng, &[n, co, conv_out(h, k, stride, pad), conv_out(w, k, stride, pad)]);
            Trial {
                params: vec![rand_t(rng, &[n, ci, h, w]), rand_t(rng, &[co, ci, k, k])],
                build: Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], stride, pad)?;
                    proj(g, y)
                }),
            }
        }
        "global_avg_pool" | "channel_mean" | "channel_var" => {
            let s = nchw(rng, 1);
            let mut s = s;
            if name == "channel_var" && s[0] * s[2] * s[3] < 2 {
                s[2] = 2;
            }
            let out = if name == "global_avg_pool" { vec![s[0], s[1]] } else { vec![s[1]] };
            let proj = projection(rng, &out);
            let op: fn(&mut Graph, Var) -> Result<Var> = match name {
                "channel_mean" => |g, x| g.channel_mean(x),
                "channel_var" => |g, x| g.channel_var(x),
                _ => |g, x| g.global_avg_pool(x),
            };
            Trial {
                params: vec![rand_t(rng, &s)],
                build: Box::new(move |g, v| {
                    let y = op(g, v[0])?;
                    proj(g, y)
                }),
            }
        }
        "max_pool" => {
            let size = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=2);
            let [n, c, _, _] = nchw(rng, 1);
            let (h, w) = (rng.gen_range(size..=size + 3), rng.gen_range(size..=size + 3));
            let len = n * c * h * w;
            // Distinct values spaced well beyond the step keep every argmax stable.
            let mut vals: Vec<f64> = (0..len).map(|i| -1.0 + 2.0 * i as f64 / len as f64).collect();
            vals.shuffle(rng);
            let proj = projection(rng, &[n, c, conv_out(h, size, stride, 0), conv_out(w, size, stride, 0)]);
            Trial {
                params: vec![Tensor::new(&[n, c, h, w], vals).expect("valid")],
                build: Box::new(move |g, v| {
                    let y = g.max_pool(v[0], size, stride)?;
                    proj(g, y)
                }),
            }
        }
        "channel_affine" => {
            let s = nchw(rng, 1);
            let proj = projection(rng, &s);
            Trial {
                params: vec![rand_t(rng, &s), rand_t(rng, &[s[1]]), rand_t(rng, &[s[1]])],
                build: Box::new(move |g, v| {
                    let y = g.channel_affine(v[0], v[1], v[2])?;
                    proj(g, y)
                }),
            }
        }
        "batch_norm" | "batch_norm_masked" => {
            let s = nchw(rng, 2);
            let mask = (name == "batch_norm_masked").then(|| loop {
                let m = binary(rng, s[0] * s[1]);
                let ok = (0..s[1]).all(|c| (0..s[0]).filter(|&b| m[b * s[1] + c] == 1.0).count() * s[2] * s[3] >= 2);
                if ok {
                    break m;
                }
            });
            let proj = projection(rng, &s);
            Trial {
                params: vec![rand_t(rng, &s), uniform(rng, &[s[1]], 0.5, 1.5), rand_t(rng, &[s[1]])],
                build: Box::new(move |g, v| {
                    let y = g.batch_norm(v[0], v[1], v[2], BN_EPSILON, mask.clone())?;
                    proj(g, y)
                }),
            }
        }
        "channel_mix" => {
            let s = nchw(rng, 1);
            let proj = projection(rng, &s);
            Trial {
                params: vec![rand_t(rng, &[s[0], s[1]]), rand_t(rng, &s), rand_t(rng, &s)],
                build: Box::new(move |g, v| {
                    let y = g.channel_mix(v[0], v[1], v[2])?;
                    proj(g, y)
                }),
            }
        }
        "cross_entropy" => {
            let (n, k) = (rng.gen_range(1..=4), rng.gen_range(2..=5));
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            Trial {
                params: vec![uniform(rng, &[n, k], -2.0, 2.0)],
                build: Box::new(move |g, v| g.cross_entropy(v[0], &labels)),
            }
        }
        "conv_bn" => {
            let [n, ci, h, w] = nchw(rng, 2);
            let co = rng.gen_range(1..=3);
            let proj = projection(rng, &[n, co, h, w]);
            Trial {
                params: vec![
                    rand_t(rng, &[n, ci, h, w]),
                    rand_t(rng, &[co, ci, 3, 3]),
                    uniform(rng, &[co], 0.5, 1.5),
                    rand_t(rng, &[co]),
                ],
                build: Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], 1, 1)?;
                    let y = g.batch_norm(y, v[2], v[3], BN_EPSILON, None)?;
                    proj(g, y)
                }),
            }
        }
        "filter_select" | "gated_bn" | "gated_block" => gated_trial(name, rng),
        "lstm_chain" => lstm_trial(rng),
        other => unreachable!("case `{other}` has no generator"),
    }
}

/// Runs `f` on a session that extends `g`, with `binds[i]` read for parameter `ids[i]`.
fn in_session<R>(g: &mut Graph, store: &ParamStore, mode: Mode, ids: &[ParamId], binds: &[Var], f: impl FnOnce(&mut Session) -> Result<R>) -> Result<R> {
    let mut store = store.clone();
    let mut sess = Session::from_graph(mem::take(g), &mut store, mode);
    for (&id, &v) in ids.iter().zip(binds) {
        sess.bind(id, v);
    }
    let out = f(&mut sess);
    *g = sess.into_graph();
    out
}

fn gated_trial(name: &str, rng: &mut ChaCha8Rng) -> Trial {
    let [n, ci, h, w] = nchw(rng, 2);
    let co = rng.gen_range(1..=3);
    let mut store = ParamStore::new();
    let block = GatedConvBlock::new(&mut store, "g", &Tensor::zeros(&[co, ci, 3, 3]), 1, 1, BnMode::Gated).expect("valid block");
    let bn2 = block.bn2.clone().expect("gated mode has two batch norms");
    let policy = binary(rng, n * co);
    let proj = projection(rng, &[n, co, h, w]);
    let bns = [block.bn1.gamma, block.bn1.beta, bn2.gamma, bn2.beta];
    let bn_params = |rng: &mut ChaCha8Rng| vec![uniform(rng, &[co], 0.5, 1.5), rand_t(rng, &[co]), uniform(rng, &[co], 0.5, 1.5), rand_t(rng, &[co])];
    let (params, ids): (Vec<Tensor>, Vec<ParamId>) = match name {
        "filter_select" => (
            vec![rand_t(rng, &[n, ci, h, w]), rand_t(rng, &[co, ci, 3, 3]), rand_t(rng, &[co, ci, 3, 3])],
            vec![block.bank.fine, block.bank.frozen],
        ),
        "gated_bn" => {
            let mut p = vec![rand_t(rng, &[n, co, h, w])];
            p.extend(bn_params(rng));
            (p, bns.to_vec())
        }
        _ => {
            let mut p = vec![rand_t(rng, &[n, ci, h, w]), rand_t(rng, &[co, ci, 3, 3]), rand_t(rng, &[co, ci, 3, 3])];
            p.extend(bn_params(rng));
            let mut ids = vec![block.bank.fine, block.bank.frozen];
            ids.extend(bns);
            (p, ids)
        }
    };
    let select_only = name == "filter_select";
    let bn_only = name == "gated_bn";
    Trial {
        params,
        build: Box::new(move |g, v| {
            let y = in_session(g, &store, Mode::Train, &ids, &v[1..], |sess| {
                let p = sess.constant(&[n, co], policy.clone())?;
                if select_only {
                    filter_select_forward(sess, v[0], &block.bank, p)
                } else if bn_only {
                    gated_bn_forward(sess, v[0], &block, Some(p))
                } else {
                    block.forward(sess, v[0], p)
                }
            })?;
            proj(g, y)
        }),
    }
}

fn lstm_trial(rng: &mut ChaCha8Rng) -> Trial {
    const STEPS: usize = 8;
    let (n, e, hsz) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "lstm", e, hsz, Group::Gate, rng);
    let ids = cell.weights();
    let mut params: Vec<Tensor> = ids.iter().map(|&id| rand_t(rng, store.tensor(id).shape())).collect();
    params.extend((0..STEPS).map(|_| rand_t(rng, &[n, e])));
    let proj_h = projection(rng, &[n, hsz]);
    let proj_c = projection(rng, &[n, hsz]);
    Trial {
        params,
        build: Box::new(move |g, v| {
            let k = ids.len();
            let state = in_session(g, &store, Mode::Train, &ids, &v[..k], |sess| {
                let mut state = LstmState::zeros(sess, n, hsz)?;
                for &x in &v[k..] {
                    state = cell.step(sess, x, state)?;
                }
                Ok(state)
            })?;
            let a = proj_h(g, state.h)?;
            let b = proj_c(g, state.c)?;
            g.add(a, b)
        }),
    }
}

/// Generator of a pipeline containing hard thresholds.
type StPipeline = fn(&mut ChaCha8Rng) -> StTrial;

struct StTrial {
    params: Vec<Tensor>,
    /// Builds the scalar, routing each threshold's `(probs, bits)` through the
    /// given function to get the value used downstream; also returns every
    /// threshold's `(probs, bits)`.
    build: Box<dyn Fn(&mut Graph, &[Var], &dyn Fn(&mut Graph, usize, Var, Var) -> Result<Var>) -> Result<(Var, Vec<(Var, Var)>)>>,
}

/// Compares straight-through gradients of the real pipeline against central
/// differences of its surrogate, in which each threshold output is replaced by
/// `bits0 + probs − probs0` with `bits0`, `probs0` frozen at the base point.
/// The surrogate equals the pipeline at the base point and its true gradient
/// is exactly what the straight-through estimator claims.
fn straight_through_trial(rng: &mut ChaCha8Rng, opts: FdOptions, make: StPipeline) -> Result<f64> {
    let t = make(rng);
    let hard = |_: &mut Graph, _: usize, _: Var, bits: Var| Ok(bits);
    let mut g = Graph::new();
    let vars: Vec<Var> = t.params.iter().map(|p| g.leaf(p.clone().with_grad())).collect();
    let (loss, gates) = (t.build)(&mut g, &vars, &hard)?;
    let base: Vec<(Tensor, Tensor)> = gates.iter().map(|&(p, b)| (g.value(p).clone(), g.value(b).clone())).collect();
    let base_loss = g.value(loss).data()[0];
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&t.params)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();
    let surrogate = |g: &mut Graph, i: usize, probs: Var, _: Var| {
        let (p0, b0) = &base[i];
        let p0 = g.constant(p0.shape(), p0.data().to_vec())?;
        let b0 = g.constant(b0.shape(), b0.data().to_vec())?;
        let d = g.sub(probs, p0)?;
        g.add(b0, d)
    };
    let f = |g: &mut Graph, v: &[Var]| Ok((t.build)(g, v, &surrogate)?.0);
    let mut check = Graph::new();
    let cv: Vec<Var> = t.params.iter().map(|p| check.leaf(p.clone())).collect();
    let out = f(&mut check, &cv)?;
    let at_base = check.value(out).data()[0];
    if at_base.to_bits() != base_loss.to_bits() {
        return Err(Error::NonDeterministic {
            first: base_loss,
            second: at_base,
        });
    }
    let numeric = numeric_gradient(&f, &t.params, opts.step)?;
    Ok(analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(&a, &n)| relative_error(a, n, opts.floor))
        .fold(0.0, f64::max))
}

fn threshold_pipeline(rng: &mut ChaCha8Rng) -> StTrial {
    let s = any_shape(rng);
    let proj = projection(rng, &s);
    StTrial {
        params: vec![uniform(rng, &s, -3.0, 3.0)],
        build: Box::new(move |g, v, route| {
            let probs = g.sigmoid(v[0])?;
            let bits = g.threshold(probs, true)?;
            let used = route(g, 0, probs, bits)?;
            let sq = g.mul(used, v[0])?;
            Ok((proj(g, sq)?, vec![(probs, bits)]))
        }),
    }
}

/// Two gated layers sharing the LSTM; each layer's bits mix two random tensors.
fn gate_pipeline(rng: &mut ChaCha8Rng) -> StTrial {
    let n = rng.gen_range(1..=3);
    let widths = [rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(2..=4)];
    let (hh, ww) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let mut store = ParamStore::new();
    let cfg = GateConfig {
        embed_size: rng.gen_range(2..=4),
        hidden_size: rng.gen_range(2..=4),
        estimator: Estimator::StraightThrough,
    };
    let gate = GateNetwork::new(&mut store, &[(widths[0], widths[1]), (widths[1], widths[2])], cfg, rng).expect("valid gate");
    let ids = gate.weights();
    let mut params: Vec<Tensor> = ids.iter().map(|&id| uniform(rng, store.tensor(id).shape(), -1.5, 1.5)).collect();
    for l in 0..2 {
        params.push(rand_t(rng, &[n, widths[l], hh, ww]));
        params.push(rand_t(rng, &[n, widths[l + 1], hh, ww]));
        params.push(rand_t(rng, &[n, widths[l + 1], hh, ww]));
    }
    let projs = [projection(rng, &[n, widths[1], hh, ww]), projection(rng, &[n, widths[2], hh, ww])];
    StTrial {
        params,
        build: Box::new(move |g, v, route| {
            let k = ids.len();
            let layers = in_session(g, &store, Mode::Train, &ids, &v[..k], |sess| {
                let mut state = None;
                (0..2)
                    .map(|l| {
                        let p = gate.step(sess, l, v[k + 3 * l], &mut state)?;
                        Ok((p.probs.expect("gate emits probabilities"), p.bits))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let mut total = None;
            for (l, &(probs, bits)) in layers.iter().enumerate() {
                let used = route(g, l, probs, bits)?;
                let y = g.channel_mix(used, v[k + 3 * l + 1], v[k + 3 * l + 2])?;
                let term = projs[l](g, y)?;
                total = Some(match total {
                    None => term,
                    Some(t) => g.add(t, term)?,
                });
            }
            Ok((total.expect("two layers"), layers))
        }),
    }
}
