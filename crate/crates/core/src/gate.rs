//! Layerwise recurrent gate: pools a layer's input, embeds it, advances a
//! shared LSTM and emits a binary per-channel fine-tuning policy.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Linear, LstmCell, LstmState};
use crate::params::{Group, ParamId, ParamStore, Session};

/// How gradients cross the hard threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Estimator {
    /// Upstream gradient passes through the threshold unchanged.
    StraightThrough,
    /// Threshold blocks all gradient (ablation).
    StopGradient,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GateConfig {
    pub embed_size: usize,
    pub hidden_size: usize,
    pub estimator: Estimator,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            embed_size: 64,
            hidden_size: 64,
            estimator: Estimator::StraightThrough,
        }
    }
}

/// Binarizes sigmoid outputs at 0.5 (inclusive).
pub fn ste_binarize(graph: &mut Graph, probs: Var, estimator: Estimator) -> Result<Var> {
    graph.threshold(probs, estimator == Estimator::StraightThrough)
}

/// A batch of fine-tuning policies for one gated layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyBatch {
    /// `[N, C]`, every entry exactly 0 or 1.
    pub bits: Var,
    /// Pre-threshold sigmoid activations, when produced by a gate.
    pub probs: Option<Var>,
}

/// Per-layer embedding and output head around the shared LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct GateLayer {
    /// 1x1 convolution on the pooled map, i.e. a linear map `n_i -> E`.
    pub embed: Linear,
    /// Linear map `H -> n_{i+1}`.
    pub head: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateNetwork {
    pub layers: Vec<GateLayer>,
    pub lstm: LstmCell,
    pub config: GateConfig,
}

impl GateNetwork {
    /// `channels[i]` is `(input channels, output channels)` of gated layer `i`.
    pub fn new(store: &mut ParamStore, channels: &[(usize, usize)], config: GateConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.embed_size == 0 || config.hidden_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "gate sizes must be positive, got embed {} hidden {}",
                config.embed_size, config.hidden_size
            )));
        }
        let (e, h) = (config.embed_size, config.hidden_size);
        let lstm = LstmCell::new(store, "gate.lstm", e, h, Group::Gate, rng);
        let layers = channels
            .iter()
            .enumerate()
            .map(|(i, &(n_in, n_out))| GateLayer {
                embed: Linear::new(store, &format!("gate.embed{i}"), n_in, e, true, Group::Gate, 1.0 / libm::sqrt(n_in as f64), rng),
                head: Linear::new(store, &format!("gate.head{i}"), h, n_out, true, Group::Gate, 1.0 / libm::sqrt(h as f64), rng),
            })
            .collect();
        Ok(Self { layers, lstm, config })
    }

    pub fn param_count(&self) -> usize {
        self.lstm.param_count()
            + self
                .layers
                .iter()
                .map(|l| l.embed.param_count() + l.head.param_count())
                .sum::<usize>()
    }

    pub fn weights(&self) -> Vec<ParamId> {
        let mut w = self.lstm.weights();
        for l in &self.layers {
            w.extend(l.embed.weights());
            w.extend(l.head.weights());
        }
        w
    }

    /// Policy for gated layer `layer` from its input `x` `[N, n_i, H, W]`.
    ///
    /// `state` is `None` before the first gated layer of a pass and is
    /// initialized to zeros per example; it advances once per call.
    pub fn step(&self, sess: &mut Session, layer: usize, x: Var, state: &mut Option<LstmState>) -> Result<PolicyBatch> {
        let gl = self.layers.get(layer).ok_or_else(|| {
            Error::InvalidArgument(format!("gate has no layer {layer} ({} registered)", self.layers.len()))
        })?;
        let pooled = sess.graph.global_avg_pool(x)?;
        let n = sess.graph.shape(pooled)[0];
        let embedding = gl.embed.forward(sess, pooled)?;
        let prev = match *state {
            Some(s) => s,
            None => LstmState::zeros(sess, n, self.config.hidden_size)?,
        };
        let next = self.lstm.step(sess, embedding, prev)?;
        *state = Some(next);
        let logits = gl.head.forward(sess, next.h)?;
        let probs = sess.graph.sigmoid(logits)?;
        let bits = ste_binarize(&mut sess.graph, probs, self.config.estimator)?;
        Ok(PolicyBatch {
            bits,
            probs: Some(probs),
        })
    }
}

/// Plain-data copy of a layer's policies over some set of examples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyMatrix {
    pub channels: usize,
    /// Row-major `[examples, channels]`, each 0 or 1.
    pub bits: Vec<u8>,
}

impl PolicyMatrix {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            bits: Vec::new(),
        }
    }

    pub fn examples(&self) -> usize {
        self.bits.len().checked_div(self.channels).unwrap_or(0)
    }

    /// Appends the rows of a `[N, C]` graph value, rejecting non-binary entries.
    pub fn extend_from(&mut self, shape: &[usize], values: &[f64]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "policy",
                left: shape.to_vec(),
                right: alloc::vec![shape.first().copied().unwrap_or(0), self.channels],
            });
        }
        for &v in values {
            self.bits.push(match v {
                0.0 => 0,
                1.0 => 1,
                other => return Err(Error::InvalidArgument(format!("policy entry {other} is not binary"))),
            });
        }
        Ok(())
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

/// Fraction of `(example, channel)` pairs set to 1, per layer.
pub fn policy_stats(layers: &[PolicyMatrix]) -> Result<Vec<f64>> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no policy layers".into()));
    }
    layers
        .iter()
        .enumerate()
        .map(|(i, m)| {
            if m.bits.is_empty() {
                Err(Error::InvalidArgument(format!("layer {i} has no policies")))
            } else {
                Ok(m.ones() as f64 / m.bits.len() as f64)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn gate(channels: &[(usize, usize)], estimator: Estimator, seed: u64) -> (GateNetwork, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = GateConfig {
            embed_size: 6,
            hidden_size: 5,
            estimator,
        };
        let net = GateNetwork::new(&mut store, channels, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (net, store)
    }

    fn policy_values(net: &GateNetwork, store: &mut ParamStore, inputs: &[Tensor]) -> Vec<Vec<f64>> {
        let mut sess = Session::inference(store, Mode::Eval);
        let mut state = None;
        inputs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let x = sess.graph.leaf(x.clone());
                let p = net.step(&mut sess, i, x, &mut state).unwrap();
                sess.graph.value(p.bits).data().to_vec()
            })
            .collect()
    }

    #[test]
    fn binarize_threshold_is_inclusive() {
        let mut g = Graph::new();
        let x = g.constant(&[4], alloc::vec![0.5, 0.49, 0.51, 0.4999999999]).unwrap();
        let b = ste_binarize(&mut g, x, Estimator::StraightThrough).unwrap();
        assert_eq!(g.value(b).data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn head_bias_forces_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs = [random(&mut rng, &[3, 2, 4, 4]), random(&mut rng, &[3, 4, 4, 4])];
        for (bias, expected) in [(-10.0, 0.0), (10.0, 1.0)] {
            let (net, mut store) = gate(&[(2, 4), (4, 3)], Estimator::StraightThrough, 0);
            for l in &net.layers {
                store.tensor_mut(l.head.weight).data_mut().fill(0.0);
                store.tensor_mut(l.head.bias.unwrap()).data_mut().fill(bias);
            }
            for bits in policy_values(&net, &mut store, &inputs) {
                assert!(bits.iter().all(|&b| b == expected));
            }
        }
    }

    #[test]
    fn distinct_examples_get_distinct_policies() {
        let (net, mut store) = gate(&[(3, 16), (16, 16)], Estimator::StraightThrough, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = random(&mut rng, &[2, 3, 4, 4]);
        let x1 = random(&mut rng, &[2, 16, 4, 4]);
        let bits = policy_values(&net, &mut store, &[x0, x1]);
        assert!(bits.iter().all(|l| l.iter().all(|&b| b == 0.0 || b == 1.0)));
        assert!(bits.iter().any(|l| l[..16] != l[16..]));
    }

    #[test]
    fn unregistered_layer_is_rejected() {
        let (net, mut store) = gate(&[(2, 2)], Estimator::StraightThrough, 0);
        let mut sess = Session::inference(&mut store, Mode::Eval);
        let x = sess.constant(&[1, 2, 2, 2], alloc::vec![0.0; 8]).unwrap();
        assert!(net.step(&mut sess, 1, x, &mut None).is_err());
    }

    #[test]
    fn later_policy_depends_on_earlier_layers() {
        let (net, mut store) = gate(&[(4, 32), (4, 32)], Estimator::StraightThrough, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random(&mut rng, &[3, 4, 4, 4]), random(&mut rng, &[3, 4, 4, 4]));
        let chained = policy_values(&net, &mut store, &[a.clone(), b.clone()]);
        let mut sess = Session::inference(&mut store, Mode::Eval);
        let mut state = None;
        let bv = sess.graph.leaf(b);
        let alone = net.step(&mut sess, 1, bv, &mut state).unwrap();
        assert_ne!(chained[1], sess.graph.value(alone.bits).data());
    }

    fn gate_grads(estimator: Estimator) -> Vec<Vec<f64>> {
        let (net, mut store) = gate(&[(3, 8), (8, 8)], estimator, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sess = Session::new(&mut store, Mode::Train);
        let mut state = None;
        let mut loss = None;
        for (i, c) in [3, 8].into_iter().enumerate() {
            let x = sess.graph.leaf(random(&mut rng, &[4, c, 3, 3]));
            let p = net.step(&mut sess, i, x, &mut state).unwrap();
            let r = sess.graph.leaf(random(&mut rng, &[4, 8]));
            let term = sess.graph.mul(p.bits, r).unwrap();
            let term = sess.graph.sum(term).unwrap();
            loss = Some(match loss {
                None => term,
                Some(l) => sess.graph.add(l, term).unwrap(),
            });
        }
        sess.backward(loss.unwrap()).unwrap();
        net.weights()
            .into_iter()
            .map(|id| store.tensor(id).grad().map_or_else(Vec::new, |g| g.to_vec()))
            .collect()
    }

    #[test]
    fn straight_through_carries_gradient_and_stop_gradient_blocks_it() {
        let ste = gate_grads(Estimator::StraightThrough);
        assert!(ste.iter().flatten().any(|&g| g != 0.0));
        let stop = gate_grads(Estimator::StopGradient);
        assert!(stop.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn stats_match_direct_count_on_random_policies() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let widths = [5, 8, 3];
        let raw: Vec<Vec<f64>> = widths
            .iter()
            .map(|&w| (0..7 * w).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect())
            .collect();
        let matrices: Vec<PolicyMatrix> = widths
            .iter()
            .zip(&raw)
            .map(|(&w, r)| {
                let mut m = PolicyMatrix::new(w);
                m.extend_from(&[7, w], r).unwrap();
                m
            })
            .collect();
        let stats = policy_stats(&matrices).unwrap();
        for (l, r) in raw.iter().enumerate() {
            let mut ones = 0u32;
            for v in r {
                if *v == 1.0 {
                    ones += 1;
                }
            }
            assert_eq!(stats[l], ones as f64 / r.len() as f64);
        }
    }

    #[test]
    fn stats_count_ones() {
        let mut m = PolicyMatrix::new(2);
        m.extend_from(&[2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(policy_stats(&[m]).unwrap(), alloc::vec![0.25]);
        let mut all = PolicyMatrix::new(3);
        all.extend_from(&[1, 3], &[1.0; 3]).unwrap();
        assert_eq!(policy_stats(&[all]).unwrap(), alloc::vec![1.0]);
    }

    #[test]
    fn stats_reject_empty() {
        assert!(policy_stats(&[]).is_err());
        assert!(policy_stats(&[PolicyMatrix::new(4)]).is_err());
    }

    #[test]
    fn matrix_rejects_fractional_bits() {
        let mut m = PolicyMatrix::new(1);
        assert!(m.extend_from(&[1, 1], &[0.5]).is_err());
        assert!(m.extend_from(&[1, 2], &[0.0, 1.0]).is_err());
    }
}
