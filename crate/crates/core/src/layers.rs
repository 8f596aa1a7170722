//! Convolution, batch norm, fully connected and LSTM layers, plus the
//! descriptor list describing a residual backbone.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Group, Mode, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// He-uniform bound `sqrt(6 / fan_in)`.
pub(crate) fn he_bound(fan_in: usize) -> f64 {
    libm::sqrt(6.0 / fan_in as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        let w = uniform(rng, &shape, he_bound(in_channels * kernel * kernel));
        let weight = store.add_weight(format!("{path}.weight"), w, Group::Backbone, true);
        Self {
            weight,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let w = sess.param(self.weight);
        sess.graph.conv2d(x, w, self.stride, self.padding)
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, path: &str, channels: usize) -> Self {
        let gamma = store.add_weight(format!("{path}.gamma"), Tensor::filled(&[channels], 1.0), Group::Backbone, true);
        let beta = store.add_weight(format!("{path}.beta"), Tensor::zeros(&[channels]), Group::Backbone, true);
        let running_mean = store.add_buffer(format!("{path}.running_mean"), Tensor::zeros(&[channels]));
        let running_var = store.add_buffer(format!("{path}.running_var"), Tensor::filled(&[channels], 1.0));
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn weights(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }

    /// Standard batch norm; see [`BatchNorm::forward_masked`].
    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        self.forward_masked(sess, x, None)
    }

    /// In train mode normalizes with batch statistics over `(N, H, W)` and
    /// folds them into the running averages; in eval mode uses only the
    /// running averages. `mask` (`[N,C]` of 0/1) limits which examples feed
    /// each channel's batch statistics.
    pub fn forward_masked(&self, sess: &mut Session, x: Var, mask: Option<Vec<f64>>) -> Result<Var> {
        let gamma = sess.param(self.gamma);
        let beta = sess.param(self.beta);
        match sess.mode {
            Mode::Train => {
                let y = sess.graph.batch_norm(x, gamma, beta, self.epsilon, mask.clone())?;
                let shape = sess.graph.shape(x).to_vec();
                let (mean, var) = sess.graph.batch_stats(y).expect("batch norm node");
                let (mean, var) = (mean.to_vec(), var.to_vec());
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let counts: Vec<f64> = (0..c)
                    .map(|ch| {
                        let used = mask.as_ref().map_or(n, |m| (0..n).filter(|&b| m[b * c + ch] != 0.0).count());
                        (if used == 0 { n } else { used } * hw) as f64
                    })
                    .collect();
                let m = self.momentum;
                let rm = sess.store.tensor_mut(self.running_mean).data_mut();
                for (r, v) in rm.iter_mut().zip(&mean) {
                    *r = (1.0 - m) * *r + m * v;
                }
                let rv = sess.store.tensor_mut(self.running_var).data_mut();
                for ((r, v), cnt) in rv.iter_mut().zip(&var).zip(&counts) {
                    let unbiased = if *cnt > 1.0 { v * cnt / (cnt - 1.0) } else { *v };
                    *r = (1.0 - m) * *r + m * unbiased;
                }
                Ok(y)
            }
            Mode::Eval => {
                let rm = sess.store.tensor(self.running_mean).data().to_vec();
                let rv = sess.store.tensor(self.running_var).data().to_vec();
                let scale: Vec<f64> = rv.iter().map(|v| 1.0 / libm::sqrt(v + self.epsilon)).collect();
                let shift: Vec<f64> = rm.iter().zip(&scale).map(|(m, s)| -m * s).collect();
                let c = scale.len();
                let scale = sess.constant(&[c], scale)?;
                let shift = sess.constant(&[c], shift)?;
                let xhat = sess.graph.channel_affine(x, scale, shift)?;
                sess.graph.channel_affine(xhat, gamma, beta)
            }
        }
    }
}

/// Fully connected layer `x w^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Weight drawn from `U(-bound, bound)`, bias zero.
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        group: Group,
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = uniform(rng, &[out_features, in_features], bound);
        let weight = store.add_weight(format!("{path}.weight"), w, group, true);
        let bias = bias.then(|| store.add_weight(format!("{path}.bias"), Tensor::zeros(&[out_features]), group, true));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + if self.bias.is_some() { self.out_features } else { 0 }
    }

    pub fn weights(&self) -> Vec<ParamId> {
        core::iter::once(self.weight).chain(self.bias).collect()
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let w = sess.param(self.weight);
        let b = self.bias.map(|b| sess.param(b));
        sess.graph.linear(x, w, b)
    }
}

/// Hidden and cell state of an LSTM, each `[N, H]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(sess: &mut Session, batch: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            h: sess.constant(&[batch, hidden], vec![0.0; batch * hidden])?,
            c: sess.constant(&[batch, hidden], vec![0.0; batch * hidden])?,
        })
    }
}

/// Gate order inside [`LstmCell`] parameter arrays.
pub const LSTM_GATES: [&str; 4] = ["input", "forget", "candidate", "output"];

/// LSTM cell: input, forget and output gates use the sigmoid, the candidate uses tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub input_weights: [ParamId; 4],
    pub hidden_weights: [ParamId; 4],
    pub biases: [ParamId; 4],
    pub input_size: usize,
    pub hidden_size: usize,
}

impl LstmCell {
    /// Weights from `U(-1/sqrt(H), 1/sqrt(H))`; biases zero except the forget gate at 1.
    pub fn new(store: &mut ParamStore, path: &str, input_size: usize, hidden_size: usize, group: Group, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / libm::sqrt(hidden_size as f64);
        let mut ids = Vec::with_capacity(12);
        for (g, name) in LSTM_GATES.iter().enumerate() {
            let wi = uniform(rng, &[hidden_size, input_size], bound);
            ids.push(store.add_weight(format!("{path}.{name}.w_input"), wi, group, true));
            let wh = uniform(rng, &[hidden_size, hidden_size], bound);
            ids.push(store.add_weight(format!("{path}.{name}.w_hidden"), wh, group, true));
            let b = Tensor::filled(&[hidden_size], if g == 1 { 1.0 } else { 0.0 });
            ids.push(store.add_weight(format!("{path}.{name}.bias"), b, group, true));
        }
        let pick = |k: usize| -> [ParamId; 4] { core::array::from_fn(|g| ids[3 * g + k]) };
        let (input_weights, hidden_weights, biases) = (pick(0), pick(1), pick(2));
        Self {
            input_weights,
            hidden_weights,
            biases,
            input_size,
            hidden_size,
        }
    }

    pub fn param_count(&self) -> usize {
        4 * (self.hidden_size * self.input_size + self.hidden_size * self.hidden_size + self.hidden_size)
    }

    pub fn weights(&self) -> Vec<ParamId> {
        self.input_weights
            .iter()
            .chain(&self.hidden_weights)
            .chain(&self.biases)
            .copied()
            .collect()
    }

    /// One step; the returned state's `h` is the cell output.
    pub fn step(&self, sess: &mut Session, x: Var, state: LstmState) -> Result<LstmState> {
        let xs = sess.graph.shape(x).to_vec();
        let hs = sess.graph.shape(state.h).to_vec();
        let cs = sess.graph.shape(state.c).to_vec();
        if xs.len() != 2 || xs[1] != self.input_size {
            return Err(Error::ShapeMismatch {
                op: "lstm_cell_step",
                right: vec![xs.first().copied().unwrap_or(0), self.input_size],
                left: xs,
            });
        }
        let expected = vec![xs[0], self.hidden_size];
        if hs != expected || cs != expected {
            return Err(Error::ShapeMismatch {
                op: "lstm_cell_step",
                left: if hs != expected { hs } else { cs },
                right: expected,
            });
        }
        let mut pre = [x; 4];
        for g in 0..4 {
            let wi = sess.param(self.input_weights[g]);
            let wh = sess.param(self.hidden_weights[g]);
            let b = sess.param(self.biases[g]);
            let from_input = sess.graph.linear(x, wi, Some(b))?;
            let from_hidden = sess.graph.linear(state.h, wh, None)?;
            pre[g] = sess.graph.add(from_input, from_hidden)?;
        }
        let i = sess.graph.sigmoid(pre[0])?;
        let f = sess.graph.sigmoid(pre[1])?;
        let cand = sess.graph.tanh(pre[2])?;
        let o = sess.graph.sigmoid(pre[3])?;
        let keep = sess.graph.mul(f, state.c)?;
        let write = sess.graph.mul(i, cand)?;
        let c = sess.graph.add(keep, write)?;
        let tc = sess.graph.tanh(c)?;
        let h = sess.graph.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}

/// One entry of a backbone description.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum LayerDesc {
    /// Convolution without bias; must be followed by `BatchNorm`.
    Conv { out_channels: usize, stride: usize },
    BatchNorm,
    Relu,
    MaxPool { size: usize, stride: usize },
    /// Two conv+BN units with a skip connection; a 1x1 projection is added
    /// when the channel count or stride changes.
    Residual { out_channels: usize, stride: usize },
    GlobalAvgPool,
    Fc { classes: usize },
}

/// Ordered description of a residual CNN.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub kernel: usize,
    pub layers: Vec<LayerDesc>,
}

impl BackboneSpec {
    /// Stem conv + four residual blocks of widths 16, 16, 32, 32 + pooling + classifier.
    pub fn desk(in_channels: usize, classes: usize) -> Self {
        use LayerDesc::*;
        Self {
            in_channels,
            kernel: 3,
            layers: vec![
                Conv { out_channels: 16, stride: 1 },
                BatchNorm,
                Relu,
                Residual { out_channels: 16, stride: 1 },
                Residual { out_channels: 16, stride: 1 },
                Residual { out_channels: 32, stride: 2 },
                Residual { out_channels: 32, stride: 1 },
                GlobalAvgPool,
                Fc { classes },
            ],
        }
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerDesc::Fc { classes }) => *classes,
            _ => 0,
        }
    }

    /// Same backbone with a classifier for `classes` outputs.
    pub fn with_classes(&self, classes: usize) -> Self {
        let mut s = self.clone();
        if let Some(LayerDesc::Fc { classes: c }) = s.layers.last_mut() {
            *c = classes;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |index: usize, reason: String| Err(Error::MalformedSpec { index, reason });
        if self.in_channels == 0 {
            return bad(0, "input channel count must be positive".into());
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return bad(0, format!("kernel size must be odd and positive, got {}", self.kernel));
        }
        let mut pooled = false;
        let mut convs = 0;
        let last = self.layers.len().saturating_sub(1);
        for (i, d) in self.layers.iter().enumerate() {
            if pooled && !matches!(d, LayerDesc::Fc { .. }) {
                return bad(i, format!("{d:?} after global average pooling"));
            }
            match d {
                LayerDesc::Conv { out_channels, stride } | LayerDesc::Residual { out_channels, stride } => {
                    if *out_channels == 0 || *stride == 0 {
                        return bad(i, format!("{d:?} needs positive channels and stride"));
                    }
                    if matches!(d, LayerDesc::Conv { .. }) && self.layers.get(i + 1) != Some(&LayerDesc::BatchNorm) {
                        return bad(i, format!("{d:?} must be followed by BatchNorm"));
                    }
                    convs += 1;
                }
                LayerDesc::BatchNorm => {
                    if i == 0 || !matches!(self.layers[i - 1], LayerDesc::Conv { .. }) {
                        return bad(i, "BatchNorm must directly follow a Conv".into());
                    }
                }
                LayerDesc::MaxPool { size, stride } => {
                    if *size == 0 || *stride == 0 {
                        return bad(i, format!("{d:?} needs positive size and stride"));
                    }
                }
                LayerDesc::Relu => {}
                LayerDesc::GlobalAvgPool => pooled = true,
                LayerDesc::Fc { classes } => {
                    if i != last {
                        return bad(i, "Fc must be the last descriptor".into());
                    }
                    if !pooled {
                        return bad(i, "Fc needs a preceding GlobalAvgPool".into());
                    }
                    if *classes == 0 {
                        return bad(i, "class count must be positive".into());
                    }
                }
            }
        }
        if convs == 0 {
            return bad(0, "backbone has no convolution".into());
        }
        if !matches!(self.layers.last(), Some(LayerDesc::Fc { .. })) {
            return bad(last, "backbone must end with Fc".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    fn bn_train(store: &mut ParamStore, bn: &BatchNorm, x: Tensor) -> Result<Tensor> {
        let mut sess = Session::inference(store, Mode::Train);
        let xv = sess.graph.leaf(x);
        let y = bn.forward(&mut sess, xv)?;
        Ok(sess.graph.value(y).clone())
    }

    #[test]
    fn bn_constant_channel_normalizes_to_zero() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let y = bn_train(&mut store, &bn, Tensor::filled(&[3, 2, 2, 2], 7.5)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bn_standardized_input_is_unchanged() {
        let mut g = crate::Graph::new();
        let x = g.constant(&[2, 1, 1, 2], vec![-1.0, 1.0, 1.0, -1.0]).unwrap();
        let gamma = g.constant(&[1], vec![1.0]).unwrap();
        let beta = g.constant(&[1], vec![0.0]).unwrap();
        let y = g.batch_norm(x, gamma, beta, 0.0, None).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0, 1.0, -1.0]);
    }

    #[test]
    fn bn_output_has_unit_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        let y = bn_train(&mut store, &bn, random(&mut rng, &[4, 3, 5, 5], -50.0, 50.0)).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|n| y.data()[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "channel {c} var {var}");
        }
    }

    #[test]
    fn bn_rejects_single_value_per_channel() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let err = bn_train(&mut store, &bn, Tensor::zeros(&[1, 2, 1, 1])).unwrap_err();
        assert_eq!(err, Error::DegenerateBatch { values_per_channel: 1 });
    }

    #[test]
    fn bn_eval_ignores_batch_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        store.tensor_mut(bn.running_mean).data_mut().copy_from_slice(&[0.5, -1.0]);
        store.tensor_mut(bn.running_var).data_mut().copy_from_slice(&[2.0, 0.25]);
        let first = random(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let mut data = first.data().to_vec();
            data.extend(random(&mut rng, &[2, 2, 3, 3], -9.0, 9.0).data());
            let mut sess = Session::inference(&mut store, Mode::Eval);
            let x = sess.constant(&[3, 2, 3, 3], data).unwrap();
            let y = bn.forward(&mut sess, x).unwrap();
            outputs.push(sess.graph.value(y).data()[..18].to_vec());
        }
        assert_eq!(outputs[0], outputs[1]);
        let expected = (first.data()[0] - 0.5) / libm::sqrt(2.0 + BN_EPSILON);
        assert!((outputs[0][0] - expected).abs() < 1e-15);
    }

    #[test]
    fn bn_running_stats_converge_to_true_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        // Uniform on [m - w, m + w] has variance w^2 / 3.
        let (means, widths) = ([3.0, -2.0], [2.0, 0.5]);
        for _ in 0..500 {
            let mut data = Vec::with_capacity(32 * 2 * 64);
            for _ in 0..32 {
                for c in 0..2 {
                    data.extend((0..64).map(|_| means[c] + rng.gen_range(-widths[c]..widths[c])));
                }
            }
            bn_train(&mut store, &bn, Tensor::new(&[32, 2, 8, 8], data).unwrap()).unwrap();
            assert!(store.tensor(bn.running_var).data().iter().all(|&v| v >= 0.0));
        }
        for c in 0..2 {
            let rm = store.tensor(bn.running_mean).data()[c];
            let rv = store.tensor(bn.running_var).data()[c];
            let var = widths[c] * widths[c] / 3.0;
            assert!((rm - means[c]).abs() < 0.01 * means[c].abs(), "mean {rm}");
            assert!((rv - var).abs() < 0.01 * var, "var {rv} vs {var}");
        }
    }

    fn zero_lstm(store: &mut ParamStore, cell: &LstmCell) {
        for id in cell.weights() {
            store.tensor_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn lstm_with_zero_weights_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "lstm", 3, 4, Group::Gate, &mut rng);
        zero_lstm(&mut store, &cell);
        let mut sess = Session::inference(&mut store, Mode::Train);
        let x = sess.graph.leaf(random(&mut rng, &[2, 3], -1.0, 1.0));
        let s0 = LstmState::zeros(&mut sess, 2, 4).unwrap();
        let s1 = cell.step(&mut sess, x, s0).unwrap();
        assert!(sess.graph.value(s1.h).data().iter().all(|&v| v == 0.0));
        assert!(sess.graph.value(s1.c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_saturated_forget_gate_preserves_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "lstm", 3, 5, Group::Gate, &mut rng);
        zero_lstm(&mut store, &cell);
        store.tensor_mut(cell.biases[1]).data_mut().fill(10.0);
        let mut sess = Session::inference(&mut store, Mode::Train);
        let x = sess.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let h = sess.graph.leaf(random(&mut rng, &[2, 5], -1.0, 1.0));
        let c = sess.graph.leaf(random(&mut rng, &[2, 5], -1.0, 1.0));
        let next = cell.step(&mut sess, x, LstmState { h, c }).unwrap();
        let before = sess.graph.value(c).data();
        for (a, b) in sess.graph.value(next.c).data().iter().zip(before) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn lstm_state_shape_and_gradient_reach_first_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "lstm", 3, 4, Group::Gate, &mut rng);
        let mut sess = Session::new(&mut store, Mode::Train);
        let first = sess.graph.leaf(random(&mut rng, &[2, 3], -1.0, 1.0).with_grad());
        let mut state = LstmState::zeros(&mut sess, 2, 4).unwrap();
        for t in 0..4 {
            let x = if t == 0 { first } else { sess.graph.leaf(random(&mut rng, &[2, 3], -1.0, 1.0)) };
            state = cell.step(&mut sess, x, state).unwrap();
            assert_eq!(sess.graph.shape(state.h), &[2, 4]);
            assert_eq!(sess.graph.shape(state.c), &[2, 4]);
        }
        let loss = sess.graph.sum(state.h).unwrap();
        sess.graph.backward(loss).unwrap();
        assert!(sess.graph.grad(first).unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn lstm_rejects_wrong_input_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "lstm", 3, 4, Group::Gate, &mut rng);
        let mut sess = Session::inference(&mut store, Mode::Train);
        let x = sess.constant(&[2, 5], vec![0.0; 10]).unwrap();
        let s = LstmState::zeros(&mut sess, 2, 4).unwrap();
        assert!(matches!(cell.step(&mut sess, x, s), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn malformed_spec_names_descriptor() {
        let mut spec = BackboneSpec::desk(3, 10);
        assert!(spec.validate().is_ok());
        spec.layers.remove(1);
        assert!(matches!(spec.validate(), Err(Error::MalformedSpec { index: 0, .. })));
        let mut late = BackboneSpec::desk(3, 10);
        late.layers.swap(7, 8);
        assert!(matches!(late.validate(), Err(Error::MalformedSpec { index: 7, .. })));
    }
}
