//! SGD with momentum, the fine-tuning strategies and the epoch loop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::gate::{GateConfig, PolicyMatrix};
use crate::gated::BnMode;
use crate::graph::Var;
use crate::layers::BackboneSpec;
use crate::model::{ConvUnit, Gating, Network, PolicySource};
use crate::params::{Group, Kind, Mode, ParamId, ParamStore, Session};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SgdConfig {
    /// Learning rate of backbone and classifier weights.
    pub lr: f64,
    /// Learning rate of gate weights.
    pub gate_lr: f64,
    pub momentum: f64,
    /// Epochs (0-based) at which both rates are divided by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            gate_lr: 0.1,
            momentum: 0.9,
            decay_epochs: vec![15, 22, 27],
            decay_factor: 10.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lr) || !ok(self.gate_lr) {
            return Err(Error::InvalidArgument("learning rates must be finite and nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return Err(Error::InvalidArgument("decay factor must be positive".into()));
        }
        Ok(())
    }

    fn scaled(&self, base: f64, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        base / libm::pow(self.decay_factor, decays as f64)
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.scaled(self.lr, epoch)
    }

    pub fn gate_lr(&self, epoch: usize) -> f64 {
        self.scaled(self.gate_lr, epoch)
    }

    pub fn lr_for(&self, group: Group, epoch: usize) -> f64 {
        match group {
            Group::Gate => self.gate_lr(epoch),
            Group::Backbone | Group::Head => self.lr(epoch),
        }
    }
}

/// Momentum buffers keyed by parameter; only trainable weights ever get one.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: SgdConfig,
    buffers: BTreeMap<ParamId, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            buffers: BTreeMap::new(),
        })
    }

    pub fn buffer(&self, id: ParamId) -> Option<&[f64]> {
        self.buffers.get(&id).map(Vec::as_slice)
    }

    pub fn buffer_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.buffers.keys().copied()
    }

    /// `v <- mu*v + g; p <- p - lr(epoch)*v` for every trainable weight,
    /// then clears the gradients.
    pub fn step(&mut self, store: &mut ParamStore, epoch: usize) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().collect();
        for &id in &ids {
            let entry = store.entry(id);
            if !entry.trainable() {
                continue;
            }
            if entry.tensor.grad().is_none() {
                return Err(Error::MissingGradient(entry.path.clone()));
            }
        }
        let mu = self.config.momentum;
        for id in ids {
            let entry = store.entry(id);
            let Kind::Weight(group) = entry.kind else { continue };
            if !entry.trainable() {
                continue;
            }
            let lr = self.config.lr_for(group, epoch);
            let t = store.tensor_mut(id);
            let g = t.take_grad().expect("checked above");
            let v = self.buffers.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            for ((p, v), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

/// `alpha/2 * sum ||w - w0||^2` over backbone weights found in `anchor` plus
/// `beta/2 * sum ||w||^2` over the classifier.
pub fn l2sp_penalty(sess: &mut Session, anchor: &Checkpoint, alpha: f64, beta: f64) -> Result<Var> {
    let mut anchored = Vec::new();
    let mut head = Vec::new();
    for (id, e) in sess.store.iter() {
        match e.kind {
            Kind::Weight(Group::Backbone) => {
                let a = anchor
                    .get(&e.path)
                    .ok_or_else(|| Error::Checkpoint(format!("anchor has no entry for `{}`", e.path)))?;
                if a.shape != e.tensor.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "l2sp_penalty",
                        left: e.tensor.shape().to_vec(),
                        right: a.shape.clone(),
                    });
                }
                anchored.push((id, a.shape.clone(), a.data.clone()));
            }
            Kind::Weight(Group::Head) => head.push(id),
            _ => {}
        }
    }
    let mut total = sess.constant(&[1], vec![0.0])?;
    for (id, shape, w0) in anchored {
        let w = sess.param(id);
        let w0 = sess.constant(&shape, w0)?;
        let d = sess.graph.sub(w, w0)?;
        let sq = sess.graph.mul(d, d)?;
        let s = sess.graph.sum(sq)?;
        let s = sess.graph.scale(s, alpha / 2.0)?;
        total = sess.graph.add(total, s)?;
    }
    for id in head {
        let w = sess.param(id);
        let sq = sess.graph.mul(w, w)?;
        let s = sess.graph.sum(sq)?;
        let s = sess.graph.scale(s, beta / 2.0)?;
        total = sess.graph.add(total, s)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "name", rename_all = "snake_case", deny_unknown_fields))]
pub enum StrategySpec {
    Adafilter,
    StandardFinetune,
    FinetuneHalf,
    RandomPolicy,
    L2sp { alpha: f64, beta: f64 },
}

impl StrategySpec {
    pub const NAMES: [&'static str; 5] = ["adafilter", "standard_finetune", "finetune_half", "random_policy", "l2sp"];

    pub fn l2sp_default() -> Self {
        StrategySpec::L2sp { alpha: 0.01, beta: 0.01 }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "adafilter" => StrategySpec::Adafilter,
            "standard_finetune" | "standard" => StrategySpec::StandardFinetune,
            "finetune_half" => StrategySpec::FinetuneHalf,
            "random_policy" => StrategySpec::RandomPolicy,
            "l2sp" => Self::l2sp_default(),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown strategy `{other}`; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            StrategySpec::Adafilter => "adafilter",
            StrategySpec::StandardFinetune => "standard_finetune",
            StrategySpec::FinetuneHalf => "finetune_half",
            StrategySpec::RandomPolicy => "random_policy",
            StrategySpec::L2sp { .. } => "l2sp",
        }
    }

    pub fn is_gated(&self) -> bool {
        matches!(self, StrategySpec::Adafilter | StrategySpec::RandomPolicy)
    }

    pub fn validate(&self) -> Result<()> {
        if let StrategySpec::L2sp { alpha, beta } = *self {
            if !(alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite()) {
                return Err(Error::InvalidArgument(format!("l2sp coefficients must be nonnegative, got alpha={alpha} beta={beta}")));
            }
        }
        Ok(())
    }
}

/// Where each forward pass of a [`Model`] takes its policies from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyMode {
    Absent,
    Gate,
    Random,
    /// All policies fixed; used for diagnostics.
    Constant(bool),
}

/// A network with its parameters and everything a pass needs besides data.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: Network,
    pub store: ParamStore,
    pub policy: PolicyMode,
    /// Anchor and coefficients of the L2-SP penalty, when active.
    pub l2sp: Option<(Checkpoint, f64, f64)>,
    policy_rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: f64,
    /// One matrix per gated layer, rows in evaluation order.
    pub policies: Vec<PolicyMatrix>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Model {
    pub fn new(net: Network, store: ParamStore, policy: PolicyMode, seed: u64) -> Self {
        Self {
            net,
            store,
            policy,
            l2sp: None,
            policy_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x706f_6c69_6379),
        }
    }

    /// Ungated network trained from scratch.
    pub fn scratch(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        let (net, store) = Network::build(spec, seed)?;
        Ok(Self::new(net, store, PolicyMode::Absent, seed))
    }

    /// Runs the network on a batch, returning the session for inspection.
    pub fn run<'s>(&'s mut self, batch: &Batch, mode: Mode, track: bool) -> Result<(Session<'s>, crate::model::ForwardOutput)> {
        let [c, h, w] = batch.shape;
        let mut sess = if track {
            Session::new(&mut self.store, mode)
        } else {
            Session::inference(&mut self.store, mode)
        };
        let x = sess.constant(&[batch.len(), c, h, w], batch.images.clone())?;
        let mut source = match self.policy {
            PolicyMode::Absent => PolicySource::Absent,
            PolicyMode::Gate => PolicySource::Gate,
            PolicyMode::Random => PolicySource::Random(&mut self.policy_rng),
            PolicyMode::Constant(on) => PolicySource::Constant(on),
        };
        let out = self.net.forward(&mut sess, x, &mut source)?;
        Ok((sess, out))
    }

    /// Forward, backward and one optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &Batch, opt: &mut OptimizerState, epoch: usize) -> Result<StepStats> {
        let l2sp = self.l2sp.take();
        let result = (|| {
            let (mut sess, out) = self.run(batch, Mode::Train, true)?;
            let mut loss = sess.graph.cross_entropy(out.logits, &batch.labels)?;
            if let Some((anchor, alpha, beta)) = &l2sp {
                let p = l2sp_penalty(&mut sess, anchor, *alpha, *beta)?;
                loss = sess.graph.add(loss, p)?;
            }
            let value = sess.graph.value(loss).data()[0];
            let correct = count_correct(sess.graph.value(out.logits).data(), &batch.labels);
            sess.backward(loss)?;
            Ok(StepStats {
                loss: value,
                correct,
                examples: batch.len(),
            })
        })();
        self.l2sp = l2sp;
        let stats = result?;
        opt.step(&mut self.store, epoch)?;
        Ok(stats)
    }

    /// One pass over `data` in a seeded order; returns mean loss and accuracy.
    pub fn train_epoch(&mut self, data: &Dataset, batch_size: usize, seed: u64, epoch: usize, opt: &mut OptimizerState) -> Result<EpochStats> {
        let mut loss = 0.0;
        let mut correct = 0;
        for batch in data.shuffled(batch_size, seed, epoch) {
            let s = self.train_step(&batch, opt, epoch)?;
            loss += s.loss * s.examples as f64;
            correct += s.correct;
        }
        Ok(EpochStats {
            loss: loss / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        })
    }

    /// Eval-mode pass over `data` in storage order.
    pub fn evaluate(&mut self, data: &Dataset, batch_size: usize) -> Result<EvalStats> {
        let mut loss = 0.0;
        let mut correct = 0;
        let mut policies: Vec<PolicyMatrix> = Vec::new();
        for batch in data.sequential(batch_size) {
            let (mut sess, out) = self.run(&batch, Mode::Eval, false)?;
            let ce = sess.graph.cross_entropy(out.logits, &batch.labels)?;
            if let Some((node, op)) = sess.graph.first_non_finite() {
                return Err(Error::NonFinite { op, node });
            }
            loss += sess.graph.value(ce).data()[0] * batch.len() as f64;
            correct += count_correct(sess.graph.value(out.logits).data(), &batch.labels);
            if policies.is_empty() {
                policies = out
                    .policies
                    .iter()
                    .map(|p| PolicyMatrix::new(sess.graph.shape(p.bits)[1]))
                    .collect();
            }
            for (m, p) in policies.iter_mut().zip(&out.policies) {
                let v = sess.graph.value(p.bits);
                m.extend_from(v.shape(), v.data())?;
            }
        }
        Ok(EvalStats {
            loss: loss / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            policies,
        })
    }

    /// Reseeds the random-policy stream.
    pub fn reseed_policy(&mut self, seed: u64) {
        self.policy_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x706f_6c69_6379);
    }
}

fn count_correct(logits: &[f64], labels: &[usize]) -> usize {
    let k = logits.len() / labels.len().max(1);
    logits.chunks(k).zip(labels).filter(|(row, &l)| argmax(row) == l).count()
}

/// Transfer options that apply to the gated strategies.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferOptions {
    pub bn_mode: BnMode,
    pub gate: GateConfig,
}

impl Default for TransferOptions {
    fn default() -> Self {
        Self {
            bn_mode: BnMode::Gated,
            gate: GateConfig::default(),
        }
    }
}

/// Builds the target model for `strategy` from a pre-trained checkpoint.
///
/// `spec` must describe the pre-trained backbone with the target class count.
pub fn apply_strategy(strategy: &StrategySpec, pretrained: &Checkpoint, spec: &BackboneSpec, options: &TransferOptions, seed: u64) -> Result<Model> {
    strategy.validate()?;
    let (gating, policy) = match strategy {
        StrategySpec::Adafilter => (
            Gating::Gated {
                bn_mode: options.bn_mode,
                gate: Some(options.gate.clone()),
            },
            PolicyMode::Gate,
        ),
        StrategySpec::RandomPolicy => (
            Gating::Gated {
                bn_mode: options.bn_mode,
                gate: None,
            },
            PolicyMode::Random,
        ),
        _ => (Gating::None, PolicyMode::Absent),
    };
    let (net, store) = Network::init_from_pretrained(pretrained, spec, &gating, seed)?;
    let mut model = Model::new(net, store, policy, seed);
    match *strategy {
        StrategySpec::FinetuneHalf => {
            let frozen = model.net.units().len() / 2;
            freeze_leading_units(&mut model, frozen);
        }
        StrategySpec::L2sp { alpha, beta } => model.l2sp = Some((pretrained.clone(), alpha, beta)),
        _ => {}
    }
    Ok(model)
}

/// Freezes the first `count` main convolutions with their batch norms, and
/// each skip projection whose block begins among them.
pub fn freeze_leading_units(model: &mut Model, count: usize) {
    let mut ids: Vec<ParamId> = Vec::new();
    for unit in model.net.units().into_iter().take(count) {
        match unit {
            ConvUnit::Plain(u) => ids.push(u.conv.weight),
            ConvUnit::Gated(g) => ids.push(g.bank.fine),
        }
        for bn in unit.batch_norms() {
            ids.extend(bn.weights());
        }
    }
    for (first, p) in model.net.projections() {
        if first < count {
            ids.push(p.conv.weight);
            ids.extend(p.bn.weights());
        }
    }
    for id in ids {
        model.store.set_trainable(id, false);
    }
}

/// Names of the trainable weights, in store order.
pub fn trainable_paths(store: &ParamStore) -> Vec<String> {
    store.iter().filter(|(_, e)| e.trainable()).map(|(_, e)| e.path.clone()).collect()
}
