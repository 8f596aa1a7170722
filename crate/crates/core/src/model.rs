//! Residual backbone assembled from a [`BackboneSpec`], optionally with gated
//! convolutions and a recurrent gate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::gate::{GateConfig, GateNetwork, PolicyBatch};
use crate::gated::{BnMode, GatedConvBlock};
use crate::graph::Var;
use crate::layers::{he_bound, uniform, BackboneSpec, BatchNorm, Conv2d, LayerDesc, Linear, LstmState};
use crate::params::{Group, ParamStore, Session};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBn {
    fn new(store: &mut ParamStore, path: &str, cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv = Conv2d::new(store, path, cin, cout, kernel, stride, rng);
        let bn = BatchNorm::new(store, &format!("{path}.bn"), cout);
        Self { conv, bn }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let y = self.conv.forward(sess, x)?;
        self.bn.forward(sess, y)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }
}

/// A main convolution of the backbone; these are the layers that can be gated.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvUnit {
    Plain(ConvBn),
    Gated(GatedConvBlock),
}

impl ConvUnit {
    pub fn channels(&self) -> (usize, usize) {
        match self {
            ConvUnit::Plain(u) => (u.conv.in_channels, u.conv.out_channels),
            ConvUnit::Gated(g) => (g.bank.in_channels, g.bank.out_channels),
        }
    }

    pub fn kernel(&self) -> usize {
        match self {
            ConvUnit::Plain(u) => u.conv.kernel,
            ConvUnit::Gated(g) => g.bank.kernel,
        }
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        match self {
            ConvUnit::Plain(u) => vec![&u.bn],
            ConvUnit::Gated(g) => g.batch_norms(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            ConvUnit::Plain(u) => u.param_count(),
            ConvUnit::Gated(g) => g.param_count(),
        }
    }

    /// Conv+BN parameter count of the same layer without gating.
    pub fn baseline_param_count(&self) -> usize {
        let (i, o) = self.channels();
        let k = self.kernel();
        o * i * k * k + 2 * o
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub a: ConvUnit,
    pub b: ConvUnit,
    /// 1x1 projection on the skip path when shapes differ; never gated.
    pub projection: Option<ConvBn>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Unit(ConvUnit),
    Relu,
    MaxPool { size: usize, stride: usize },
    Residual(ResidualBlock),
    GlobalAvgPool,
    Fc(Linear),
}

/// Whether and how the main convolutions are gated.
#[derive(Debug, Clone, PartialEq)]
pub enum Gating {
    None,
    /// Gated convolutions; the gate network is built when `gate` is set,
    /// otherwise policies must come from outside (random or constant).
    Gated { bn_mode: BnMode, gate: Option<GateConfig> },
}

/// Where a gated forward pass takes its policies from.
pub enum PolicySource<'r> {
    /// Ungated network.
    Absent,
    Gate,
    /// i.i.d. Bernoulli(0.5) per (example, channel), redrawn every pass.
    Random(&'r mut ChaCha8Rng),
    /// Every policy entry fixed to 1 (`true`) or 0.
    Constant(bool),
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Pooled features fed to the classifier.
    pub features: Var,
    /// One batch of policies per gated layer, in depth order.
    pub policies: Vec<PolicyBatch>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub spec: BackboneSpec,
    pub stages: Vec<Stage>,
    pub gate: Option<GateNetwork>,
}

/// Parameter counts comparing a gated network to its ungated counterpart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamAccounting {
    /// Conv+BN weights of the gated layers (both banks, both BNs).
    pub gated_conv_bn: usize,
    /// Conv+BN weights of the same layers without gating.
    pub baseline_conv_bn: usize,
    pub gate: usize,
    pub total: usize,
    pub baseline_total: usize,
}

impl ParamAccounting {
    pub fn conv_bn_ratio(&self) -> f64 {
        self.gated_conv_bn as f64 / self.baseline_conv_bn as f64
    }

    pub fn total_ratio(&self) -> f64 {
        self.total as f64 / self.baseline_total as f64
    }
}

impl Network {
    /// Deterministically initialized ungated backbone: He-uniform convs and
    /// classifier, BN with unit scale, zero shift and standard running stats.
    pub fn build(spec: &BackboneSpec, seed: u64) -> Result<(Self, ParamStore)> {
        Self::build_with(spec, &Gating::None, seed)
    }

    pub fn build_with(spec: &BackboneSpec, gating: &Gating, seed: u64) -> Result<(Self, ParamStore)> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = spec.kernel;
        let mut channels = spec.in_channels;
        let mut unit_index = 0;
        let mut block_index = 0;
        let mut gated_channels = Vec::new();
        let mut stages = Vec::new();

        let mut main_unit = |store: &mut ParamStore, rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride: usize| -> Result<ConvUnit> {
            let path = format!("conv{unit_index}");
            unit_index += 1;
            Ok(match gating {
                Gating::None => ConvUnit::Plain(ConvBn::new(store, &path, cin, cout, k, stride, rng)),
                Gating::Gated { bn_mode, .. } => {
                    let weights = uniform(rng, &[cout, cin, k, k], he_bound(cin * k * k));
                    gated_channels.push((cin, cout));
                    ConvUnit::Gated(GatedConvBlock::new(store, &path, &weights, stride, k / 2, *bn_mode)?)
                }
            })
        };

        for desc in &spec.layers {
            match *desc {
                LayerDesc::Conv { out_channels, stride } => {
                    stages.push(Stage::Unit(main_unit(&mut store, &mut rng, channels, out_channels, stride)?));
                    channels = out_channels;
                }
                LayerDesc::BatchNorm => {}
                LayerDesc::Relu => stages.push(Stage::Relu),
                LayerDesc::MaxPool { size, stride } => stages.push(Stage::MaxPool { size, stride }),
                LayerDesc::Residual { out_channels, stride } => {
                    let a = main_unit(&mut store, &mut rng, channels, out_channels, stride)?;
                    let b = main_unit(&mut store, &mut rng, out_channels, out_channels, 1)?;
                    let projection = (channels != out_channels || stride != 1).then(|| {
                        ConvBn::new(&mut store, &format!("block{block_index}.proj"), channels, out_channels, 1, stride, &mut rng)
                    });
                    block_index += 1;
                    stages.push(Stage::Residual(ResidualBlock { a, b, projection }));
                    channels = out_channels;
                }
                LayerDesc::GlobalAvgPool => stages.push(Stage::GlobalAvgPool),
                LayerDesc::Fc { classes } => {
                    let fc = Linear::new(&mut store, "fc", channels, classes, true, Group::Head, he_bound(channels), &mut rng);
                    stages.push(Stage::Fc(fc));
                }
            }
        }
        let gate = match gating {
            Gating::Gated { gate: Some(cfg), .. } => Some(GateNetwork::new(&mut store, &gated_channels, cfg.clone(), &mut rng)?),
            _ => None,
        };
        Ok((
            Self {
                spec: spec.clone(),
                stages,
                gate,
            },
            store,
        ))
    }

    /// Builds a network for `spec` (which carries the target class count)
    /// whose backbone is copied from a checkpoint of the ungated network.
    ///
    /// Gated layers get `F` and `S` as identical copies of the pre-trained
    /// filters and both BNs initialized from the pre-trained BN. The
    /// classifier and the gate are freshly initialized from `seed`.
    pub fn init_from_pretrained(pretrained: &Checkpoint, spec: &BackboneSpec, gating: &Gating, seed: u64) -> Result<(Self, ParamStore)> {
        let (net, mut store) = Self::build_with(spec, gating, seed)?;
        let mut copy = |store: &mut ParamStore, dst: crate::params::ParamId, src: &str| -> Result<()> {
            let e = pretrained
                .get(src)
                .ok_or_else(|| Error::Checkpoint(format!("layer `{src}` missing from pre-trained checkpoint")))?;
            let t = store.tensor_mut(dst);
            if e.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "layer `{src}`: pre-trained shape {:?} does not match model shape {:?}",
                    e.shape,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&e.data);
            Ok(())
        };
        let copy_bn = |store: &mut ParamStore, bn: &BatchNorm, src: &str, copy: &mut dyn FnMut(&mut ParamStore, crate::params::ParamId, &str) -> Result<()>| -> Result<()> {
            copy(store, bn.gamma, &format!("{src}.gamma"))?;
            copy(store, bn.beta, &format!("{src}.beta"))?;
            copy(store, bn.running_mean, &format!("{src}.running_mean"))?;
            copy(store, bn.running_var, &format!("{src}.running_var"))
        };
        let mut index = 0;
        let mut block = 0;
        let mut load_unit = |store: &mut ParamStore, unit: &ConvUnit, copy: &mut dyn FnMut(&mut ParamStore, crate::params::ParamId, &str) -> Result<()>| -> Result<()> {
            let src = format!("conv{index}");
            index += 1;
            match unit {
                ConvUnit::Plain(u) => {
                    copy(store, u.conv.weight, &format!("{src}.weight"))?;
                    copy_bn(store, &u.bn, &format!("{src}.bn"), copy)
                }
                ConvUnit::Gated(g) => {
                    copy(store, g.bank.fine, &format!("{src}.weight"))?;
                    copy(store, g.bank.frozen, &format!("{src}.weight"))?;
                    for bn in g.batch_norms() {
                        copy_bn(store, bn, &format!("{src}.bn"), copy)?;
                    }
                    Ok(())
                }
            }
        };
        for stage in &net.stages {
            match stage {
                Stage::Unit(u) => load_unit(&mut store, u, &mut copy)?,
                Stage::Residual(r) => {
                    load_unit(&mut store, &r.a, &mut copy)?;
                    load_unit(&mut store, &r.b, &mut copy)?;
                    if let Some(p) = &r.projection {
                        let src = format!("block{block}.proj");
                        copy(&mut store, p.conv.weight, &format!("{src}.weight"))?;
                        copy_bn(&mut store, &p.bn, &format!("{src}.bn"), &mut copy)?;
                    }
                    block += 1;
                }
                _ => {}
            }
        }
        Ok((net, store))
    }

    pub fn classes(&self) -> usize {
        self.spec.classes()
    }

    /// Main convolution units in depth order.
    pub fn units(&self) -> Vec<&ConvUnit> {
        let mut out = Vec::new();
        for s in &self.stages {
            match s {
                Stage::Unit(u) => out.push(u),
                Stage::Residual(r) => {
                    out.push(&r.a);
                    out.push(&r.b);
                }
                _ => {}
            }
        }
        out
    }

    /// Skip-path projections with the index of the block's first main unit.
    pub fn projections(&self) -> Vec<(usize, &ConvBn)> {
        let mut out = Vec::new();
        let mut index = 0;
        for s in &self.stages {
            match s {
                Stage::Unit(_) => index += 1,
                Stage::Residual(r) => {
                    if let Some(p) = &r.projection {
                        out.push((index, p));
                    }
                    index += 2;
                }
                _ => {}
            }
        }
        out
    }

    pub fn head(&self) -> Option<&Linear> {
        self.stages.iter().find_map(|s| match s {
            Stage::Fc(l) => Some(l),
            _ => None,
        })
    }

    pub fn is_gated(&self) -> bool {
        self.units().iter().any(|u| matches!(u, ConvUnit::Gated(_)))
    }

    pub fn gated_layer_count(&self) -> usize {
        self.units().iter().filter(|u| matches!(u, ConvUnit::Gated(_))).count()
    }

    /// Output channels produced per example: one filter per channel whether gated or not.
    pub fn effective_filters_per_example(&self) -> usize {
        self.units().iter().map(|u| u.channels().1).sum::<usize>()
            + self.projections().iter().map(|(_, p)| p.conv.out_channels).sum::<usize>()
    }

    pub fn param_accounting(&self, store: &ParamStore) -> ParamAccounting {
        let gated: Vec<&ConvUnit> = self.units().into_iter().filter(|u| matches!(u, ConvUnit::Gated(_))).collect();
        let gated_conv_bn = gated.iter().map(|u| u.param_count()).sum();
        let baseline_conv_bn = gated.iter().map(|u| u.baseline_param_count()).sum();
        let baseline_total = self.units().iter().map(|u| u.baseline_param_count()).sum::<usize>()
            + self.projections().iter().map(|(_, p)| p.param_count()).sum::<usize>()
            + self.head().map_or(0, |h| h.param_count());
        ParamAccounting {
            gated_conv_bn,
            baseline_conv_bn,
            gate: self.gate.as_ref().map_or(0, |g| g.param_count()),
            total: store.weight_count(),
            baseline_total,
        }
    }

    fn unit_forward(
        &self,
        sess: &mut Session,
        unit: &ConvUnit,
        x: Var,
        layer: &mut usize,
        policy: &mut PolicySource,
        state: &mut Option<LstmState>,
        policies: &mut Vec<PolicyBatch>,
    ) -> Result<Var> {
        match unit {
            ConvUnit::Plain(u) => u.forward(sess, x),
            ConvUnit::Gated(g) => {
                let n = sess.graph.shape(x)[0];
                let c = g.bank.out_channels;
                let batch = match policy {
                    PolicySource::Gate => {
                        let gate = self
                            .gate
                            .as_ref()
                            .ok_or_else(|| Error::InvalidArgument("policy source is the gate but the network has none".into()))?;
                        gate.step(sess, *layer, x, state)?
                    }
                    PolicySource::Random(rng) => {
                        let bits = (0..n * c).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
                        PolicyBatch {
                            bits: sess.constant(&[n, c], bits)?,
                            probs: None,
                        }
                    }
                    PolicySource::Constant(on) => PolicyBatch {
                        bits: sess.constant(&[n, c], vec![if *on { 1.0 } else { 0.0 }; n * c])?,
                        probs: None,
                    },
                    PolicySource::Absent => {
                        return Err(Error::InvalidArgument("gated network needs a policy source".into()));
                    }
                };
                *layer += 1;
                policies.push(batch);
                g.forward(sess, x, batch.bits)
            }
        }
    }

    pub fn forward(&self, sess: &mut Session, x: Var, policy: &mut PolicySource) -> Result<ForwardOutput> {
        let mut h = x;
        let mut layer = 0;
        let mut state = None;
        let mut policies = Vec::new();
        let mut features = None;
        let mut logits = None;
        for stage in &self.stages {
            h = match stage {
                Stage::Unit(u) => self.unit_forward(sess, u, h, &mut layer, policy, &mut state, &mut policies)?,
                Stage::Relu => sess.graph.relu(h)?,
                Stage::MaxPool { size, stride } => sess.graph.max_pool(h, *size, *stride)?,
                Stage::Residual(r) => {
                    let a = self.unit_forward(sess, &r.a, h, &mut layer, policy, &mut state, &mut policies)?;
                    let a = sess.graph.relu(a)?;
                    let b = self.unit_forward(sess, &r.b, a, &mut layer, policy, &mut state, &mut policies)?;
                    let skip = match &r.projection {
                        Some(p) => p.forward(sess, h)?,
                        None => h,
                    };
                    let sum = sess.graph.add(b, skip)?;
                    sess.graph.relu(sum)?
                }
                Stage::GlobalAvgPool => {
                    let f = sess.graph.global_avg_pool(h)?;
                    features = Some(f);
                    f
                }
                Stage::Fc(fc) => {
                    let l = fc.forward(sess, h)?;
                    logits = Some(l);
                    l
                }
            };
        }
        Ok(ForwardOutput {
            logits: logits.expect("validated spec ends with Fc"),
            features: features.expect("validated spec pools before Fc"),
            policies,
        })
    }
}
