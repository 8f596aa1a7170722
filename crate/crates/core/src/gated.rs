//! Filter selection between a frozen pre-trained bank and its trainable copy,
//! and the two-path (gated) batch normalization that follows it.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::BatchNorm;
use crate::params::{Group, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// Normalization used after a gated convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BnMode {
    /// Two BN layers over the full batch, selected per (example, channel).
    Gated,
    /// One BN layer regardless of the policy.
    Standard,
    /// Experimental: like `Gated` but each BN's batch statistics only use
    /// the examples routed to its path.
    MaskedStats,
}

/// Trainable filters `F` and their frozen pre-trained copy `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFilterBank {
    pub fine: ParamId,
    pub frozen: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvFilterBank {
    /// Registers `path.F` (trainable) and `path.S` (frozen), both copies of `weights`.
    pub fn from_weights(store: &mut ParamStore, path: &str, weights: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let [o, i, k, k2] = match *weights.shape() {
            [o, i, k, k2] => [o, i, k, k2],
            ref s => {
                return Err(Error::InvalidShape {
                    op: "filter_bank",
                    reason: format!("filters must be [O,I,k,k], got {s:?}"),
                })
            }
        };
        if k != k2 {
            return Err(Error::InvalidShape {
                op: "filter_bank",
                reason: format!("filters must be square, got {k}x{k2}"),
            });
        }
        let copy = || Tensor::new(weights.shape(), weights.data().to_vec()).expect("valid");
        let fine = store.add_weight(format!("{path}.F"), copy(), Group::Backbone, true);
        let frozen = store.add_weight(format!("{path}.S"), copy(), Group::Backbone, false);
        Ok(Self {
            fine,
            frozen,
            in_channels: i,
            out_channels: o,
            kernel: k,
            stride,
            padding,
        })
    }

    pub fn param_count(&self) -> usize {
        2 * self.out_channels * self.in_channels * self.kernel * self.kernel
    }
}

/// Per-example, per-channel mix of the two convolutions:
/// channel `c` of example `j` comes from `F` when `policy[j][c] == 1`, else from `S`.
pub fn filter_select_forward(sess: &mut Session, x: Var, bank: &ConvFilterBank, policy: Var) -> Result<Var> {
    let pshape = sess.graph.shape(policy);
    if pshape.len() != 2 || pshape[1] != bank.out_channels {
        return Err(Error::ShapeMismatch {
            op: "filter_select",
            left: pshape.to_vec(),
            right: alloc::vec![pshape.first().copied().unwrap_or(0), bank.out_channels],
        });
    }
    let f = sess.param(bank.fine);
    let s = sess.param(bank.frozen);
    let fine = sess.graph.conv2d(x, f, bank.stride, bank.padding)?;
    let frozen = sess.graph.conv2d(x, s, bank.stride, bank.padding)?;
    sess.graph.channel_mix(policy, fine, frozen)
}

/// A gated convolution followed by its normalization.
///
/// `bn1` normalizes the fine-tuned path (selected where the policy is 1) and
/// `bn2` the pre-trained path; in [`BnMode::Standard`] only `bn1` exists.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedConvBlock {
    pub bank: ConvFilterBank,
    pub bn1: BatchNorm,
    pub bn2: Option<BatchNorm>,
    pub bn_mode: BnMode,
}

impl GatedConvBlock {
    pub fn new(store: &mut ParamStore, path: &str, weights: &Tensor, stride: usize, padding: usize, bn_mode: BnMode) -> Result<Self> {
        let bank = ConvFilterBank::from_weights(store, path, weights, stride, padding)?;
        let bn1 = BatchNorm::new(store, &format!("{path}.bn1"), bank.out_channels);
        let bn2 = (bn_mode != BnMode::Standard).then(|| BatchNorm::new(store, &format!("{path}.bn2"), bank.out_channels));
        Ok(Self {
            bank,
            bn1,
            bn2,
            bn_mode,
        })
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        core::iter::once(&self.bn1).chain(self.bn2.as_ref()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.bank.param_count() + self.batch_norms().iter().map(|b| b.param_count()).sum::<usize>()
    }

    pub fn forward(&self, sess: &mut Session, x: Var, policy: Var) -> Result<Var> {
        let y = filter_select_forward(sess, x, &self.bank, policy)?;
        gated_bn_forward(sess, y, self, Some(policy))
    }
}

/// `policy ∘ BN1(y) + (1 − policy) ∘ BN2(y)`, both BNs evaluated on the full tensor.
/// Standard mode returns `BN1(y)` and ignores the policy.
pub fn gated_bn_forward(sess: &mut Session, y: Var, block: &GatedConvBlock, policy: Option<Var>) -> Result<Var> {
    match (block.bn_mode, &block.bn2) {
        (BnMode::Standard, None) => block.bn1.forward(sess, y),
        (BnMode::Gated | BnMode::MaskedStats, Some(bn2)) => {
            let policy = policy.ok_or_else(|| Error::InvalidArgument("gated batch norm needs a policy".into()))?;
            let (mask1, mask2) = if block.bn_mode == BnMode::MaskedStats {
                let g = sess.graph.value(policy).data();
                (Some(g.to_vec()), Some(g.iter().map(|v| 1.0 - v).collect()))
            } else {
                (None, None)
            };
            let fine = block.bn1.forward_masked(sess, y, mask1)?;
            let frozen = bn2.forward_masked(sess, y, mask2)?;
            sess.graph.channel_mix(policy, fine, frozen)
        }
        (mode, bn2) => Err(Error::InvalidArgument(format!(
            "bn_mode {mode:?} inconsistent with {} batch-norm layers",
            1 + bn2.is_some() as usize
        ))),
    }
}
