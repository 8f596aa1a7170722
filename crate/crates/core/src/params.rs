//! Named parameter storage and the per-pass binding of parameters into a graph.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

}

/// Learning-rate group a weight belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Backbone,
    Head,
    Gate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Weight(Group),
    /// Non-learned state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub path: String,
    pub tensor: Tensor,
    pub kind: Kind,
}

impl Entry {
    pub fn is_weight(&self) -> bool {
        matches!(self.kind, Kind::Weight(_))
    }

    pub fn trainable(&self) -> bool {
        self.is_weight() && self.tensor.requires_grad
    }
}

/// Flat, ordered registry of every weight and buffer of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, path: String, tensor: Tensor, kind: Kind) -> ParamId {
        debug_assert!(self.find(&path).is_none(), "duplicate parameter path {path}");
        self.entries.push(Entry { path, tensor, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_weight(&mut self, path: impl Into<String>, mut tensor: Tensor, group: Group, trainable: bool) -> ParamId {
        tensor.requires_grad = trainable;
        self.push(path.into(), tensor, Kind::Weight(group))
    }

    pub fn add_buffer(&mut self, path: impl Into<String>, mut tensor: Tensor) -> ParamId {
        tensor.requires_grad = false;
        self.push(path.into(), tensor, Kind::Buffer)
    }

    pub fn entry(&self, id: ParamId) -> &Entry {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let e = &mut self.entries[id.0];
        e.tensor.requires_grad = trainable && e.is_weight();
        if !e.tensor.requires_grad {
            e.tensor.zero_grad();
        }
    }

    pub fn find(&self, path: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.path == path).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Entry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar weights (buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_weight()).map(|e| e.tensor.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable()).map(|e| e.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Bitwise hash over every entry whose path satisfies `select`.
    pub fn content_hash(&self, select: impl Fn(&str) -> bool) -> u64 {
        let mut h = crate::tensor::Fnv::default();
        for e in self.entries.iter().filter(|e| select(&e.path)) {
            h.write(e.path.as_bytes());
            h.write(&e.tensor.content_hash().to_le_bytes());
        }
        h.finish()
    }
}

/// Train-time or evaluation-time behavior of stateful layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Mode {
    Train,
    Eval,
}

/// One forward (and optional backward) pass: a fresh graph plus the store it reads.
pub struct Session<'a> {
    pub graph: Graph,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
    bound: BTreeMap<ParamId, Var>,
    track: bool,
}

impl<'a> Session<'a> {
    /// Pass whose trainable parameters receive gradients.
    pub fn new(store: &'a mut ParamStore, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            store,
            mode,
            bound: BTreeMap::new(),
            track: true,
        }
    }

    /// Pass where every parameter is a constant.
    pub fn inference(store: &'a mut ParamStore, mode: Mode) -> Self {
        Self {
            track: false,
            ..Self::new(store, mode)
        }
    }

    /// Pass that extends `graph`; parameters bound with [`Session::bind`]
    /// use the given nodes and all others enter as constants.
    pub fn from_graph(graph: Graph, store: &'a mut ParamStore, mode: Mode) -> Self {
        Self {
            graph,
            store,
            mode,
            bound: BTreeMap::new(),
            track: false,
        }
    }

    /// Makes `v` the node read for parameter `id` from now on.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound.insert(id, v);
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }

    /// Graph node holding the current value of `id`, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let src = &self.store.entries[id.0].tensor;
        let mut t = Tensor::new(src.shape(), src.data().to_vec()).expect("stored tensors are valid");
        t.requires_grad = self.track && src.requires_grad;
        let v = self.graph.leaf(t);
        self.bound.insert(id, v);
        v
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        self.graph.constant(shape, data)
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound.get(&id).copied()
    }

    /// Back-propagates `loss` and adds the resulting gradients into the store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if let Some((node, op)) = self.graph.first_non_finite() {
            return Err(Error::NonFinite { op, node });
        }
        self.graph.backward(loss)?;
        for (&id, &v) in &self.bound {
            if let Some(g) = self.graph.take_grad(v) {
                self.store.entries[id.0].tensor.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }
}
