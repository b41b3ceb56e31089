use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::graph::{DiffGraph, NodeId};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Named trainable tensors in declaration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamList", into = "ParamList")]
pub struct ParamSet {
    entries: Vec<(String, Tensor2)>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct ParamList {
    params: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    #[serde(flatten)]
    value: Tensor2,
}

impl TryFrom<ParamList> for ParamSet {
    type Error = Error;

    fn try_from(list: ParamList) -> Result<Self> {
        let mut set = ParamSet::new();
        for p in list.params {
            set.insert(p.name, p.value)?;
        }
        Ok(set)
    }
}

impl From<ParamSet> for ParamList {
    fn from(set: ParamSet) -> Self {
        ParamList {
            params: set
                .entries
                .into_iter()
                .map(|(name, value)| NamedTensor { name, value })
                .collect(),
        }
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor2> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn value_at(&self, i: usize) -> &Tensor2 {
        &self.entries[i].1
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut Tensor2 {
        &mut self.entries[i].1
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.data().len()).sum()
    }

    /// Adds every tensor to the graph, trainable or constant.
    pub fn bind(&self, graph: &mut DiffGraph, trainable: bool) -> Bound {
        let ids = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        Bound { ids }
    }

    /// Order-sensitive FNV-1a hash over the raw bits of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in &self.entries {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Graph node ids of a bound [`ParamSet`], same order as the set.
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    pub fn from_ids(ids: Vec<NodeId>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn id(&self, params: &ParamSet, name: &str) -> Result<NodeId> {
        params
            .position(name)
            .map(|i| self.ids[i])
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))
    }

    /// Collects gradients after `DiffGraph::backward`; absent entries become zeros.
    pub fn grads(&self, graph: &DiffGraph) -> Vec<Tensor2> {
        self.ids
            .iter()
            .map(|&id| {
                graph.grad(id).cloned().unwrap_or_else(|| {
                    let (r, c) = graph.value(id).shape();
                    Tensor2::zeros(r, c)
                })
            })
            .collect()
    }
}

/// Mini-batch gradient descent with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct MomentumSgd {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Tensor2>,
}

impl MomentumSgd {
    pub fn new(params: &ParamSet, learning_rate: f64, momentum: f64) -> Self {
        let velocity = params.iter().map(|(_, t)| Tensor2::zeros(t.rows(), t.cols())).collect();
        Self {
            learning_rate,
            momentum,
            velocity,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor2]) {
        debug_assert_eq!(grads.len(), params.len());
        for (i, g) in grads.iter().enumerate() {
            let v = &mut self.velocity[i];
            for (vv, gg) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = self.momentum * *vv + gg;
            }
            let p = params.value_at_mut(i);
            for (pp, vv) in p.data_mut().iter_mut().zip(v.data()) {
                *pp -= self.learning_rate * vv;
            }
        }
    }
}
