use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph};
use super::{Scalar, Tensor};
use crate::error::{CoalaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The disjoint parameter sets of the model. The first six are the sets the
/// joint objective optimizes; `CnnHead` belongs to the supervised baseline and
/// `Classifier` to the downstream probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    AudioEncoder,
    AudioDecoder,
    TagEncoder,
    TagDecoder,
    AudioProjection,
    TagProjection,
    CnnHead,
    Classifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::AudioEncoder,
        ParamGroup::AudioDecoder,
        ParamGroup::TagEncoder,
        ParamGroup::TagDecoder,
        ParamGroup::AudioProjection,
        ParamGroup::TagProjection,
        ParamGroup::CnnHead,
        ParamGroup::Classifier,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by gradient descent.
    Weight,
    /// Batch-norm running mean or variance; checkpointed but never given a gradient.
    RunningStat,
}

#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub group: ParamGroup,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    /// Same shape as `value`; `None` for running statistics.
    pub grad: Option<Tensor<T>>,
}

/// Owns every parameter and buffer of a model in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        kind: ParamKind,
        value: Tensor<T>,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(CoalaError::Invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = match kind {
            ParamKind::Weight => Some(Tensor::zeros(value.shape())),
            ParamKind::RunningStat => None,
        };
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            group,
            kind,
            value,
            grad,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of trainable scalars in the given groups.
    pub fn count_weights(&self, groups: &[ParamGroup]) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight && groups.contains(&p.group))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Adds the gradients of every parameter leaf on `graph` into the stored grads.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, grads: &Gradients<T>) -> Result<()> {
        for (id, var) in graph.param_leaves() {
            if let (Some(g), Some(acc)) = (grads.get(var), self.params[id.0].grad.as_mut()) {
                acc.add_assign(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if let Some(g) = p.grad.as_mut() {
                g.data_mut().fill(T::zero());
            }
        }
    }

    /// Squared L2 norm of the gradients of the selected parameters.
    pub fn grad_norm_sq(&self, select: impl Fn(&Parameter<T>) -> bool) -> f64 {
        self.params
            .iter()
            .filter(|p| select(p))
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum()
    }
}
