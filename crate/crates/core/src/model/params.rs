use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, Tensor, Var};
use crate::Result;

/// Which component a parameter belongs to; trainability is decided per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// The language model (predictor).
    Predictor,
    /// Image-to-text projector.
    Proj,
    /// Target projector from the tapped layer into the target-encoder space.
    ProjTgt,
    /// Shared latent target vector.
    Latent,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::Predictor, ParamGroup::Proj, ParamGroup::ProjTgt, ParamGroup::Latent];
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered parameter list; the order is the checkpoint payload order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    /// Bit patterns of every value in `group`, in store order.
    pub fn group_payload(&self, group: ParamGroup) -> Vec<u64> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    /// Places every parameter on `g`; groups for which `trainable` is true
    /// become gradient-tracking leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(ParamGroup) -> bool) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable(p.group)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Bound { vars })
    }
}

/// Graph handles for every parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub(crate) fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}
