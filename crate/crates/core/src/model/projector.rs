use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamGroup, ParamId, ParamStore};
use super::init_normal;
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::Rng;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorKind {
    Linear,
    /// Two affine layers with a GELU between; hidden width = output width.
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub kind: ProjectorKind,
    pub in_dim: usize,
    pub out_dim: usize,
    layers: Vec<(ParamId, ParamId)>,
}

impl Projector {
    pub(crate) fn init(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        kind: ProjectorKind,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let dims = match kind {
            ProjectorKind::Linear => vec![(in_dim, out_dim)],
            ProjectorKind::Mlp => vec![(in_dim, out_dim), (out_dim, out_dim)],
        };
        let layers = dims
            .into_iter()
            .enumerate()
            .map(|(i, (a, b))| {
                let w = store.add(format!("{name}.{i}.weight"), group, init_normal(&[a, b], rng));
                let bias = store.add(format!("{name}.{i}.bias"), group, Tensor::zeros(&[b]));
                (w, bias)
            })
            .collect();
        Self {
            kind,
            in_dim,
            out_dim,
            layers,
        }
    }

    /// `(weight, bias)` ids of each affine layer, input side first.
    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    /// Applies the projector to every row of `x`.
    pub fn apply(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.gelu(h)?;
            }
            h = g.matmul(h, bound.var(w))?;
            h = g.add_row(h, bound.var(b))?;
        }
        Ok(h)
    }
}
