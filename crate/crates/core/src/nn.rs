//! Small layer building blocks shared by the backbone, fusion and heads.

use crate::error::Result;
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Graph, Var, NORM_EPS};

/// Affine map over the last axis, weights stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights drawn at the builder's fixed std.
    pub fn new(
        b: &mut ParamBuilder<'_>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = b.weight(format!("{prefix}.weight"), &[in_dim, out_dim])?;
        Linear::finish(b, prefix, weight, in_dim, out_dim, bias)
    }

    /// Weights drawn at std `1/sqrt(in_dim)`.
    pub fn fan_in(
        b: &mut ParamBuilder<'_>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = b.fan_in_weight(format!("{prefix}.weight"), &[in_dim, out_dim])?;
        Linear::finish(b, prefix, weight, in_dim, out_dim, bias)
    }

    fn finish(
        b: &mut ParamBuilder<'_>,
        prefix: &str,
        weight: ParamId,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let bias = if bias {
            Some(b.zeros(format!("{prefix}.bias"), &[out_dim])?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        let rows = shape.iter().product::<usize>() / self.in_dim.max(1);
        let flat = x.reshape(&[rows, self.in_dim])?;
        let mut y = flat.matmul(g.param(store, self.weight))?;
        if let Some(bias) = self.bias {
            y = y.add_tiled(g.param(store, bias))?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("linear input has rank >= 1") = self.out_dim;
        y.reshape(&out_shape)
    }
}

/// Layer normalization over the last axis followed by a learned affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder<'_>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            weight: b.ones(format!("{prefix}.weight"), &[dim])?,
            bias: b.zeros(format!("{prefix}.bias"), &[dim])?,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let axis = x.shape().len() - 1;
        x.layer_norm(axis, NORM_EPS)?
            .mul_tiled(g.param(store, self.weight))?
            .add_tiled(g.param(store, self.bias))
    }
}
