//! Per-stage pooling, projection into a shared embedding, and concatenation.

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::{concat, Graph, Var, NORM_EPS};

/// Layer-normalizes every token over channels (no affine), then averages
/// over all spatial positions: `[B, H, W, C] -> [B, C]`.
pub fn pool_normalize<'g>(map: Var<'g>) -> Result<Var<'g>> {
    let shape = map.shape();
    let &[b, h, w, c] = shape.as_slice() else {
        return Err(Error::dim(
            "pool_normalize",
            format!("expected [B, H, W, C], got {shape:?}"),
        ));
    };
    map.layer_norm(3, NORM_EPS)?
        .reshape(&[b, h * w, c])?
        .mean_axis(1)
}

/// Two-layer perceptron `C_s -> d_e (gelu) -> d_e`.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub stage: usize,
    pub hidden: Linear,
    pub out: Linear,
}

impl ProjectionHead {
    pub fn new(b: &mut ParamBuilder<'_>, stage: usize, in_dim: usize, embed: usize) -> Result<Self> {
        let prefix = format!("proj.stage{}", stage + 1);
        Ok(ProjectionHead {
            stage,
            hidden: Linear::fan_in(b, &format!("{prefix}.layer0"), in_dim, embed, true)?,
            out: Linear::fan_in(b, &format!("{prefix}.layer1"), embed, embed, true)?,
        })
    }

    /// `[B, C_s] -> [B, d_e]`.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, pooled: Var<'g>) -> Result<Var<'g>> {
        let shape = pooled.shape();
        if shape.len() != 2 || shape[1] != self.hidden.in_dim {
            return Err(Error::dim(
                "project",
                format!(
                    "stage {} head expects [B, {}], got {shape:?}",
                    self.stage + 1,
                    self.hidden.in_dim
                ),
            ));
        }
        let h = self.hidden.forward(g, store, pooled)?.gelu();
        self.out.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct FusedFeatures<'g> {
    /// One `[B, d_e]` projection per stage, in stage order.
    pub projected: Vec<Var<'g>>,
    /// `[B, S·d_e]`.
    pub concatenated: Var<'g>,
}

/// Concatenates `[B, d_e]` projections in stage order into `[B, S·d_e]`.
pub fn fuse<'g>(projections: &[Var<'g>]) -> Result<Var<'g>> {
    let Some(first) = projections.first() else {
        return Err(Error::dim("fuse", "no projections"));
    };
    let expect = first.shape();
    for p in projections {
        if p.shape() != expect || expect.len() != 2 {
            return Err(Error::shapes("fuse", &expect, &p.shape()));
        }
    }
    concat(projections, 1)
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub embed_dim: usize,
    pub heads: Vec<ProjectionHead>,
}

impl Fusion {
    pub fn new(b: &mut ParamBuilder<'_>, backbone: &BackboneConfig, embed_dim: usize) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::Config("fusion.embed_dim must be positive".into()));
        }
        let heads = (0..backbone.stages())
            .map(|s| ProjectionHead::new(b, s, backbone.stage_dim(s), embed_dim))
            .collect::<Result<_>>()?;
        Ok(Fusion { embed_dim, heads })
    }

    pub fn stages(&self) -> usize {
        self.heads.len()
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        stage_maps: &[Var<'g>],
    ) -> Result<FusedFeatures<'g>> {
        if stage_maps.len() != self.heads.len() {
            return Err(Error::dim(
                "fusion",
                format!("{} stage maps for {} heads", stage_maps.len(), self.heads.len()),
            ));
        }
        let projected = self
            .heads
            .iter()
            .zip(stage_maps)
            .map(|(head, &map)| head.forward(g, store, pool_normalize(map)?))
            .collect::<Result<Vec<_>>>()?;
        let concatenated = fuse(&projected)?;
        Ok(FusedFeatures {
            projected,
            concatenated,
        })
    }
}
