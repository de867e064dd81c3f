//! Backbone, fusion and head assembled into one classifier.

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusedFeatures, Fusion};
use crate::heads::{Head, HeadConfig, HeadKind, HeadOutputs};
use crate::losses::{batch_loss, LossConfig, LossReport};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Shared projection width `d_e`.
    pub embed_dim: usize,
    pub head: HeadKind,
    pub grades: usize,
    /// Classifier hidden width; `2·d_e` when unset.
    pub hidden: Option<usize>,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            embed_dim: 64,
            head: HeadKind::Mphn,
            grades: 5,
            hidden: None,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Image 16, patch 4, embed 8, depths [1, 1], heads [1, 2], window 2,
    /// `d_e` 8, five grades.
    pub fn micro() -> Self {
        ModelConfig {
            backbone: BackboneConfig {
                image_size: 16,
                in_channels: 3,
                patch_size: 4,
                embed_dim: 8,
                depths: vec![1, 1],
                num_heads: vec![1, 2],
                window_size: 2,
                mlp_ratio: 2,
            },
            embed_dim: 8,
            ..ModelConfig::default()
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            kind: self.head,
            grades: self.grades,
            input_dim: self.backbone.stages() * self.embed_dim,
            embed_dim: self.embed_dim,
            hidden: self.hidden.unwrap_or(2 * self.embed_dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!(
                "init std must be finite and non-negative, got {}",
                self.init_std
            )));
        }
        self.head_config().validate()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub fusion: Fusion,
    pub head: Head,
}

#[derive(Clone, Debug)]
pub struct ModelOutput<'g> {
    pub stage_maps: Vec<Var<'g>>,
    pub fused: FusedFeatures<'g>,
    pub heads: HeadOutputs<'g>,
}

impl Model {
    /// Registers all parameters in `store` with a seeded initialization.
    pub fn new(config: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder::new(store, seed, config.init_std);
        let backbone = Backbone::new(&mut b, &config.backbone)?;
        let fusion = Fusion::new(&mut b, &config.backbone, config.embed_dim)?;
        let head = Head::new(&mut b, &config.head_config())?;
        Ok(Model {
            config: config.clone(),
            backbone,
            fusion,
            head,
        })
    }

    /// Builds the layout only. Ids match any seeded build of the same
    /// config; the values are placeholders.
    pub fn layout(config: &ModelConfig) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let cfg = ModelConfig {
            init_std: 0.0,
            ..config.clone()
        };
        let mut model = Model::new(&cfg, &mut store, 0)?;
        model.config.init_std = config.init_std;
        Ok((model, store))
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, images: Var<'g>) -> Result<ModelOutput<'g>> {
        let out = self.backbone.forward(g, store, images)?;
        let fused = self.fusion.forward(g, store, &out.stage_maps)?;
        let heads = self.head.forward(g, store, fused.concatenated)?;
        Ok(ModelOutput {
            stage_maps: out.stage_maps,
            fused,
            heads,
        })
    }

    /// Forward pass plus the full objective. Returns the scalar loss node and
    /// its numeric breakdown.
    pub fn loss<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        images: Var<'g>,
        labels: &[usize],
        cfg: &LossConfig,
    ) -> Result<(Var<'g>, LossReport, ModelOutput<'g>)> {
        if labels.len() != images.shape()[0] {
            return Err(Error::dim(
                "loss",
                format!("{} labels for batch of {}", labels.len(), images.shape()[0]),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.grades) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {} grades",
                self.config.grades
            )));
        }
        let out = self.forward(g, store, images)?;
        let (loss, supervised) = batch_loss(
            g,
            self.head.kind(),
            &out.heads,
            &out.fused.projected,
            labels,
            self.config.grades,
            cfg,
        )?;
        let report = LossReport {
            bce_per_class: supervised.iter().map(|v| v.item()).collect(),
            ncsl: loss.ncsl.item(),
            total: loss.total.item(),
        };
        Ok((loss.total, report, out))
    }

    /// Inference on a `[B, H, W, C]` batch; returns the head outputs and the
    /// decided grades.
    pub fn predict(&self, store: &ParamStore, images: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let g = Graph::new();
        let out = self.forward(&g, store, g.constant(images.clone()))?;
        let outputs = out.heads.outputs.value();
        let grades = self.head.decide(&outputs, self.config.grades);
        Ok((outputs, grades))
    }
}

/// Finite-difference check of the full objective for a freshly seeded model
/// on one synthetic image per grade.
pub fn gradcheck_model(
    config: &ModelConfig,
    loss: &LossConfig,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    fn pin<F>(f: F) -> F
    where
        F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
    {
        f
    }
    let mut store = ParamStore::new();
    let model = Model::new(config, &mut store, seed)?;
    let spec = crate::data::SyntheticSpec {
        per_grade: 1,
        grades: config.grades,
        channels: config.backbone.in_channels,
        seed,
        ..crate::data::SyntheticSpec::for_size(config.backbone.image_size)
    };
    let data = crate::data::generate(&spec)?;
    let loss_fn = pin(|g, s| {
        let x = g.constant(data.images.clone());
        Ok(model.loss(g, s, x, &data.labels, loss)?.0)
    });
    finite_diff_check(&mut store, loss_fn, opts)
}
