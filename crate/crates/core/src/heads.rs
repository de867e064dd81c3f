//! Grade classifiers over the fused representation.
//!
//! Three variants share one output record: independent per-grade sigmoid
//! heads ([`HeadKind::Mphn`]), a single softmax head ([`HeadKind::Sphn`])
//! and a scalar regressor ([`HeadKind::MlpReg`]). For the single-network
//! variants the penultimate activation doubles as the aggregated decision
//! feature.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{concat, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Sphn,
    Mphn,
    MlpReg,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Sphn => "sphn",
            HeadKind::Mphn => "mphn",
            HeadKind::MlpReg => "mlpreg",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sphn" => Ok(HeadKind::Sphn),
            "mphn" => Ok(HeadKind::Mphn),
            "mlpreg" => Ok(HeadKind::MlpReg),
            other => Err(Error::Config(format!(
                "unknown head kind {other:?} (expected sphn, mphn or mlpreg)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub grades: usize,
    /// Width of the fused input, `S·d_e`.
    pub input_dim: usize,
    /// Penultimate width; equals the projection width `d_e`.
    pub embed_dim: usize,
    pub hidden: usize,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grades < 2 || self.grades > 255 {
            return Err(Error::Config(format!(
                "grades must be in 2..=255, got {}",
                self.grades
            )));
        }
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }
}

/// `[B, S·d_e] -> [B, d_e]` through two gelu layers.
#[derive(Clone, Debug)]
pub struct DecisionMlp {
    pub hidden: Linear,
    pub decision: Linear,
}

impl DecisionMlp {
    fn new(b: &mut ParamBuilder<'_>, prefix: &str, cfg: &HeadConfig) -> Result<Self> {
        Ok(DecisionMlp {
            hidden: Linear::fan_in(b, &format!("{prefix}.layer0"), cfg.input_dim, cfg.hidden, true)?,
            decision: Linear::fan_in(b, &format!("{prefix}.layer1"), cfg.hidden, cfg.embed_dim, true)?,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, c: Var<'g>) -> Result<Var<'g>> {
        let shape = c.shape();
        if shape.len() != 2 || shape[1] != self.hidden.in_dim {
            return Err(Error::dim(
                "head_forward",
                format!("expected [B, {}], got {shape:?}", self.hidden.in_dim),
            ));
        }
        let h = self.hidden.forward(g, store, c)?.gelu();
        Ok(self.decision.forward(g, store, h)?.gelu())
    }
}

/// One-vs-rest decision maker for a single grade.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub grade: usize,
    pub mlp: DecisionMlp,
    pub omega: ParamId,
}

/// Pre-sigmoid score `ω · D_k`, shaped `[B, 1]`.
pub fn score<'g>(decision: Var<'g>, omega: Var<'g>) -> Result<Var<'g>> {
    let n = omega.shape().iter().product();
    decision.matmul(omega.reshape(&[n, 1])?)
}

/// `σ(ω · D_k)`, shaped `[B, 1]`.
pub fn predict<'g>(decision: Var<'g>, omega: Var<'g>) -> Result<Var<'g>> {
    Ok(score(decision, omega)?.sigmoid())
}

/// Elementwise mean of `[B, d]` decision features.
pub fn aggregate_decision_features<'g>(features: &[Var<'g>]) -> Result<Var<'g>> {
    let Some(first) = features.first() else {
        return Err(Error::dim("aggregate", "no decision features"));
    };
    let shape = first.shape();
    let &[b, d] = shape.as_slice() else {
        return Err(Error::dim("aggregate", format!("expected [B, d], got {shape:?}")));
    };
    let stacked = features
        .iter()
        .map(|f| {
            if f.shape() != shape {
                return Err(Error::shapes("aggregate", &shape, &f.shape()));
            }
            f.reshape(&[b, 1, d])
        })
        .collect::<Result<Vec<_>>>()?;
    concat(&stacked, 1)?.mean_axis(1)
}

#[derive(Clone, Debug)]
pub struct HeadOutputs<'g> {
    /// `[B, d_e]` per grade for the multi-head variant, a single entry
    /// otherwise.
    pub decision_features: Vec<Var<'g>>,
    /// `[B, d_e]`.
    pub aggregated: Var<'g>,
    /// Pre-activation values: `[B, K]` scores or logits, `[B, 1]` for the
    /// regressor.
    pub scores: Var<'g>,
    /// `[B, K]` probabilities, or the `[B, 1]` regression estimate.
    pub outputs: Var<'g>,
}

#[derive(Clone, Debug)]
pub enum Head {
    Mphn(Vec<ClassifierHead>),
    Sphn { mlp: DecisionMlp, out: Linear },
    MlpReg { mlp: DecisionMlp, out: Linear },
}

impl Head {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: &HeadConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            HeadKind::Mphn => Head::Mphn(
                (0..cfg.grades)
                    .map(|k| {
                        let prefix = format!("head{k}");
                        Ok(ClassifierHead {
                            grade: k,
                            mlp: DecisionMlp::new(b, &prefix, cfg)?,
                            omega: b.fan_in_weight(format!("{prefix}.omega"), &[cfg.embed_dim])?,
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
            HeadKind::Sphn => Head::Sphn {
                mlp: DecisionMlp::new(b, "sphn", cfg)?,
                out: Linear::fan_in(b, "sphn.layer2", cfg.embed_dim, cfg.grades, true)?,
            },
            HeadKind::MlpReg => Head::MlpReg {
                mlp: DecisionMlp::new(b, "reg", cfg)?,
                out: Linear::fan_in(b, "reg.layer2", cfg.embed_dim, 1, true)?,
            },
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Mphn(_) => HeadKind::Mphn,
            Head::Sphn { .. } => HeadKind::Sphn,
            Head::MlpReg { .. } => HeadKind::MlpReg,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, c: Var<'g>) -> Result<HeadOutputs<'g>> {
        match self {
            Head::Mphn(heads) => {
                let mut features = Vec::with_capacity(heads.len());
                let mut scores = Vec::with_capacity(heads.len());
                for head in heads {
                    let d = head.mlp.forward(g, store, c)?;
                    scores.push(score(d, g.param(store, head.omega))?);
                    features.push(d);
                }
                let scores = concat(&scores, 1)?;
                Ok(HeadOutputs {
                    aggregated: aggregate_decision_features(&features)?,
                    decision_features: features,
                    scores,
                    outputs: scores.sigmoid(),
                })
            }
            Head::Sphn { mlp, out } => {
                let d = mlp.forward(g, store, c)?;
                let logits = out.forward(g, store, d)?;
                Ok(HeadOutputs {
                    decision_features: vec![d],
                    aggregated: d,
                    scores: logits,
                    outputs: logits.softmax(1)?,
                })
            }
            Head::MlpReg { mlp, out } => {
                let d = mlp.forward(g, store, c)?;
                let y = out.forward(g, store, d)?;
                Ok(HeadOutputs {
                    decision_features: vec![d],
                    aggregated: d,
                    scores: y,
                    outputs: y,
                })
            }
        }
    }

    /// Grade per row of `outputs` (the `[B, K]` or `[B, 1]` head output).
    pub fn decide(&self, outputs: &crate::tensor::Tensor, grades: usize) -> Vec<usize> {
        let width = outputs.shape()[1];
        outputs
            .data()
            .chunks_exact(width)
            .map(|row| match self {
                Head::MlpReg { .. } => regressor_decide(row[0], grades),
                _ => decide_grade(row),
            })
            .collect()
    }
}

/// Argmax with ties resolved toward the lower grade.
pub fn decide_grade(probabilities: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in probabilities.iter().enumerate() {
        if p > probabilities[best] {
            best = k;
        }
    }
    best
}

/// `clamp(round(y), 0, K-1)` with half-integers rounded down.
pub fn regressor_decide(y: f64, grades: usize) -> usize {
    if y.is_nan() {
        return 0;
    }
    let top = (grades - 1) as f64;
    (y - 0.5).ceil().clamp(0.0, top) as usize
}
