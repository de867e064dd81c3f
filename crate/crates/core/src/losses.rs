//! Supervised terms, the stop-gradient alignment regularizer, and their sum.

use crate::error::{Error, Result};
use crate::heads::{HeadKind, HeadOutputs};
use crate::tensor::{Graph, Tensor, Var, NORM_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub bce_eps: f64,
    pub ncsl_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            bce_eps: 1e-7,
            ncsl_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "loss.lambda must be a finite non-negative number, got {}",
                self.lambda
            )));
        }
        if !(self.bce_eps > 0.0 && self.bce_eps <= 1e-3) {
            return Err(Error::Config(format!(
                "loss.bce_eps must lie in (0, 1e-3], got {}",
                self.bce_eps
            )));
        }
        Ok(())
    }

    /// Weight actually applied to the regularizer.
    pub fn effective_lambda(&self) -> f64 {
        if self.ncsl_enabled {
            self.lambda
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// Per-grade BCE, or a single mean-squared error for the regressor.
    pub bce_per_class: Vec<f64>,
    pub ncsl: f64,
    pub total: f64,
}

impl LossReport {
    pub fn sum_bce(&self) -> f64 {
        self.bce_per_class.iter().sum()
    }
}

/// BCE summed over the batch then divided by its size. `pred` holds
/// probabilities, one per sample.
pub fn bce<'g>(pred: Var<'g>, target: &[f64], eps: f64) -> Result<Var<'g>> {
    let n = pred.shape().iter().product::<usize>();
    if n != target.len() {
        return Err(Error::dim(
            "bce",
            format!("{n} predictions for {} targets", target.len()),
        ));
    }
    Ok(pred.binary_cross_entropy_sum(target, eps)?.scale(1.0 / n as f64))
}

/// Negative cosine similarity between each `[B, d]` stage projection and
/// the detached decision feature `d`, averaged over stages and then over
/// the batch.
pub fn ncsl<'g>(projected: &[Var<'g>], decision: Var<'g>) -> Result<Var<'g>> {
    if projected.is_empty() {
        return Err(Error::dim("ncsl", "no stage projections"));
    }
    let shape = decision.shape();
    if shape.len() != 2 {
        return Err(Error::dim("ncsl", format!("expected [B, d], got {shape:?}")));
    }
    let target = decision.stop_gradient().l2_normalize(1, NORM_EPS)?;
    let mut sum: Option<Var<'g>> = None;
    for p in projected {
        if p.shape() != shape {
            return Err(Error::shapes("ncsl", &p.shape(), &shape));
        }
        let cos = p.l2_normalize(1, NORM_EPS)?.mul(target)?.sum_axis(1)?;
        sum = Some(match sum {
            Some(s) => s.add(cos)?,
            None => cos,
        });
    }
    let per_sample = sum.expect("non-empty").scale(-1.0 / projected.len() as f64);
    Ok(per_sample.mean())
}

/// `Σ bce_k + λ·ncsl`, with the regularizer dropped entirely when disabled
/// or weighted by zero.
pub fn total_loss<'g>(supervised: &[Var<'g>], ncsl: Var<'g>, cfg: &LossConfig) -> Result<Var<'g>> {
    let Some((first, rest)) = supervised.split_first() else {
        return Err(Error::Contract("total loss needs at least one supervised term".into()));
    };
    let mut total = *first;
    for &t in rest {
        total = total.add(t)?;
    }
    let lambda = cfg.effective_lambda();
    if lambda != 0.0 {
        total = total.add(ncsl.scale(lambda))?;
    }
    Ok(total)
}

/// Plain-number form of [`total_loss`].
pub fn combine(bce_per_class: &[f64], ncsl: f64, cfg: &LossConfig) -> f64 {
    let sum: f64 = bce_per_class.iter().sum();
    let lambda = cfg.effective_lambda();
    if lambda != 0.0 {
        sum + lambda * ncsl
    } else {
        sum
    }
}

/// The full objective for one batch of head outputs.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss<'g> {
    pub total: Var<'g>,
    pub ncsl: Var<'g>,
}

pub fn one_hot(labels: &[usize], grade: usize) -> Vec<f64> {
    labels.iter().map(|&l| if l == grade { 1.0 } else { 0.0 }).collect()
}

pub fn batch_loss<'g>(
    g: &'g Graph,
    kind: HeadKind,
    heads: &HeadOutputs<'g>,
    projected: &[Var<'g>],
    labels: &[usize],
    grades: usize,
    cfg: &LossConfig,
) -> Result<(BatchLoss<'g>, Vec<Var<'g>>)> {
    let b = labels.len();
    let supervised = match kind {
        HeadKind::Mphn | HeadKind::Sphn => (0..grades)
            .map(|k| {
                let p = heads.outputs.slice(1, k, 1)?;
                bce(p, &one_hot(labels, k), cfg.bce_eps)
            })
            .collect::<Result<Vec<_>>>()?,
        HeadKind::MlpReg => {
            let target = g.constant(Tensor::new(
                vec![b, 1],
                labels.iter().map(|&l| l as f64).collect(),
            )?);
            let diff = heads.outputs.sub(target)?;
            vec![diff.mul(diff)?.mean()]
        }
    };
    let reg = ncsl(projected, heads.aggregated)?;
    let total = total_loss(&supervised, reg, cfg)?;
    Ok((BatchLoss { total, ncsl: reg }, supervised))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn row(g: &Graph, v: Vec<f64>) -> Var<'_> {
        g.constant(Tensor::new(vec![1, v.len()], v).unwrap())
    }

    #[test]
    fn bce_examples() {
        let g = Graph::new();
        let half = g.constant(Tensor::vector(vec![0.5]));
        assert!((bce(half, &[1.0], 1e-7).unwrap().item() - LN_2).abs() < 1e-9);
        assert!((bce(half, &[0.0], 1e-7).unwrap().item() - LN_2).abs() < 1e-9);
        let one = g.constant(Tensor::vector(vec![1.0]));
        let perfect = bce(one, &[1.0], 1e-7).unwrap().item();
        assert!((0.0..1e-6).contains(&perfect));
    }

    #[test]
    fn bce_is_a_batch_mean_of_per_sample_sums() {
        let g = Graph::new();
        let p = g.constant(Tensor::vector(vec![0.5, 0.5, 0.5, 0.5]));
        let v = bce(p, &[1.0, 0.0, 1.0, 1.0], 1e-7).unwrap().item();
        assert!((v - LN_2).abs() < 1e-12);
        assert!(matches!(bce(p, &[1.0], 1e-7), Err(Error::Dimension { .. })));
    }

    #[test]
    fn ncsl_examples() {
        let g = Graph::new();
        let d = row(&g, vec![0.3, -1.2, 2.0]);
        let same = row(&g, vec![0.3, -1.2, 2.0]);
        assert!((ncsl(&[same, same], d).unwrap().item() + 1.0).abs() < 1e-12);
        let anti = row(&g, vec![-0.3, 1.2, -2.0]);
        assert!((ncsl(&[anti], d).unwrap().item() - 1.0).abs() < 1e-12);
        let e1 = row(&g, vec![1.0, 0.0]);
        let e2 = row(&g, vec![0.0, 1.0]);
        assert_eq!(ncsl(&[e2, e2, e2], e1).unwrap().item(), 0.0);
    }

    #[test]
    fn ncsl_rejects_mismatched_widths() {
        let g = Graph::new();
        assert!(ncsl(&[row(&g, vec![1.0, 2.0])], row(&g, vec![1.0])).is_err());
        assert!(ncsl(&[], row(&g, vec![1.0])).is_err());
    }

    #[test]
    fn total_loss_example() {
        let cfg = LossConfig::default();
        assert!((combine(&[0.5, 1.5], -0.5, &cfg) - 1.95).abs() < 1e-9);
        let g = Graph::new();
        let a = g.constant(Tensor::scalar(0.5));
        let b = g.constant(Tensor::scalar(1.5));
        let n = g.constant(Tensor::scalar(-0.5));
        assert!((total_loss(&[a, b], n, &cfg).unwrap().item() - 1.95).abs() < 1e-9);
        let zero = LossConfig { lambda: 0.0, ..cfg.clone() };
        assert_eq!(total_loss(&[a, b], n, &zero).unwrap().item(), 2.0);
        let off = LossConfig { ncsl_enabled: false, ..cfg };
        assert_eq!(total_loss(&[a, b], n, &off).unwrap().item(), 2.0);
    }

    #[test]
    fn ncsl_does_not_reach_the_decision_side() {
        let mut store = crate::params::ParamStore::new();
        let pid = store.add("p", Tensor::new(vec![2, 3], vec![1.0, 2.0, -1.0, 0.5, 0.1, 0.3]).unwrap()).unwrap();
        let did = store.add("d", Tensor::new(vec![2, 3], vec![0.2, -0.4, 1.0, 2.0, 1.0, -3.0]).unwrap()).unwrap();
        let g = Graph::new();
        let loss = ncsl(&[g.param(&store, pid)], g.param(&store, did)).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert!(store.grad(did).data().iter().all(|v| v.to_bits() == 0));
        assert!(store.grad(pid).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn validate_bounds() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { lambda: -0.1, ..Default::default() }.validate().is_err());
        assert!(LossConfig { bce_eps: 0.01, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn ncsl_is_bounded_and_scale_free(
            vals in proptest::collection::vec(-10.0f64..10.0, 16),
            t in 1e-3f64..1e3,
        ) {
            let g = Graph::new();
            let d = g.constant(Tensor::new(vec![2, 2], vals[..4].to_vec()).unwrap());
            let ps: Vec<Var> = vals[4..]
                .chunks(4)
                .map(|c| g.constant(Tensor::new(vec![2, 2], c.to_vec()).unwrap()))
                .collect();
            let v = ncsl(&ps, d).unwrap().item();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
            let scaled: Vec<Var> = ps.iter().map(|p| p.scale(t)).collect();
            prop_assert!((ncsl(&scaled, d).unwrap().item() - v).abs() <= 1e-9);
        }

        #[test]
        fn bce_is_non_negative(p in 0.0f64..=1.0, y in 0u8..=1) {
            let g = Graph::new();
            let pred = g.constant(Tensor::vector(vec![p]));
            prop_assert!(bce(pred, &[f64::from(y)], 1e-7).unwrap().item() >= 0.0);
        }
    }
}
