//! Gradient-weighted class activation maps over the final stage.

use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor};

/// `relu(Σ_c w_c · A[:, :, c])` with `w_c` the spatial mean of the gradient,
/// scaled so the maximum is 1 when any value is positive.
/// `activations` and `gradient` are `[H, W, C]`; the result is `[H, W]`.
pub fn gradcam_map(activations: &Tensor, gradient: &Tensor) -> Result<Tensor> {
    if activations.shape() != gradient.shape() || activations.rank() != 3 {
        return Err(Error::shapes("gradcam", activations.shape(), gradient.shape()));
    }
    let (h, w, c) = (activations.shape()[0], activations.shape()[1], activations.shape()[2]);
    let positions = (h * w) as f64;
    let mut weights = vec![0.0; c];
    for px in gradient.data().chunks_exact(c) {
        weights.iter_mut().zip(px).for_each(|(a, g)| *a += g);
    }
    weights.iter_mut().for_each(|a| *a /= positions);
    let mut map: Vec<f64> = activations
        .data()
        .chunks_exact(c)
        .map(|px| px.iter().zip(&weights).map(|(a, w)| a * w).sum::<f64>().max(0.0))
        .collect();
    let top = map.iter().cloned().fold(0.0, f64::max);
    if top > 0.0 {
        map.iter_mut().for_each(|v| *v /= top);
    }
    Tensor::new(vec![h, w], map)
}

/// Heat map for `grade` on one `[H, W, C]` or `[1, H, W, C]` image.
///
/// The conditioning score is the pre-sigmoid `ω_k · D_k` for the multi-head
/// variant, the pre-softmax logit for the single head, and `-(ŷ - k)²` for
/// the regressor. Parameter gradient accumulators are not touched.
pub fn gradcam(model: &Model, store: &ParamStore, image: &Tensor, grade: usize) -> Result<Tensor> {
    if grade >= model.config.grades {
        return Err(Error::Contract(format!(
            "grade {grade} out of range for {} grades",
            model.config.grades
        )));
    }
    let image = match image.rank() {
        3 => image.clone().reshaped(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?,
        4 if image.shape()[0] == 1 => image.clone(),
        _ => {
            return Err(Error::dim(
                "gradcam",
                format!("expected one image, got {:?}", image.shape()),
            ))
        }
    };
    let g = Graph::new();
    let out = model.forward(&g, store, g.constant(image))?;
    let last = *out.stage_maps.last().expect("at least one stage");
    let score = match model.head.kind() {
        HeadKind::Mphn | HeadKind::Sphn => out.heads.scores.slice(1, grade, 1)?.sum(),
        HeadKind::MlpReg => {
            let diff = out.heads.scores.sum().sub(g.constant(Tensor::scalar(grade as f64)))?;
            diff.mul(diff)?.scale(-1.0)
        }
    };
    let grads = g.gradients(score)?;
    let shape = last.shape();
    let hwc = &shape[1..];
    let activations = last.value().reshaped(hwc)?;
    let gradient = grads.of(last).reshaped(hwc)?;
    gradcam_map(&activations, &gradient)
}

/// 8-bit binary PGM of a `[H, W]` map in `[0, 1]`, each cell drawn as a
/// `scale × scale` block.
pub fn to_pgm(map: &Tensor, scale: usize) -> Result<Vec<u8>> {
    if map.rank() != 2 || scale == 0 {
        return Err(Error::dim("pgm", format!("expected [H, W] map, got {:?}", map.shape())));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("P5\n{} {}\n255\n", w * scale, h * scale).into_bytes();
    for y in 0..h * scale {
        for x in 0..w * scale {
            let v = map.data()[(y / scale) * w + x / scale];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}
