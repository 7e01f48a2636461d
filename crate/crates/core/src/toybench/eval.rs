//! Accuracy evaluation, optionally under a fast-gradient-sign attack.

use super::data::Split;
use super::model::{argmax, AdapterParams, Backbone, Head, ToyModel};
use crate::checkpoint::AdapterCheckpoint;
use crate::error::{Error, Result};

/// FGSM step size used unless configured otherwise.
pub const DEFAULT_FGSM_EPSILON: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Attack {
    None,
    Fgsm { epsilon: f64 },
}

/// `x + ε·sign(∇ₓ L(f(x), y))`, with `sign(0) = 0`.
pub fn fgsm_perturb(model: &ToyModel<'_>, x: &[f64], label: usize, epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::out_of_range(
            "epsilon",
            format!("must be finite and non-negative, got {epsilon}"),
        ));
    }
    let (_, _, grad) = model.loss_and_gradients(x, label)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    Ok(x
        .iter()
        .zip(&grad)
        .map(|(&xi, &g)| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            xi + epsilon * s
        })
        .collect())
}

/// Fraction of `split` classified correctly.
pub fn evaluate_params(model: &ToyModel<'_>, split: &Split, attack: Attack) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Dimension("cannot evaluate an empty split".into()));
    }
    let mut correct = 0usize;
    for (x, y) in split.iter() {
        let pred = match attack {
            Attack::None => model.predict(x)?,
            Attack::Fgsm { epsilon } => {
                let adv = fgsm_perturb(model, x, y, epsilon)?;
                argmax(&model.forward(&adv)?)
            }
        };
        if pred == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Accuracy of `adapter` (a checkpoint, e.g. a mixture) with the given head.
pub fn evaluate(
    backbone: &Backbone,
    adapter: &AdapterCheckpoint,
    head: &Head,
    split: &Split,
    attack: Attack,
) -> Result<f64> {
    let params = AdapterParams::from_checkpoint(adapter)?;
    if split.dim() != backbone.input_dim() {
        return Err(Error::Dimension(format!(
            "split has {} inputs, backbone expects {}",
            split.dim(),
            backbone.input_dim()
        )));
    }
    if let Some(&y) = split.labels().iter().find(|&&y| y >= head.classes()) {
        return Err(Error::Dimension(format!(
            "label {y} but the head has {} classes",
            head.classes()
        )));
    }
    evaluate_params(&ToyModel::new(backbone, &params, head), split, attack)
}
