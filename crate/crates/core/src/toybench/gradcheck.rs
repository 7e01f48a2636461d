//! Central finite-difference checks for the hand-derived gradients.

use super::model::{AdapterParams, Head, ToyModel};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-4;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Largest relative error between `analytic` and the central difference of
/// `f` at `point`, one coordinate at a time.
pub fn central_difference_check<F>(mut f: F, point: &[f64], analytic: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len());
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let up = f(&probe);
        probe[i] = point[i] - step;
        let down = f(&probe);
        probe[i] = point[i];
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

const ADAPTER_LEN: usize = 4;

fn flatten(adapter: &AdapterParams, head: &Head, x: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for s in adapter.slices() {
        out.extend_from_slice(s);
    }
    out.extend_from_slice(&head.weight);
    out.extend_from_slice(&head.bias);
    out.extend_from_slice(x);
    out
}

fn unflatten(flat: &[f64], adapter: &mut AdapterParams, head: &mut Head, x: &mut [f64]) {
    let mut offset = 0;
    let mut take = |dst: &mut [f64]| {
        dst.copy_from_slice(&flat[offset..offset + dst.len()]);
        offset += dst.len();
    };
    let slices = adapter.slices_mut();
    debug_assert_eq!(slices.len(), ADAPTER_LEN);
    for s in slices {
        take(s);
    }
    for s in head.slices_mut() {
        take(s);
    }
    take(x);
}

/// Max relative error of the analytic gradient of the loss with respect to
/// every adapter parameter, head parameter and input coordinate.
pub fn grad_check(model: &ToyModel<'_>, x: &[f64], label: usize) -> Result<f64> {
    let (_, grads, d_input) = model.loss_and_gradients(x, label)?;
    let analytic = flatten(&grads.adapter, &grads.head, &d_input);
    let point = flatten(model.adapter, model.head, x);

    let mut adapter = model.adapter.clone();
    let mut head = model.head.clone();
    let mut input = x.to_vec();
    let backbone = model.backbone;
    let loss_at = |flat: &[f64]| {
        unflatten(flat, &mut adapter, &mut head, &mut input);
        ToyModel::new(backbone, &adapter, &head)
            .loss(&input, label)
            .expect("dimensions were checked above")
    };
    Ok(central_difference_check(loss_at, &point, &analytic, FD_STEP))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toybench::model::Backbone;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn quadratic_is_exact() {
        // f(θ) = ½‖Aθ − b‖², ∇f = Aᵀ(Aθ − b).
        let a = [[2.0, -1.0, 0.5], [0.3, 1.5, -2.0]];
        let b = [0.7, -1.2];
        let residual = |t: &[f64]| -> Vec<f64> {
            (0..2)
                .map(|i| (0..3).map(|j| a[i][j] * t[j]).sum::<f64>() - b[i])
                .collect()
        };
        let f = |t: &[f64]| residual(t).iter().map(|r| 0.5 * r * r).sum::<f64>();
        let theta = [0.4, -0.9, 1.3];
        let r = residual(&theta);
        let grad: Vec<f64> = (0..3)
            .map(|j| (0..2).map(|i| a[i][j] * r[i]).sum())
            .collect();
        assert!(central_difference_check(f, &theta, &grad, FD_STEP) <= 1e-9);
    }

    #[test]
    fn toy_model_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let backbone = Backbone::init(16, 1);
        let mut adapter = AdapterParams::init(2);
        for v in adapter.up_weight.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
            *v *= 0.3;
        }
        let head = Head::init(3, 3);
        let model = ToyModel::new(&backbone, &adapter, &head);
        for i in 0..5 {
            let x: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
            let err = grad_check(&model, &x, i % 3).unwrap();
            assert!(err <= 1e-4, "point {i}: {err}");
        }
    }

    #[test]
    fn confident_fit_is_stationary() {
        let backbone = Backbone::init(16, 1);
        let adapter = AdapterParams::init(2);
        let mut head = Head::init(2, 3);
        let x = vec![0.5; 16];
        let h = ToyModel::new(&backbone, &adapter, &head).activations(backbone.features(&x).unwrap());
        // Point class 0's weights along the adapted features so its margin is huge.
        let norm: f64 = h.adapted.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..h.adapted.len() {
            head.weight[j] = 100.0 * h.adapted[j] / norm;
            head.weight[32 + j] = -head.weight[j];
        }
        let model = ToyModel::new(&backbone, &adapter, &head);
        let (loss, grads, d_input) = model.loss_and_gradients(&x, 0).unwrap();
        assert!(loss < 1e-12);
        let sq: f64 = flatten(&grads.adapter, &grads.head, &d_input)
            .iter()
            .map(|g| g * g)
            .sum();
        assert!(sq.sqrt() < 1e-6, "{}", sq.sqrt());
    }
}
