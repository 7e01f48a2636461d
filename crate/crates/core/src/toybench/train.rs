//! Mini-batch momentum SGD over the adapter and head; the backbone stays frozen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{DomainDataset, Split};
use super::model::{AdapterParams, Backbone, Head, ToyModel};
use crate::checkpoint::AdapterCheckpoint;
use crate::error::{Error, Result};

pub const TOY_SEED_KEY: &str = "toy.seed";

fn default_learning_rate() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_epochs() -> usize {
    200
}
fn default_batch_size() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_learning_rate(),
            momentum: default_momentum(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::out_of_range(
                "learning_rate",
                format!("must be finite and non-negative, got {}", self.learning_rate),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::out_of_range(
                "momentum",
                format!("must be in [0, 1), got {}", self.momentum),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::out_of_range(
                "epochs/batch_size",
                "must both be at least 1",
            ));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(a ^ splitmix(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss over the full training split after each epoch.
    pub epoch_loss: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedAdapter {
    /// Adapter tensors only, named after the domain.
    pub adapter: AdapterCheckpoint,
    pub head: Head,
    pub history: TrainHistory,
}

fn mean_loss(model: &ToyModel<'_>, features: &[Vec<f64>], split: &Split) -> f64 {
    let total: f64 = features
        .iter()
        .zip(split.labels())
        .map(|(h, &y)| model.backward(&model.activations(h.clone()), y).0)
        .sum();
    total / split.len() as f64
}

fn momentum_step(params: &mut [f64], velocity: &mut [f64], grad: &[f64], cfg: &TrainConfig, scale: f64) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = cfg.momentum * *v + g * scale;
        *p -= cfg.learning_rate * *v;
    }
}

/// Trains an adapter and head for one domain on top of a frozen backbone.
///
/// Adapter and head start from an initialization derived from `cfg.seed`
/// alone, so every domain trained with the same config shares a starting
/// point; mini-batch order also depends on the domain's seed.
pub fn train_adapter(
    backbone: &Backbone,
    domain: &DomainDataset,
    cfg: &TrainConfig,
) -> Result<TrainedAdapter> {
    cfg.validate()?;
    let spec = &domain.spec;
    if spec.input_dim != backbone.input_dim() {
        return Err(Error::Dimension(format!(
            "domain `{}` has {} inputs, backbone expects {}",
            spec.id,
            spec.input_dim,
            backbone.input_dim()
        )));
    }
    let mut adapter = AdapterParams::init(cfg.seed);
    let mut head = Head::init(spec.num_classes, cfg.seed);
    let mut adapter_velocity = AdapterParams::zeros();
    let mut head_velocity = Head::zeros(spec.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, spec.seed));

    let train = &domain.train;
    let features: Vec<Vec<f64>> = train
        .iter()
        .map(|(x, _)| backbone.features(x))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut adapter_grad = AdapterParams::zeros();
            let mut head_grad = Head::zeros(spec.num_classes);
            {
                let model = ToyModel::new(backbone, &adapter, &head);
                for &i in batch {
                    let act = model.activations(features[i].clone());
                    let (_, g) = model.backward(&act, train.label(i));
                    for (acc, part) in adapter_grad.slices_mut().into_iter().zip(g.adapter.slices()) {
                        acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
                    }
                    for (acc, part) in head_grad
                        .slices_mut()
                        .into_iter()
                        .zip([&g.head.weight, &g.head.bias])
                    {
                        acc.iter_mut().zip(part.iter()).for_each(|(a, b)| *a += b);
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for ((p, v), g) in adapter
                .slices_mut()
                .into_iter()
                .zip(adapter_velocity.slices_mut())
                .zip(adapter_grad.slices())
            {
                momentum_step(p, v, g, cfg, scale);
            }
            let head_grads = [head_grad.weight.as_slice(), head_grad.bias.as_slice()];
            for ((p, v), g) in head
                .slices_mut()
                .into_iter()
                .zip(head_velocity.slices_mut())
                .zip(head_grads)
            {
                momentum_step(p, v, g, cfg, scale);
            }
        }
        let loss = mean_loss(&ToyModel::new(backbone, &adapter, &head), &features, train);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.push(loss);
    }

    adapter.round_to_f32();
    head.round_to_f32();
    let mut ckpt = adapter.to_checkpoint().with_name(spec.id.clone());
    ckpt.set_metadata(TOY_SEED_KEY, cfg.seed.to_string());
    Ok(TrainedAdapter {
        adapter: ckpt,
        head,
        history: TrainHistory {
            epoch_loss: history,
        },
    })
}
