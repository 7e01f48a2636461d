//! A tiny frozen backbone with a residual bottleneck adapter and a linear head.
//!
//! ```text
//! h      = tanh(W1·x + b1)
//! h'     = h + U·relu(D·h + bD) + bU
//! logits = Wh·h' + bh
//! ```
//!
//! Parameters are held in f64 for training and gradient checks; everything
//! that crosses a checkpoint boundary is rounded to f32.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{AdapterCheckpoint, Tensor};
use crate::error::{Error, Result};

pub const HIDDEN_DIM: usize = 32;
pub const BOTTLENECK_DIM: usize = 8;

pub const BACKBONE_WEIGHT: &str = "backbone.weight";
pub const BACKBONE_BIAS: &str = "backbone.bias";
pub const ADAPTER_DOWN_WEIGHT: &str = "adapter.down.weight";
pub const ADAPTER_DOWN_BIAS: &str = "adapter.down.bias";
pub const ADAPTER_UP_WEIGHT: &str = "adapter.up.weight";
pub const ADAPTER_UP_BIAS: &str = "adapter.up.bias";
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Adapter tensor names, in checkpoint order.
pub const ADAPTER_TENSORS: [&str; 4] = [
    ADAPTER_DOWN_BIAS,
    ADAPTER_DOWN_WEIGHT,
    ADAPTER_UP_BIAS,
    ADAPTER_UP_WEIGHT,
];

fn normal_f32_values(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n)
        .map(|_| f64::from(dist.sample(rng) as f32))
        .collect()
}

fn to_f32(values: &[f64]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}

fn round_f32(values: &mut [f64]) {
    for v in values {
        *v = f64::from(*v as f32);
    }
}

fn read_tensor(ckpt: &AdapterCheckpoint, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let t = ckpt
        .get(name)
        .ok_or_else(|| Error::Dimension(format!("checkpoint lacks tensor `{name}`")))?;
    if t.shape() != shape {
        return Err(Error::Dimension(format!(
            "tensor `{name}` has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(t.data().iter().map(|&v| f64::from(v)).collect())
}

/// `out = W·x + b` for row-major `W` of shape `[b.len() × x.len()]`.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(i, &bi)| {
            let row = &w[i * cols..(i + 1) * cols];
            bi + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

/// `out = Wᵀ·g` for row-major `W` of shape `[g.len() × cols]`.
fn affine_transpose(w: &[f64], g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, &gi) in g.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *o += wij * gi;
        }
    }
    out
}

/// `acc += g ⊗ x` into a row-major `[g.len() × x.len()]` matrix.
fn add_outer(acc: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (i, &gi) in g.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        for (a, &xj) in acc[i * cols..(i + 1) * cols].iter_mut().zip(x) {
            *a += gi * xj;
        }
    }
}

/// The frozen `tanh` projection shared by every domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    input_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Backbone {
    pub fn init(input_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = normal_f32_values(&mut rng, HIDDEN_DIM * input_dim, (input_dim as f64).powf(-0.5));
        let bias = normal_f32_values(&mut rng, HIDDEN_DIM, 0.1);
        Self {
            input_dim,
            weight,
            bias,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension(format!(
                "input has {} values, backbone expects {}",
                x.len(),
                self.input_dim
            )));
        }
        let mut h = affine(&self.weight, &self.bias, x);
        h.iter_mut().for_each(|v| *v = v.tanh());
        Ok(h)
    }

    pub fn to_checkpoint(&self) -> AdapterCheckpoint {
        AdapterCheckpoint::from_tensors([
            (
                BACKBONE_WEIGHT,
                Tensor::new(vec![HIDDEN_DIM, self.input_dim], to_f32(&self.weight))
                    .expect("shape"),
            ),
            (
                BACKBONE_BIAS,
                Tensor::new(vec![HIDDEN_DIM], to_f32(&self.bias)).expect("shape"),
            ),
        ])
        .expect("valid backbone")
        .with_name("backbone")
    }

    pub fn from_checkpoint(ckpt: &AdapterCheckpoint) -> Result<Self> {
        let w = ckpt
            .get(BACKBONE_WEIGHT)
            .ok_or_else(|| Error::Dimension(format!("checkpoint lacks `{BACKBONE_WEIGHT}`")))?;
        let input_dim = match w.shape() {
            [HIDDEN_DIM, d] => *d,
            other => {
                return Err(Error::Dimension(format!(
                    "`{BACKBONE_WEIGHT}` has shape {other:?}, expected [{HIDDEN_DIM}, d]"
                )))
            }
        };
        Ok(Self {
            input_dim,
            weight: read_tensor(ckpt, BACKBONE_WEIGHT, &[HIDDEN_DIM, input_dim])?,
            bias: read_tensor(ckpt, BACKBONE_BIAS, &[HIDDEN_DIM])?,
        })
    }
}

/// Trainable bottleneck adapter (also used as its own gradient container).
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    /// `D`, `[BOTTLENECK_DIM × HIDDEN_DIM]`.
    pub down_weight: Vec<f64>,
    pub down_bias: Vec<f64>,
    /// `U`, `[HIDDEN_DIM × BOTTLENECK_DIM]`.
    pub up_weight: Vec<f64>,
    pub up_bias: Vec<f64>,
}

impl AdapterParams {
    pub fn zeros() -> Self {
        Self {
            down_weight: vec![0.0; BOTTLENECK_DIM * HIDDEN_DIM],
            down_bias: vec![0.0; BOTTLENECK_DIM],
            up_weight: vec![0.0; HIDDEN_DIM * BOTTLENECK_DIM],
            up_bias: vec![0.0; HIDDEN_DIM],
        }
    }

    /// Shared starting point for every domain's adapter.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada9_7e55_0000_0001);
        let down_weight = normal_f32_values(
            &mut rng,
            BOTTLENECK_DIM * HIDDEN_DIM,
            (HIDDEN_DIM as f64).powf(-0.5),
        );
        let up_weight = normal_f32_values(&mut rng, HIDDEN_DIM * BOTTLENECK_DIM, 0.01);
        Self {
            down_weight,
            down_bias: vec![0.0; BOTTLENECK_DIM],
            up_weight,
            up_bias: vec![0.0; HIDDEN_DIM],
        }
    }

    pub fn slices(&self) -> [&[f64]; 4] {
        [
            &self.down_weight,
            &self.down_bias,
            &self.up_weight,
            &self.up_bias,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.down_weight,
            &mut self.down_bias,
            &mut self.up_weight,
            &mut self.up_bias,
        ]
    }

    pub fn round_to_f32(&mut self) {
        self.slices_mut().into_iter().for_each(round_f32);
    }

    pub fn to_checkpoint(&self) -> AdapterCheckpoint {
        AdapterCheckpoint::from_tensors([
            (
                ADAPTER_DOWN_WEIGHT,
                Tensor::new(vec![BOTTLENECK_DIM, HIDDEN_DIM], to_f32(&self.down_weight))
                    .expect("shape"),
            ),
            (
                ADAPTER_DOWN_BIAS,
                Tensor::new(vec![BOTTLENECK_DIM], to_f32(&self.down_bias)).expect("shape"),
            ),
            (
                ADAPTER_UP_WEIGHT,
                Tensor::new(vec![HIDDEN_DIM, BOTTLENECK_DIM], to_f32(&self.up_weight))
                    .expect("shape"),
            ),
            (
                ADAPTER_UP_BIAS,
                Tensor::new(vec![HIDDEN_DIM], to_f32(&self.up_bias)).expect("shape"),
            ),
        ])
        .expect("adapter has parameters")
    }

    /// Reads the four adapter tensors; any other tensor is a dimension error.
    pub fn from_checkpoint(ckpt: &AdapterCheckpoint) -> Result<Self> {
        if let Some(extra) = ckpt.tensor_names().find(|n| !ADAPTER_TENSORS.contains(n)) {
            return Err(Error::Dimension(format!(
                "unexpected tensor `{extra}` in adapter checkpoint"
            )));
        }
        Ok(Self {
            down_weight: read_tensor(ckpt, ADAPTER_DOWN_WEIGHT, &[BOTTLENECK_DIM, HIDDEN_DIM])?,
            down_bias: read_tensor(ckpt, ADAPTER_DOWN_BIAS, &[BOTTLENECK_DIM])?,
            up_weight: read_tensor(ckpt, ADAPTER_UP_WEIGHT, &[HIDDEN_DIM, BOTTLENECK_DIM])?,
            up_bias: read_tensor(ckpt, ADAPTER_UP_BIAS, &[HIDDEN_DIM])?,
        })
    }
}

/// Per-domain linear classifier over adapted features.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    classes: usize,
    /// `[classes × HIDDEN_DIM]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Head {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            weight: vec![0.0; classes * HIDDEN_DIM],
            bias: vec![0.0; classes],
        }
    }

    pub fn init(classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4ead_0000_0000_0002);
        Self {
            classes,
            weight: normal_f32_values(&mut rng, classes * HIDDEN_DIM, 0.1),
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn round_to_f32(&mut self) {
        self.slices_mut().into_iter().for_each(round_f32);
    }

    pub fn to_checkpoint(&self) -> AdapterCheckpoint {
        AdapterCheckpoint::from_tensors([
            (
                HEAD_WEIGHT,
                Tensor::new(vec![self.classes, HIDDEN_DIM], to_f32(&self.weight))
                    .expect("shape"),
            ),
            (
                HEAD_BIAS,
                Tensor::new(vec![self.classes], to_f32(&self.bias)).expect("shape"),
            ),
        ])
        .expect("head has parameters")
    }

    pub fn from_checkpoint(ckpt: &AdapterCheckpoint) -> Result<Self> {
        let classes = match ckpt.get(HEAD_BIAS).map(Tensor::shape) {
            Some([c]) => *c,
            _ => {
                return Err(Error::Dimension(format!(
                    "checkpoint lacks a one-dimensional `{HEAD_BIAS}`"
                )))
            }
        };
        Ok(Self {
            classes,
            weight: read_tensor(ckpt, HEAD_WEIGHT, &[classes, HIDDEN_DIM])?,
            bias: read_tensor(ckpt, HEAD_BIAS, &[classes])?,
        })
    }
}

/// Intermediate values of one forward pass above the backbone.
#[derive(Debug, Clone)]
pub struct Activations {
    pub features: Vec<f64>,
    pub bottleneck_pre: Vec<f64>,
    pub bottleneck: Vec<f64>,
    pub adapted: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Loss gradients for one example.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub adapter: AdapterParams,
    pub head: Head,
    /// With respect to the backbone features `h`.
    pub features: Vec<f64>,
}

/// Softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Backbone, adapter and head assembled for inference.
#[derive(Debug, Clone, Copy)]
pub struct ToyModel<'a> {
    pub backbone: &'a Backbone,
    pub adapter: &'a AdapterParams,
    pub head: &'a Head,
}

impl<'a> ToyModel<'a> {
    pub fn new(backbone: &'a Backbone, adapter: &'a AdapterParams, head: &'a Head) -> Self {
        Self {
            backbone,
            adapter,
            head,
        }
    }

    /// Everything above the backbone, starting from features `h`.
    pub fn activations(&self, features: Vec<f64>) -> Activations {
        let a = self.adapter;
        let bottleneck_pre = affine(&a.down_weight, &a.down_bias, &features);
        let bottleneck: Vec<f64> = bottleneck_pre.iter().map(|&v| v.max(0.0)).collect();
        let up = affine(&a.up_weight, &a.up_bias, &bottleneck);
        let adapted: Vec<f64> = features.iter().zip(&up).map(|(h, u)| h + u).collect();
        let logits = affine(&self.head.weight, &self.head.bias, &adapted);
        Activations {
            features,
            bottleneck_pre,
            bottleneck,
            adapted,
            logits,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.activations(self.backbone.features(x)?).logits)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Loss and parameter gradients given cached activations.
    pub fn backward(&self, act: &Activations, label: usize) -> (f64, Gradients) {
        let (loss, d_logits) = softmax_cross_entropy(&act.logits, label);
        let mut head = Head::zeros(self.head.classes);
        add_outer(&mut head.weight, &d_logits, &act.adapted);
        head.bias.copy_from_slice(&d_logits);

        let d_adapted = affine_transpose(&self.head.weight, &d_logits, HIDDEN_DIM);
        let mut adapter = AdapterParams::zeros();
        add_outer(&mut adapter.up_weight, &d_adapted, &act.bottleneck);
        adapter.up_bias.copy_from_slice(&d_adapted);

        let d_bottleneck = affine_transpose(&self.adapter.up_weight, &d_adapted, BOTTLENECK_DIM);
        let d_pre: Vec<f64> = d_bottleneck
            .iter()
            .zip(&act.bottleneck_pre)
            .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
            .collect();
        add_outer(&mut adapter.down_weight, &d_pre, &act.features);
        adapter.down_bias.copy_from_slice(&d_pre);

        let mut features = affine_transpose(&self.adapter.down_weight, &d_pre, HIDDEN_DIM);
        for (f, g) in features.iter_mut().zip(&d_adapted) {
            *f += g;
        }
        (
            loss,
            Gradients {
                adapter,
                head,
                features,
            },
        )
    }

    pub fn loss(&self, x: &[f64], label: usize) -> Result<f64> {
        self.check_label(label)?;
        Ok(softmax_cross_entropy(&self.forward(x)?, label).0)
    }

    /// Loss, parameter gradients and the gradient with respect to the input.
    pub fn loss_and_gradients(&self, x: &[f64], label: usize) -> Result<(f64, Gradients, Vec<f64>)> {
        self.check_label(label)?;
        let act = self.activations(self.backbone.features(x)?);
        let (loss, grads) = self.backward(&act, label);
        let d_pre: Vec<f64> = grads
            .features
            .iter()
            .zip(&act.features)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        let d_input = affine_transpose(&self.backbone.weight, &d_pre, self.backbone.input_dim);
        Ok((loss, grads, d_input))
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.head.classes {
            return Err(Error::Dimension(format!(
                "label {label} but the head has {} classes",
                self.head.classes
            )));
        }
        Ok(())
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}
