//! Synthetic classification domains.
//!
//! Each domain draws Gaussian class clusters whose means sit on a circle in
//! the (0, 1) coordinate plane and then rotates every input by the domain's
//! angle in that plane. Domains with nearby angles share most of their
//! decision geometry; far-apart angles give nearly orthogonal tasks.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_input_dim() -> usize {
    16
}
fn default_num_classes() -> usize {
    2
}
fn default_separation() -> f64 {
    4.25
}
fn default_train_size() -> usize {
    2000
}
fn default_eval_size() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: String,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    /// Radians, in `[0, π)`.
    #[serde(default)]
    pub rotation_angle: f64,
    /// Distance between the two class means (radius of the mean circle times two).
    #[serde(default = "default_separation")]
    pub cluster_separation: f64,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_eval_size")]
    pub val_size: usize,
    #[serde(default = "default_eval_size")]
    pub test_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl DomainSpec {
    pub fn new(id: impl Into<String>, rotation_angle: f64, seed: u64) -> Self {
        Self {
            id: id.into(),
            input_dim: default_input_dim(),
            num_classes: default_num_classes(),
            rotation_angle,
            cluster_separation: default_separation(),
            train_size: default_train_size(),
            val_size: default_eval_size(),
            test_size: default_eval_size(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: String| Err(Error::out_of_range(name, reason));
        if self.id.is_empty()
            || self
                .id
                .chars()
                .any(|c| c == '/' || c == '\\' || c.is_control())
        {
            return bad("id", format!("`{}` is not usable as a file name", self.id));
        }
        if self.input_dim < 2 {
            return bad("input_dim", format!("must be at least 2, got {}", self.input_dim));
        }
        if self.num_classes < 2 {
            return bad(
                "num_classes",
                format!("must be at least 2, got {}", self.num_classes),
            );
        }
        if !(0.0..PI).contains(&self.rotation_angle) {
            return bad(
                "rotation_angle",
                format!("must be in [0, π), got {}", self.rotation_angle),
            );
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return bad(
                "cluster_separation",
                format!("must be positive, got {}", self.cluster_separation),
            );
        }
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return bad("sizes", "train/val/test sizes must be at least 1".into());
        }
        Ok(())
    }
}

/// Inputs stored row-major, one row of `dim` values per example.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    dim: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl Split {
    pub fn new(dim: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || inputs.len() != dim * labels.len() {
            return Err(Error::Dimension(format!(
                "{} input values cannot form {} rows of width {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self {
            dim,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.inputs
            .chunks_exact(self.dim)
            .zip(self.labels.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub spec: DomainSpec,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

fn class_means(spec: &DomainSpec) -> Vec<Vec<f64>> {
    let radius = spec.cluster_separation / 2.0;
    (0..spec.num_classes)
        .map(|c| {
            let phase = 2.0 * PI * c as f64 / spec.num_classes as f64;
            let mut mean = vec![0.0; spec.input_dim];
            mean[0] = radius * phase.cos();
            mean[1] = radius * phase.sin();
            mean
        })
        .collect()
}

fn sample_split(
    spec: &DomainSpec,
    means: &[Vec<f64>],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Split {
    let d = spec.input_dim;
    let (sin, cos) = spec.rotation_angle.sin_cos();
    let mut inputs = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % spec.num_classes;
        let start = inputs.len();
        for mu in &means[y] {
            let noise: f64 = StandardNormal.sample(rng);
            inputs.push(mu + noise);
        }
        let (x0, x1) = (inputs[start], inputs[start + 1]);
        inputs[start] = cos * x0 - sin * x1;
        inputs[start + 1] = sin * x0 + cos * x1;
        labels.push(y);
    }
    Split {
        dim: d,
        inputs,
        labels,
    }
}

/// Samples the train/val/test splits of a domain; fully determined by the spec.
pub fn make_domain(spec: &DomainSpec) -> Result<DomainDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = class_means(spec);
    let train = sample_split(spec, &means, spec.train_size, &mut rng);
    let val = sample_split(spec, &means, spec.val_size, &mut rng);
    let test = sample_split(spec, &means, spec.test_size, &mut rng);
    Ok(DomainDataset {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}
