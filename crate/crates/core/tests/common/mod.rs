#![allow(dead_code)]

use adapter_mixer::{AdapterCheckpoint, FsdMatrix, Tensor};
use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random adapter with the given tensor shapes; roughly `zero_frac` of the
/// entries are exactly zero.
pub fn random_adapter(
    rng: &mut ChaCha8Rng,
    shapes: &[(&str, Vec<usize>)],
    zero_frac: f64,
) -> AdapterCheckpoint {
    let mut ckpt = AdapterCheckpoint::new();
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if rng.random::<f64>() < zero_frac {
                    0.0
                } else {
                    rng.random_range(-1.0f32..1.0)
                }
            })
            .collect();
        ckpt.insert(*name, Tensor::new(shape.clone(), data).unwrap()).unwrap();
    }
    ckpt
}

pub fn adapter_shapes() -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("adapter.down.bias", vec![8]),
        ("adapter.down.weight", vec![8, 32]),
        ("adapter.up.bias", vec![32]),
        ("adapter.up.weight", vec![32, 8]),
    ]
}

/// Conflicting positions and total count, by sign comparison in f64.
pub fn brute_conflicts(a: &AdapterCheckpoint, b: &AdapterCheckpoint) -> (u64, u64) {
    let mut conflicts = 0;
    let mut total = 0;
    for (name, ta) in a.tensors() {
        let tb = b.get(name).unwrap();
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            if f64::from(x) * f64::from(y) < 0.0 {
                conflicts += 1;
            }
            total += 1;
        }
    }
    (conflicts, total)
}

pub fn negate(a: &AdapterCheckpoint) -> AdapterCheckpoint {
    let mut out = a.clone();
    for (_, t) in out.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = -*v);
    }
    out
}

/// Symmetric matrix with entries on a 1/1024 grid so row sums are exact and
/// ties actually occur.
pub fn quantized_matrix(rng: &mut impl Rng, k: usize) -> FsdMatrix {
    let mut v = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let q = f64::from(rng.random_range(0u32..=16)) / 16.0 * (1.0 - 1.0 / 1024.0);
            let q = (q * 1024.0).round() / 1024.0;
            v[i][j] = q;
            v[j][i] = q;
        }
    }
    FsdMatrix::new((0..k).map(|i| format!("a{i}")).collect(), v).unwrap()
}

/// Exhaustive search: the l-subset with the smallest total row sum, ties
/// going to the lexicographically first subset.
pub fn brute_force_selection(s: &FsdMatrix, l: usize) -> Vec<usize> {
    let k = s.k();
    let sums: Vec<f64> = (0..k).map(|i| s.row(i).iter().sum()).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for subset in (0..k).combinations(l) {
        let total: f64 = subset.iter().map(|&i| sums[i]).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, subset));
        }
    }
    best.unwrap().1
}
