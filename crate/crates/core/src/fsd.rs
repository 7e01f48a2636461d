//! Fraction of sign difference (FSD) between adapters.
//!
//! Two aligned parameters conflict when their product is strictly negative;
//! zeros never conflict. Counts are accumulated as integers and only divided
//! at the end.

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::{ensure_compatible, AdapterCheckpoint};
use crate::error::{Error, Result};
use crate::fsutil;

/// Exact conflict count over some set of aligned positions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SignConflicts {
    pub conflicts: u64,
    pub total: u64,
}

impl SignConflicts {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.conflicts as f64 / self.total as f64
        }
    }

    fn add(self, other: SignConflicts) -> SignConflicts {
        SignConflicts {
            conflicts: self.conflicts + other.conflicts,
            total: self.total + other.total,
        }
    }
}

#[inline]
fn opposite_signs(a: f32, b: f32) -> bool {
    // Sign test rather than `a * b < 0.0`: the f32 product of two tiny values
    // can underflow to zero.
    (a < 0.0 && b > 0.0) || (a > 0.0 && b < 0.0)
}

/// Counts strictly opposite-signed positions of two equal-length slices.
pub fn count_conflicts(a: &[f32], b: &[f32]) -> SignConflicts {
    debug_assert_eq!(a.len(), b.len());
    let conflicts = a
        .iter()
        .zip(b)
        .filter(|(&x, &y)| opposite_signs(x, y))
        .count() as u64;
    SignConflicts {
        conflicts,
        total: a.len() as u64,
    }
}

/// Conflict counts for every tensor, in name order.
pub fn conflicts_per_tensor(
    a: &AdapterCheckpoint,
    b: &AdapterCheckpoint,
) -> Result<BTreeMap<String, SignConflicts>> {
    ensure_compatible(&[a, b])?;
    Ok(a.tensors()
        .map(|(name, ta)| {
            let tb = b.get(name).expect("compatible checkpoints share names");
            (name.to_string(), count_conflicts(ta.data(), tb.data()))
        })
        .collect())
}

/// Whole-checkpoint conflict count.
pub fn conflicts_pair(a: &AdapterCheckpoint, b: &AdapterCheckpoint) -> Result<SignConflicts> {
    Ok(conflicts_per_tensor(a, b)?
        .into_values()
        .fold(SignConflicts::default(), SignConflicts::add))
}

/// Fraction of all aligned parameters whose signs strictly disagree.
pub fn fsd_pair(a: &AdapterCheckpoint, b: &AdapterCheckpoint) -> Result<f64> {
    Ok(conflicts_pair(a, b)?.fraction())
}

/// Per-tensor sign-difference fractions.
pub type PerTensorFsd = BTreeMap<String, f64>;

pub fn fsd_per_tensor(a: &AdapterCheckpoint, b: &AdapterCheckpoint) -> Result<PerTensorFsd> {
    Ok(conflicts_per_tensor(a, b)?
        .into_iter()
        .map(|(name, c)| (name, c.fraction()))
        .collect())
}

/// Symmetric k×k matrix of pairwise FSD values with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct FsdMatrix {
    labels: Vec<String>,
    values: Vec<f64>,
}

impl FsdMatrix {
    /// Builds a matrix from row-major values, checking the invariants.
    pub fn new(labels: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let k = labels.len();
        let bad = |reason: String| Error::Parse {
            what: "FSD matrix".into(),
            reason,
        };
        if k == 0 {
            return Err(bad("matrix must have at least one row".into()));
        }
        if values.len() != k || values.iter().any(|r| r.len() != k) {
            return Err(bad(format!("expected {k}x{k} values")));
        }
        for i in 0..k {
            if values[i][i] != 0.0 {
                return Err(bad(format!("diagonal entry {i} is not zero")));
            }
            for j in 0..k {
                let v = values[i][j];
                if !(0.0..=1.0).contains(&v) {
                    return Err(bad(format!("entry ({i},{j}) = {v} is outside [0, 1]")));
                }
                if v != values[j][i] {
                    return Err(bad(format!("entries ({i},{j}) and ({j},{i}) differ")));
                }
            }
        }
        Ok(Self {
            labels,
            values: values.into_iter().flatten().collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.k() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.k();
        &self.values[i * k..(i + 1) * k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.k())
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// CSV text: a header row of labels followed by k rows of k fractions
    /// with nine decimals.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Parse {
            what: "FSD CSV".into(),
            reason: e.to_string(),
        };
        w.write_record(&self.labels).map_err(csv_err)?;
        for row in self.rows() {
            w.write_record(row.iter().map(|v| format!("{v:.9}")))
                .map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Parse {
            what: "FSD CSV".into(),
            reason: e.to_string(),
        })
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Parse {
            what: "FSD CSV".into(),
            reason,
        };
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(bytes);
        let labels: Vec<String> = r
            .headers()
            .map_err(|e| bad(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut values = Vec::new();
        for record in r.records() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            let row = record
                .iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| bad(format!("`{f}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        Self::new(labels, values)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_csv()?)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::Open {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_csv(&bytes)
    }
}

/// Pairwise FSD over `adapters`, labelled by `names`.
pub fn fsd_matrix<C>(adapters: &[C], names: &[String]) -> Result<FsdMatrix>
where
    C: Borrow<AdapterCheckpoint> + Sync,
{
    let k = adapters.len();
    if k == 0 {
        return Err(Error::out_of_range("adapters", "at least one adapter is required"));
    }
    if names.len() != k {
        return Err(Error::Dimension(format!(
            "{k} adapters but {} labels",
            names.len()
        )));
    }
    ensure_compatible(adapters)?;
    let pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .collect();
    let fractions = pairs
        .par_iter()
        .map(|&(i, j)| fsd_pair(adapters[i].borrow(), adapters[j].borrow()))
        .collect::<Result<Vec<_>>>()?;
    let mut values = vec![vec![0.0; k]; k];
    for (&(i, j), f) in pairs.iter().zip(fractions) {
        values[i][j] = f;
        values[j][i] = f;
    }
    FsdMatrix::new(names.to_vec(), values)
}

/// Row means of the matrix, dividing by k (the zero diagonal is included).
pub fn mean_fsd_rows(s: &FsdMatrix) -> Vec<f64> {
    let k = s.k() as f64;
    s.rows().map(|r| r.iter().sum::<f64>() / k).collect()
}
