//! Uniform weight-space averaging, mixture enumeration and greedy
//! FSD-guided selection.

use std::borrow::Borrow;
use std::cmp::Ordering;

use itertools::Itertools;

use crate::checkpoint::{ensure_compatible, AdapterCheckpoint, Tensor};
use crate::error::{Error, Result};
use crate::fsd::{mean_fsd_rows, FsdMatrix};

pub const MIX_MEMBERS_KEY: &str = "mix.members";
pub const MIX_K_KEY: &str = "mix.k";
pub const MIX_METHOD_KEY: &str = "mix.method";

/// Largest pool for which mixtures can be counted.
pub const MAX_POOL_SIZE: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MixMethod {
    Uniform,
    Greedy { l: usize },
    Sparse { l: usize, m: usize, sparsity: f64 },
}

impl MixMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            MixMethod::Uniform => "uniform",
            MixMethod::Greedy { .. } => "greedy",
            MixMethod::Sparse { .. } => "sparse",
        }
    }
}

/// A set of pool indices to mix and the method that mixes them.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub members: Vec<usize>,
    pub method: MixMethod,
}

impl MixtureSpec {
    pub fn uniform(members: Vec<usize>) -> Self {
        Self {
            members,
            method: MixMethod::Uniform,
        }
    }

    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if let Some(&i) = self.members.iter().find(|&&i| i >= pool_size) {
            return Err(Error::out_of_range(
                "members",
                format!("index {i} is outside a pool of {pool_size}"),
            ));
        }
        if self.members.iter().duplicates().next().is_some() {
            return Err(Error::out_of_range("members", "indices must be distinct"));
        }
        match self.method {
            MixMethod::Uniform if self.members.is_empty() => {
                Err(Error::out_of_range("members", "uniform mixing needs a member"))
            }
            MixMethod::Greedy { l } | MixMethod::Sparse { l, .. }
                if l == 0 || l > pool_size =>
            {
                Err(Error::out_of_range(
                    "l",
                    format!("must be in 1..={pool_size}, got {l}"),
                ))
            }
            MixMethod::Sparse { sparsity, .. } if !(0.0..1.0).contains(&sparsity) => Err(
                Error::out_of_range("s", format!("must be in [0, 1), got {sparsity}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Elementwise arithmetic mean of compatible adapters.
///
/// Members are summed in f64 in canonical order (by metadata name; unnamed
/// members keep their relative input order), divided by k and rounded to
/// f32 once.
pub fn mix_uniform<C: Borrow<AdapterCheckpoint>>(adapters: &[C]) -> Result<AdapterCheckpoint> {
    let k = adapters.len();
    if k == 0 {
        return Err(Error::out_of_range("adapters", "cannot mix zero adapters"));
    }
    ensure_compatible(adapters)?;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|&i| adapters[i].borrow().name());

    let first = adapters[order[0]].borrow();
    let mut out = AdapterCheckpoint::new();
    let mut acc: Vec<f64> = Vec::new();
    for (name, tensor) in first.tensors() {
        acc.clear();
        acc.extend(tensor.data().iter().map(|&v| f64::from(v)));
        for &i in &order[1..] {
            let other = adapters[i].borrow().get(name).expect("compatible");
            for (a, &v) in acc.iter_mut().zip(other.data()) {
                *a += f64::from(v);
            }
        }
        let denom = k as f64;
        let data = acc.iter().map(|&s| (s / denom) as f32).collect();
        out.insert(name, Tensor::new(tensor.shape().to_vec(), data)?)?;
    }
    let members = order
        .iter()
        .map(|&i| match adapters[i].borrow().name() {
            Some(n) => n.to_string(),
            None => format!("#{i}"),
        })
        .join(";");
    out.set_metadata(MIX_MEMBERS_KEY, members);
    out.set_metadata(MIX_K_KEY, k.to_string());
    out.set_metadata(MIX_METHOD_KEY, MixMethod::Uniform.tag());
    Ok(out)
}

/// Number of (target, member set containing the target) pairs over a pool:
/// `n · 2^(n-1)`.
pub fn count_all_mixtures(pool_size: usize) -> Result<u64> {
    if !(1..=MAX_POOL_SIZE).contains(&pool_size) {
        return Err(Error::out_of_range(
            "pool_size",
            format!("must be in 1..={MAX_POOL_SIZE}, got {pool_size}"),
        ));
    }
    Ok(pool_size as u64 * (1u64 << (pool_size - 1)))
}

/// Which subset sizes to enumerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetSizes {
    All,
    Exactly(usize),
    Range { min: usize, max: usize },
}

impl SubsetSizes {
    fn bounds(self, pool_size: usize) -> Result<(usize, usize)> {
        let (min, max) = match self {
            SubsetSizes::All => (1, pool_size),
            SubsetSizes::Exactly(k) => (k, k),
            SubsetSizes::Range { min, max } => (min, max),
        };
        if min == 0 || min > max || max > pool_size {
            return Err(Error::out_of_range(
                "k",
                format!("sizes {min}..={max} do not fit a pool of {pool_size}"),
            ));
        }
        Ok((min, max))
    }
}

/// Every member set containing `target`, by ascending size and then in
/// lexicographic index order within each size.
pub fn enumerate_mixtures(
    target: usize,
    pool_size: usize,
    sizes: SubsetSizes,
) -> Result<impl Iterator<Item = MixtureSpec>> {
    if target >= pool_size {
        return Err(Error::out_of_range(
            "target",
            format!("{target} is outside a pool of {pool_size}"),
        ));
    }
    let (min, max) = sizes.bounds(pool_size)?;
    let others: Vec<usize> = (0..pool_size).filter(|&i| i != target).collect();
    Ok((min..=max).flat_map(move |k| {
        others
            .clone()
            .into_iter()
            .combinations(k - 1)
            .map(move |rest| {
                let pos = rest.partition_point(|&i| i < target);
                let mut members = rest;
                members.insert(pos, target);
                MixtureSpec::uniform(members)
            })
    }))
}

/// `enumerate_mixtures` over every target, in target order.
pub fn enumerate_all_mixtures(
    pool_size: usize,
    sizes: SubsetSizes,
) -> Result<impl Iterator<Item = (usize, MixtureSpec)>> {
    sizes.bounds(pool_size)?;
    let per_target = (0..pool_size)
        .map(|t| enumerate_mixtures(t, pool_size, sizes).map(|it| it.map(move |s| (t, s))))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_target.into_iter().flatten())
}

/// Indices of the `l` rows with the smallest mean FSD, ascending by mean
/// with ties going to the lower index.
pub fn select_lowest_fsd(s: &FsdMatrix, l: usize) -> Result<Vec<usize>> {
    let k = s.k();
    if l == 0 || l > k {
        return Err(Error::out_of_range(
            "l",
            format!("must be in 1..={k}, got {l}"),
        ));
    }
    let means = mean_fsd_rows(s);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| match means[a].total_cmp(&means[b]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order.truncate(l);
    Ok(order)
}

/// Checks that an FSD matrix describes exactly these adapters.
pub(crate) fn check_alignment<C: Borrow<AdapterCheckpoint>>(
    adapters: &[C],
    s: &FsdMatrix,
) -> Result<()> {
    if adapters.len() != s.k() {
        return Err(Error::Dimension(format!(
            "{} adapters but the FSD matrix is {}x{}",
            adapters.len(),
            s.k(),
            s.k()
        )));
    }
    for (i, (a, label)) in adapters.iter().zip(s.labels()).enumerate() {
        if let Some(name) = a.borrow().name() {
            if name != label {
                return Err(Error::Dimension(format!(
                    "adapter #{i} is named `{name}` but the FSD matrix labels it `{label}`"
                )));
            }
        }
    }
    Ok(())
}

/// Averages the `l` adapters with the smallest mean FSD.
pub fn greedy_mix<C: Borrow<AdapterCheckpoint>>(
    adapters: &[C],
    s: &FsdMatrix,
    l: usize,
) -> Result<(AdapterCheckpoint, Vec<usize>)> {
    check_alignment(adapters, s)?;
    let selected = select_lowest_fsd(s, l)?;
    let members: Vec<&AdapterCheckpoint> =
        selected.iter().map(|&i| adapters[i].borrow()).collect();
    let mut mixed = mix_uniform(&members)?;
    mixed.set_metadata(MIX_METHOD_KEY, MixMethod::Greedy { l }.tag());
    Ok((mixed, selected))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_ckpt(name: &str, data: &[f32]) -> AdapterCheckpoint {
        AdapterCheckpoint::from_tensors([("w", Tensor::from_vec(data.to_vec()))])
            .unwrap()
            .with_name(name)
    }

    fn matrix(values: Vec<Vec<f64>>) -> FsdMatrix {
        let labels = (0..values.len()).map(|i| format!("a{i}")).collect();
        FsdMatrix::new(labels, values).unwrap()
    }

    #[test]
    fn mean_of_two() {
        let m = mix_uniform(&[vec_ckpt("a", &[1.0, 2.0]), vec_ckpt("b", &[3.0, 4.0])]).unwrap();
        assert_eq!(m.get("w").unwrap().data(), &[2.0, 3.0]);
        assert_eq!(m.metadata()[MIX_MEMBERS_KEY], "a;b");
        assert_eq!(m.metadata()[MIX_K_KEY], "2");
    }

    #[test]
    fn single_member_is_bitwise_identity() {
        let a = vec_ckpt("a", &[-0.0, 1.5e-42, 3.25, -7.0]);
        let m = mix_uniform(&[&a]).unwrap();
        assert!(m.tensors_bitwise_eq(&a));
    }

    #[test]
    fn repeated_member_is_identity() {
        let a = vec_ckpt("a", &[0.1, -0.7, 123.456, 1e-20]);
        let m = mix_uniform(&[&a, &a, &a, &a, &a]).unwrap();
        assert!(m.tensors_bitwise_eq(&a));
    }

    #[test]
    fn empty_and_incompatible_inputs_error() {
        let none: [AdapterCheckpoint; 0] = [];
        assert!(mix_uniform(&none).is_err());
        let a = vec_ckpt("a", &[1.0]);
        let b = vec_ckpt("b", &[1.0, 2.0]);
        assert!(matches!(mix_uniform(&[a, b]), Err(Error::Incompatible(_))));
    }

    #[test]
    fn counts() {
        assert_eq!(count_all_mixtures(13).unwrap(), 53_248);
        assert_eq!(count_all_mixtures(1).unwrap(), 1);
        assert_eq!(count_all_mixtures(4).unwrap(), 32);
        assert!(count_all_mixtures(0).is_err());
        assert!(count_all_mixtures(31).is_err());
    }

    #[test]
    fn enumeration_examples() {
        let got: Vec<Vec<usize>> = enumerate_mixtures(0, 3, SubsetSizes::Exactly(2))
            .unwrap()
            .map(|s| s.members)
            .collect();
        assert_eq!(got, vec![vec![0, 1], vec![0, 2]]);
        assert_eq!(
            enumerate_mixtures(0, 13, SubsetSizes::Exactly(3))
                .unwrap()
                .count(),
            66
        );
        assert_eq!(
            enumerate_mixtures(5, 13, SubsetSizes::All).unwrap().count(),
            4096
        );
        let mid: Vec<Vec<usize>> = enumerate_mixtures(1, 3, SubsetSizes::All)
            .unwrap()
            .map(|s| s.members)
            .collect();
        assert_eq!(mid, vec![vec![1], vec![0, 1], vec![1, 2], vec![0, 1, 2]]);
    }

    #[test]
    fn enumeration_bounds() {
        assert!(enumerate_mixtures(3, 3, SubsetSizes::All).is_err());
        assert!(enumerate_mixtures(0, 3, SubsetSizes::Exactly(0)).is_err());
        assert!(enumerate_mixtures(0, 3, SubsetSizes::Exactly(4)).is_err());
    }

    #[test]
    fn greedy_examples() {
        let s = matrix(vec![
            vec![0.0, 0.1, 0.9],
            vec![0.1, 0.0, 0.9],
            vec![0.9, 0.9, 0.0],
        ]);
        assert_eq!(select_lowest_fsd(&s, 2).unwrap(), vec![0, 1]);

        let tied = matrix(vec![vec![0.0, 0.3], vec![0.3, 0.0]]);
        assert_eq!(select_lowest_fsd(&tied, 1).unwrap(), vec![0]);
        assert!(select_lowest_fsd(&tied, 0).is_err());
        assert!(select_lowest_fsd(&tied, 3).is_err());
    }

    #[test]
    fn greedy_with_all_members_matches_uniform() {
        let adapters = vec![
            vec_ckpt("a0", &[1.0, 2.0]),
            vec_ckpt("a1", &[3.0, -4.0]),
            vec_ckpt("a2", &[0.5, 0.25]),
        ];
        let s = crate::fsd::fsd_matrix(
            &adapters,
            &["a0".into(), "a1".into(), "a2".into()],
        )
        .unwrap();
        let (mixed, selected) = greedy_mix(&adapters, &s, 3).unwrap();
        let mut sorted = selected.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
        assert!(mixed.tensors_bitwise_eq(&mix_uniform(&adapters).unwrap()));
    }

    #[test]
    fn greedy_rejects_misaligned_labels() {
        let adapters = vec![vec_ckpt("x", &[1.0]), vec_ckpt("y", &[1.0])];
        let s = matrix(vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert!(matches!(
            greedy_mix(&adapters, &s, 1),
            Err(Error::Dimension(_))
        ));
        assert!(greedy_mix(&adapters[..1], &s, 1).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(MixtureSpec::uniform(vec![0, 2]).validate(3).is_ok());
        assert!(MixtureSpec::uniform(vec![0, 0]).validate(3).is_err());
        assert!(MixtureSpec::uniform(vec![3]).validate(3).is_err());
        assert!(MixtureSpec::uniform(vec![]).validate(3).is_err());
        let greedy = MixtureSpec {
            members: vec![],
            method: MixMethod::Greedy { l: 4 },
        };
        assert!(greedy.validate(3).is_err());
        let sparse = MixtureSpec {
            members: vec![],
            method: MixMethod::Sparse {
                l: 2,
                m: 1,
                sparsity: 1.0,
            },
        };
        assert!(sparse.validate(3).is_err());
    }
}
