//! Magnitude pruning and sparse mixing guided by per-tensor sign conflicts.

use std::borrow::Borrow;
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::checkpoint::{ensure_compatible, AdapterCheckpoint};
use crate::error::{Error, Result};
use crate::fsd::{conflicts_per_tensor, FsdMatrix};
use crate::fsutil;
use crate::mixer::{check_alignment, mix_uniform, select_lowest_fsd, MixMethod, MIX_METHOD_KEY};

pub const PRUNE_SPARSITY_KEY: &str = "prune.sparsity";
pub const PRUNE_SCOPE_KEY: &str = "prune.scope";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum PruneScope {
    /// Each tensor reaches the target sparsity on its own.
    #[default]
    PerTensor,
    /// One magnitude ranking over all tensors together.
    Global,
}

impl fmt::Display for PruneScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneScope::PerTensor => "per-tensor",
            PruneScope::Global => "global",
        })
    }
}

impl FromStr for PruneScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-tensor" => Ok(PruneScope::PerTensor),
            "global" => Ok(PruneScope::Global),
            other => Err(Error::out_of_range(
                "scope",
                format!("expected per-tensor or global, got `{other}`"),
            )),
        }
    }
}

/// Which adapters contribute to the per-tensor conflict scores in sparse mixing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ConflictPool {
    /// Only the adapters selected for mixing.
    #[default]
    Selected,
    /// Every adapter in the pool.
    All,
}

impl FromStr for ConflictPool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selected" => Ok(ConflictPool::Selected),
            "all" => Ok(ConflictPool::All),
            other => Err(Error::out_of_range(
                "conflict-pool",
                format!("expected selected or all, got `{other}`"),
            )),
        }
    }
}

/// `floor(s·n)`, guarded against the product landing a hair below an integer
/// (e.g. `0.29 * 100.0 == 28.999999999999996`).
pub fn pruned_count(sparsity: f64, n: usize) -> usize {
    let exact = sparsity * n as f64;
    let nudged = exact * (1.0 + 4.0 * f64::EPSILON);
    (nudged.floor() as usize).min(n)
}

fn check_sparsity(sparsity: f64) -> Result<()> {
    if (0.0..1.0).contains(&sparsity) {
        Ok(())
    } else {
        Err(Error::out_of_range(
            "s",
            format!("sparsity must be in [0, 1), got {sparsity}"),
        ))
    }
}

/// Keep/drop flags aligned with each tensor's flat data.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PruneMask {
    masks: BTreeMap<String, Vec<bool>>,
}

impl PruneMask {
    pub fn get(&self, name: &str) -> Option<&[bool]> {
        self.masks.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[bool])> {
        self.masks.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn kept(&self, name: &str) -> Option<usize> {
        self.get(name).map(|m| m.iter().filter(|&&k| k).count())
    }

    /// Run-length encoding per tensor: alternating run lengths, starting with
    /// a (possibly empty) keep run.
    pub fn to_run_lengths(&self) -> BTreeMap<String, Vec<usize>> {
        self.masks
            .iter()
            .map(|(name, mask)| {
                let mut runs = Vec::new();
                let mut current = true;
                let mut len = 0usize;
                for &keep in mask {
                    if keep == current {
                        len += 1;
                    } else {
                        runs.push(len);
                        current = keep;
                        len = 1;
                    }
                }
                runs.push(len);
                (name.clone(), runs)
            })
            .collect()
    }

    pub fn from_run_lengths(runs: BTreeMap<String, Vec<usize>>) -> Self {
        let masks = runs
            .into_iter()
            .map(|(name, runs)| {
                let mut mask = Vec::new();
                for (i, len) in runs.into_iter().enumerate() {
                    mask.extend(std::iter::repeat_n(i % 2 == 0, len));
                }
                (name, mask)
            })
            .collect();
        Self { masks }
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.to_run_lengths()).expect("mask serializes");
        out.push(b'\n');
        out
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let runs = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
            what: "prune mask".into(),
            reason: e.to_string(),
        })?;
        Ok(Self::from_run_lengths(runs))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_json())
    }
}

/// Flat indices in pruning order: smallest magnitude first; among equal
/// magnitudes the higher index goes first, so lower indices survive.
fn pruning_order(values: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| match values[a].abs().total_cmp(&values[b].abs()) {
        Ordering::Equal => b.cmp(&a),
        o => o,
    });
    order
}

fn keep_mask(values: &[f32], sparsity: f64) -> Vec<bool> {
    let drop = pruned_count(sparsity, values.len());
    let mut mask = vec![true; values.len()];
    for &i in &pruning_order(values)[..drop] {
        mask[i] = false;
    }
    mask
}

fn apply_mask(data: &mut [f32], mask: &[bool]) {
    for (v, &keep) in data.iter_mut().zip(mask) {
        if !keep {
            *v = 0.0;
        }
    }
}

/// Zeroes the `floor(s·n)` smallest-magnitude parameters within each scope
/// unit; survivors keep their exact values.
pub fn magnitude_prune(
    adapter: &AdapterCheckpoint,
    sparsity: f64,
    scope: PruneScope,
) -> Result<(AdapterCheckpoint, PruneMask)> {
    check_sparsity(sparsity)?;
    let (mut out, mask) = match scope {
        PruneScope::PerTensor => {
            let names: Vec<&str> = adapter.tensor_names().collect();
            prune_tensors_unchecked(adapter, &names, sparsity)
        }
        PruneScope::Global => {
            let flat = adapter.flatten();
            let flat_mask = keep_mask(&flat, sparsity);
            let mut out = adapter.clone();
            let mut masks = BTreeMap::new();
            let mut offset = 0;
            for (name, tensor) in out.tensors_mut() {
                let n = tensor.numel();
                let m = flat_mask[offset..offset + n].to_vec();
                apply_mask(tensor.data_mut(), &m);
                masks.insert(name.to_string(), m);
                offset += n;
            }
            (out, PruneMask { masks })
        }
    };
    out.set_metadata(PRUNE_SPARSITY_KEY, sparsity.to_string());
    out.set_metadata(PRUNE_SCOPE_KEY, scope.to_string());
    Ok((out, mask))
}

/// Per-tensor pruning of the named tensors only; other tensors stay dense and
/// get an all-keep mask.
pub fn prune_tensors(
    adapter: &AdapterCheckpoint,
    names: &[&str],
    sparsity: f64,
) -> Result<(AdapterCheckpoint, PruneMask)> {
    check_sparsity(sparsity)?;
    if let Some(missing) = names.iter().find(|n| adapter.get(n).is_none()) {
        return Err(Error::InvalidTensor {
            name: missing.to_string(),
            reason: "not present in the adapter".into(),
        });
    }
    Ok(prune_tensors_unchecked(adapter, names, sparsity))
}

fn prune_tensors_unchecked(
    adapter: &AdapterCheckpoint,
    names: &[&str],
    sparsity: f64,
) -> (AdapterCheckpoint, PruneMask) {
    let mut out = adapter.clone();
    let mut masks = BTreeMap::new();
    for (name, tensor) in out.tensors_mut() {
        let mask = if names.contains(&name) {
            let m = keep_mask(tensor.data(), sparsity);
            apply_mask(tensor.data_mut(), &m);
            m
        } else {
            vec![true; tensor.numel()]
        };
        masks.insert(name.to_string(), mask);
    }
    (out, PruneMask { masks })
}

/// Exact per-tensor conflict score of one adapter against a set of others:
/// summed conflicts over `numel · others`.
#[derive(Debug, Clone, Copy)]
struct Score {
    conflicts: u64,
    total: u64,
}

impl Score {
    fn cmp_value(&self, other: &Score) -> Ordering {
        if self.total == 0 || other.total == 0 {
            return (self.total != 0 && self.conflicts > 0)
                .cmp(&(other.total != 0 && other.conflicts > 0));
        }
        (u128::from(self.conflicts) * u128::from(other.total))
            .cmp(&(u128::from(other.conflicts) * u128::from(self.total)))
    }
}

fn ranked_conflict_layers(
    index: usize,
    adapters: &[&AdapterCheckpoint],
    m: usize,
) -> Result<Vec<String>> {
    let target = adapters[index];
    let count = target.len();
    if m == 0 || m > count {
        return Err(Error::out_of_range(
            "m",
            format!("must be in 1..={count}, got {m}"),
        ));
    }
    let mut scores: BTreeMap<String, Score> = target
        .tensor_names()
        .map(|n| {
            (
                n.to_string(),
                Score {
                    conflicts: 0,
                    total: 0,
                },
            )
        })
        .collect();
    for (j, other) in adapters.iter().enumerate() {
        if j == index {
            continue;
        }
        for (name, c) in conflicts_per_tensor(target, other)? {
            let s = scores.get_mut(&name).expect("compatible");
            s.conflicts += c.conflicts;
            s.total += c.total;
        }
    }
    let mut ranked: Vec<(String, Score)> = scores.into_iter().collect();
    ranked.sort_by(|(na, sa), (nb, sb)| sb.cmp_value(sa).then_with(|| na.cmp(nb)));
    Ok(ranked.into_iter().take(m).map(|(n, _)| n).collect())
}

/// Names of the `m` tensors of `adapters[adapter_index]` whose sign conflict
/// with the other adapters, averaged over those adapters, is highest. Ties go
/// to the lexicographically smaller name.
pub fn select_conflict_layers<C: Borrow<AdapterCheckpoint>>(
    adapter_index: usize,
    adapters: &[C],
    m: usize,
) -> Result<Vec<String>> {
    if adapters.len() < 2 {
        return Err(Error::out_of_range(
            "adapters",
            "conflict scores need at least two adapters",
        ));
    }
    if adapter_index >= adapters.len() {
        return Err(Error::out_of_range(
            "adapter_index",
            format!("{adapter_index} is outside a pool of {}", adapters.len()),
        ));
    }
    ensure_compatible(adapters)?;
    let refs: Vec<&AdapterCheckpoint> = adapters.iter().map(Borrow::borrow).collect();
    ranked_conflict_layers(adapter_index, &refs, m)
}

/// Prunes each member's `m` highest-conflict tensors to `sparsity` and
/// averages the results.
///
/// `members` index into `adapters`. With [`ConflictPool::Selected`] scores
/// are computed among the members only; a lone member has no conflicts, so
/// every tensor ties at zero and the name order decides.
pub fn prune_and_mix<C: Borrow<AdapterCheckpoint>>(
    adapters: &[C],
    members: &[usize],
    m: usize,
    sparsity: f64,
    pool: ConflictPool,
) -> Result<AdapterCheckpoint> {
    check_sparsity(sparsity)?;
    if members.is_empty() {
        return Err(Error::out_of_range("members", "cannot mix zero adapters"));
    }
    if let Some(&i) = members.iter().find(|&&i| i >= adapters.len()) {
        return Err(Error::out_of_range(
            "members",
            format!("index {i} is outside a pool of {}", adapters.len()),
        ));
    }
    let all: Vec<&AdapterCheckpoint> = adapters.iter().map(Borrow::borrow).collect();
    let selected: Vec<&AdapterCheckpoint> = members.iter().map(|&i| all[i]).collect();
    match pool {
        ConflictPool::Selected => ensure_compatible(&selected)?,
        ConflictPool::All => ensure_compatible(&all)?,
    }
    let sparse = members
        .iter()
        .enumerate()
        .map(|(pos, &idx)| {
            let layers = match pool {
                ConflictPool::Selected => ranked_conflict_layers(pos, &selected, m)?,
                ConflictPool::All => ranked_conflict_layers(idx, &all, m)?,
            };
            let names: Vec<&str> = layers.iter().map(String::as_str).collect();
            Ok(prune_tensors_unchecked(all[idx], &names, sparsity).0)
        })
        .collect::<Result<Vec<_>>>()?;
    mix_uniform(&sparse)
}

/// Selects the `l` adapters with the smallest mean FSD, prunes their `m`
/// highest-conflict tensors to `sparsity`, then averages them.
pub fn sparse_mix<C: Borrow<AdapterCheckpoint>>(
    adapters: &[C],
    s_matrix: &FsdMatrix,
    l: usize,
    m: usize,
    sparsity: f64,
) -> Result<(AdapterCheckpoint, Vec<usize>)> {
    sparse_mix_with_pool(adapters, s_matrix, l, m, sparsity, ConflictPool::Selected)
}

pub fn sparse_mix_with_pool<C: Borrow<AdapterCheckpoint>>(
    adapters: &[C],
    s_matrix: &FsdMatrix,
    l: usize,
    m: usize,
    sparsity: f64,
    pool: ConflictPool,
) -> Result<(AdapterCheckpoint, Vec<usize>)> {
    check_alignment(adapters, s_matrix)?;
    check_sparsity(sparsity)?;
    let selected = select_lowest_fsd(s_matrix, l)?;
    let mut mixed = prune_and_mix(adapters, &selected, m, sparsity, pool)?;
    mixed.set_metadata(
        MIX_METHOD_KEY,
        MixMethod::Sparse { l, m, sparsity }.tag(),
    );
    mixed.set_metadata(PRUNE_SPARSITY_KEY, sparsity.to_string());
    Ok((mixed, selected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Tensor;

    fn ckpt(tensors: &[(&str, &[f32])]) -> AdapterCheckpoint {
        AdapterCheckpoint::from_tensors(
            tensors
                .iter()
                .map(|(n, d)| (*n, Tensor::from_vec(d.to_vec()))),
        )
        .unwrap()
    }

    #[test]
    fn half_sparsity_example() {
        let a = ckpt(&[("w", &[0.1, -0.5, 0.3, -0.2])]);
        let (p, mask) = magnitude_prune(&a, 0.5, PruneScope::PerTensor).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.0, -0.5, 0.3, 0.0]);
        assert_eq!(mask.get("w").unwrap(), &[false, true, true, false]);
        assert_eq!(p.metadata()[PRUNE_SCOPE_KEY], "per-tensor");
    }

    #[test]
    fn zero_sparsity_is_identity() {
        let a = ckpt(&[("w", &[0.1, -0.0, 0.3]), ("v", &[2.0])]);
        let (p, mask) = magnitude_prune(&a, 0.0, PruneScope::PerTensor).unwrap();
        assert!(p.tensors_bitwise_eq(&a));
        assert!(mask.iter().all(|(_, m)| m.iter().all(|&k| k)));
    }

    #[test]
    fn ties_keep_lower_index() {
        let a = ckpt(&[("w", &[1.0, -1.0, 1.0, 1.0])]);
        let (p, _) = magnitude_prune(&a, 0.5, PruneScope::PerTensor).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn existing_zeros_are_pruned_first() {
        let a = ckpt(&[("w", &[0.0, 5.0, 0.0, 3.0, 1.0])]);
        let (_, mask) = magnitude_prune(&a, 0.4, PruneScope::PerTensor).unwrap();
        assert_eq!(mask.get("w").unwrap(), &[false, true, false, true, true]);
    }

    #[test]
    fn global_scope_ranks_across_tensors() {
        let a = ckpt(&[("a", &[10.0, 20.0]), ("b", &[0.1, 0.2])]);
        let (p, _) = magnitude_prune(&a, 0.5, PruneScope::Global).unwrap();
        assert_eq!(p.get("a").unwrap().data(), &[10.0, 20.0]);
        assert_eq!(p.get("b").unwrap().data(), &[0.0, 0.0]);
        let (p, _) = magnitude_prune(&a, 0.5, PruneScope::PerTensor).unwrap();
        assert_eq!(p.get("a").unwrap().data(), &[0.0, 20.0]);
    }

    #[test]
    fn sparsity_bounds() {
        let a = ckpt(&[("w", &[1.0])]);
        assert!(magnitude_prune(&a, 1.0, PruneScope::PerTensor).is_err());
        assert!(magnitude_prune(&a, -0.1, PruneScope::PerTensor).is_err());
    }

    #[test]
    fn pruned_count_is_floor() {
        assert_eq!(pruned_count(0.29, 100), 29);
        assert_eq!(pruned_count(0.9, 100), 90);
        assert_eq!(pruned_count(0.9, 8), 7);
        assert_eq!(pruned_count(0.5, 7), 3);
        assert_eq!(pruned_count(0.0, 7), 0);
        assert_eq!(pruned_count(0.999999, 10), 9);
    }

    #[test]
    fn mask_run_lengths() {
        let mut masks = BTreeMap::new();
        masks.insert("a".to_string(), vec![false, false, true, false]);
        masks.insert("b".to_string(), vec![true, true]);
        masks.insert("c".to_string(), vec![]);
        let mask = PruneMask { masks };
        let runs = mask.to_run_lengths();
        assert_eq!(runs["a"], vec![0, 2, 1, 1]);
        assert_eq!(runs["b"], vec![2]);
        assert_eq!(runs["c"], vec![0]);
        assert_eq!(
            String::from_utf8(mask.to_json()).unwrap(),
            "{\"a\":[0,2,1,1],\"b\":[2],\"c\":[0]}\n"
        );
        assert_eq!(PruneMask::from_json(&mask.to_json()).unwrap(), mask);
    }

    #[test]
    fn conflict_layer_selection() {
        let a = ckpt(&[("x", &[1.0, 1.0]), ("y", &[1.0; 10])]);
        let mut y_b = [1.0f32; 10];
        y_b[0] = -1.0;
        let b = ckpt(&[("x", &[-1.0, 1.0]), ("y", &y_b)]);
        assert_eq!(select_conflict_layers(0, &[&a, &b], 1).unwrap(), vec!["x"]);
        assert_eq!(
            select_conflict_layers(0, &[&a, &b], 2).unwrap(),
            vec!["x", "y"]
        );
        assert!(select_conflict_layers(0, &[&a, &b], 0).is_err());
        assert!(select_conflict_layers(0, &[&a, &b], 3).is_err());
        assert!(select_conflict_layers(0, &[&a], 1).is_err());
        assert!(select_conflict_layers(2, &[&a, &b], 1).is_err());
    }

    #[test]
    fn conflict_ties_use_name_order() {
        let a = ckpt(&[("b", &[1.0]), ("a", &[1.0])]);
        let b = ckpt(&[("b", &[1.0]), ("a", &[1.0])]);
        assert_eq!(select_conflict_layers(1, &[&a, &b], 1).unwrap(), vec!["a"]);
    }

    fn named(name: &str, x: &[f32], y: &[f32]) -> AdapterCheckpoint {
        ckpt(&[("x", x), ("y", y)]).with_name(name)
    }

    #[test]
    fn sparse_mix_reductions() {
        let adapters = vec![
            named("a", &[1.0, -2.0, 3.0], &[0.5, 0.25]),
            named("b", &[1.5, -2.0, 2.0], &[0.5, -0.25]),
            named("c", &[-1.0, 2.0, -3.0], &[-0.5, 0.25]),
        ];
        let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let s = crate::fsd::fsd_matrix(&adapters, &labels).unwrap();

        let (single, sel) = sparse_mix(&adapters, &s, 1, 1, 0.0).unwrap();
        assert_eq!(sel.len(), 1);
        assert!(single.tensors_bitwise_eq(&adapters[sel[0]]));

        let (dense, sel) = sparse_mix(&adapters, &s, 2, 2, 0.0).unwrap();
        let chosen: Vec<&AdapterCheckpoint> = sel.iter().map(|&i| &adapters[i]).collect();
        assert!(dense.tensors_bitwise_eq(&mix_uniform(&chosen).unwrap()));
        assert_eq!(dense.metadata()[MIX_METHOD_KEY], "sparse");

        assert!(sparse_mix(&adapters, &s, 0, 1, 0.5).is_err());
        assert!(sparse_mix(&adapters, &s, 2, 3, 0.5).is_err());
        assert!(sparse_mix(&adapters, &s, 2, 1, 1.0).is_err());
    }

    #[test]
    fn conflict_pool_parsing() {
        assert_eq!("all".parse::<ConflictPool>().unwrap(), ConflictPool::All);
        assert!("some".parse::<ConflictPool>().is_err());
        assert_eq!(
            "global".parse::<PruneScope>().unwrap(),
            PruneScope::Global
        );
    }
}
