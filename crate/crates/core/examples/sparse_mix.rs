//! Magnitude pruning on its own, then the select, prune and average pipeline.

use adapter_mixer::{
    fsd_matrix, fsd_pair, magnitude_prune, select_conflict_layers, sparse_mix, AdapterCheckpoint,
    PruneScope, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn adapter(rng: &mut ChaCha8Rng, name: &str) -> adapter_mixer::Result<AdapterCheckpoint> {
    let mut t = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
    };
    Ok(AdapterCheckpoint::from_tensors([
        ("adapter.down.weight", t(vec![8, 32])?),
        ("adapter.down.bias", t(vec![8])?),
        ("adapter.up.weight", t(vec![32, 8])?),
        ("adapter.up.bias", t(vec![32])?),
    ])?
    .with_name(name))
}

fn main() -> adapter_mixer::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let adapters = (0..4)
        .map(|i| adapter(&mut rng, &format!("p{i}")))
        .collect::<adapter_mixer::Result<Vec<_>>>()?;

    for s in [0.5, 0.9] {
        let (pruned, mask) = magnitude_prune(&adapters[0], s, PruneScope::PerTensor)?;
        let kept: usize = mask.iter().map(|(_, m)| m.iter().filter(|&&k| k).count()).sum();
        println!(
            "s={s}: kept {kept} of {}; FSD to p1 {:.3} -> {:.3}",
            adapters[0].param_count(),
            fsd_pair(&adapters[0], &adapters[1])?,
            fsd_pair(&pruned, &adapters[1])?
        );
    }

    let names: Vec<String> = (0..4).map(|i| format!("p{i}")).collect();
    let s = fsd_matrix(&adapters, &names)?;
    println!("most conflicting tensors of p0: {:?}", select_conflict_layers(0, &adapters, 2)?);
    let (mixed, selected) = sparse_mix(&adapters, &s, 3, 2, 0.9)?;
    println!("sparse mix of {selected:?}");
    for (name, t) in mixed.tensors() {
        let zeros = t.data().iter().filter(|v| **v == 0.0).count();
        println!("  {name:<20} {zeros:>3} of {:>3} entries zero", t.numel());
    }
    Ok(())
}
