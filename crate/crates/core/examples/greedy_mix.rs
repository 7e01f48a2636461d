//! Pick the least-conflicting adapters and average them.

use adapter_mixer::mixer::select_lowest_fsd;
use adapter_mixer::{fsd_matrix, greedy_mix, mean_fsd_rows, mix_uniform, AdapterCheckpoint, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> adapter_mixer::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shared: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();

    // Three adapters agree with a shared direction; two are unrelated.
    let mut adapters = Vec::new();
    for i in 0..5 {
        let data: Vec<f32> = if i < 3 {
            shared.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect()
        } else {
            (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        adapters.push(AdapterCheckpoint::from_tensors([("w", Tensor::from_vec(data))])?.with_name(format!("a{i}")));
    }
    let names: Vec<String> = (0..5).map(|i| format!("a{i}")).collect();
    let s = fsd_matrix(&adapters, &names)?;
    println!("row means: {:?}", mean_fsd_rows(&s).iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>());
    println!("lowest three: {:?}", select_lowest_fsd(&s, 3)?);

    let (mixed, selected) = greedy_mix(&adapters, &s, 3)?;
    let all = mix_uniform(&adapters)?;
    let w = mixed.get("w").expect("tensor");
    println!("greedy mix of {selected:?}: w[..4] = {:?}", &w.data()[..4]);
    println!("uniform mix of all five: w[..4] = {:?}", &all.get("w").expect("tensor").data()[..4]);
    println!("metadata: {:?}", mixed.metadata());
    Ok(())
}
