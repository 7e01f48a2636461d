//! Sign-conflict matrix over a small pool, written as CSV and SVG.

use adapter_mixer::report::emit_heatmap_svg;
use adapter_mixer::{fsd_matrix, mean_fsd_rows, AdapterCheckpoint, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> adapter_mixer::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let base: Vec<f32> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();

    // Each adapter is the base with a growing amount of noise on top, so the
    // sign disagreement with the base grows along the pool.
    let names: Vec<String> = (0..5).map(|i| format!("noise{i}")).collect();
    let adapters = (0..5)
        .map(|i| {
            let scale = i as f32 * 0.4;
            let data = base.iter().map(|b| b + scale * rng.random_range(-1.0..1.0)).collect();
            AdapterCheckpoint::from_tensors([("w", Tensor::new(vec![16, 16], data)?)])
        })
        .collect::<adapter_mixer::Result<Vec<_>>>()?;

    let matrix = fsd_matrix(&adapters, &names)?;
    for (name, mean) in names.iter().zip(mean_fsd_rows(&matrix)) {
        println!("{name:>7}  mean FSD {mean:.3}");
    }

    let dir = tempfile::tempdir().expect("temp dir");
    let csv = dir.path().join("fsd.csv");
    let svg = dir.path().join("fsd.svg");
    matrix.save_csv(&csv)?;
    emit_heatmap_svg(&matrix, &svg)?;
    print!("{}", std::fs::read_to_string(&csv).expect("read"));
    println!("heatmap: {} bytes of SVG", std::fs::metadata(&svg).expect("stat").len());
    Ok(())
}
