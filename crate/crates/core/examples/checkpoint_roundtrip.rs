//! Build a checkpoint, save it, read it back and compare bytes.

use adapter_mixer::{load_checkpoint, save_checkpoint, validate_compat, AdapterCheckpoint, Tensor};

fn main() -> adapter_mixer::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("demo.adpt");

    let ckpt = AdapterCheckpoint::from_tensors([
        ("adapter.down.weight", Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 0.0, 1e-3, -7.75])?),
        ("adapter.down.bias", Tensor::from_vec(vec![0.125, -2.0])),
    ])?
    .with_name("demo");
    save_checkpoint(&ckpt, &path)?;

    let back = load_checkpoint(&path)?;
    println!("tensors: {:?}", back.tensor_names().collect::<Vec<_>>());
    println!("metadata: {:?}", back.metadata());
    println!("bitwise equal after reload: {}", back.tensors_bitwise_eq(&ckpt));
    println!("canonical bytes stable: {}", back.to_bytes()? == std::fs::read(&path).expect("read"));

    let other = AdapterCheckpoint::from_tensors([("adapter.down.bias", Tensor::from_vec(vec![1.0]))])?;
    let report = validate_compat(&[&ckpt, &other]);
    println!("compatible with a truncated copy: {}", report.compatible);
    for m in &report.mismatches {
        println!("  {m:?}");
    }
    Ok(())
}
