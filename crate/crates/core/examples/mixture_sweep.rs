//! Enumerate every mixture that contains a target and write the sweep report.

use adapter_mixer::report::{report_csv, SweepRow};
use adapter_mixer::{count_all_mixtures, enumerate_mixtures, fsd_matrix, AdapterCheckpoint, SubsetSizes, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> adapter_mixer::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let names: Vec<String> = ["news", "reviews", "tweets", "wiki"].iter().map(|s| s.to_string()).collect();
    let adapters = names
        .iter()
        .map(|_| AdapterCheckpoint::from_tensors([("w", Tensor::from_vec((0..128).map(|_| rng.random_range(-1.0..1.0)).collect()))]))
        .collect::<adapter_mixer::Result<Vec<_>>>()?;
    let s = fsd_matrix(&adapters, &names)?;

    println!("{} mixtures over {} adapters", count_all_mixtures(names.len())?, names.len());
    let mut rows = Vec::new();
    for t in 0..names.len() {
        for spec in enumerate_mixtures(t, names.len(), SubsetSizes::All)? {
            let m = &spec.members;
            let pairs: Vec<f64> = m.iter().enumerate().flat_map(|(x, &i)| m[x + 1..].iter().map(move |&j| (i, j))).map(|(i, j)| s.get(i, j)).collect();
            rows.push(SweepRow {
                target: names[t].clone(),
                k: m.len(),
                members: m.iter().map(|&i| names[i].clone()).collect(),
                clean_acc: None,
                fgsm_acc: None,
                fsd_mean: if pairs.is_empty() { 0.0 } else { pairs.iter().sum::<f64>() / pairs.len() as f64 },
            });
        }
    }
    let csv = String::from_utf8(report_csv(&rows)?).expect("utf-8");
    for line in csv.lines().take(6) {
        println!("{line}");
    }
    println!("... {} rows", rows.len());
    for k in 1..=names.len() {
        let group: Vec<f64> = rows.iter().filter(|r| r.target == "news" && r.k == k).map(|r| r.fsd_mean).collect();
        println!("news, k={k}: {} mixtures, mean FSD {:.4}", group.len(), group.iter().sum::<f64>() / group.len() as f64);
    }
    Ok(())
}
