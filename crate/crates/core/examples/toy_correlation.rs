//! Train a small pool of toy adapters and relate sign conflicts to accuracy.
//!
//! Uses shortened training so it finishes in a few seconds; the acceptance
//! suite runs the full-length version.

use adapter_mixer::toybench::{correlation_from_bundles, domains_from_angles, train_bundle, CorrelationOptions, DomainSpec, TrainConfig};

fn main() -> adapter_mixer::Result<()> {
    let template = DomainSpec {
        train_size: 600,
        ..DomainSpec::new("t", 0.0, 0)
    };
    let specs = domains_from_angles(&[0.0, 0.5, 1.0, 1.5, 2.0], &template);
    let cfg = TrainConfig {
        epochs: 40,
        ..TrainConfig::default()
    };
    let bundles = [1, 2]
        .iter()
        .map(|&seed| train_bundle(&specs, &cfg.clone().with_seed(seed)))
        .collect::<adapter_mixer::Result<Vec<_>>>()?;

    let report = correlation_from_bundles(&bundles, &CorrelationOptions { fgsm_epsilon: Some(0.01), max_k: None })?;
    for t in &report.per_target {
        println!("{:<3} spearman {:>7}  ({} pairs)", t.target, t.spearman.map_or("n/a".into(), |r| format!("{r:.3}")), t.n_pairs);
    }
    println!("pooled spearman: {:?}", report.pooled_spearman);
    for (k, (clean, fgsm)) in report.per_k_mean_acc.iter().zip(report.per_k_mean_fgsm_acc.iter().flatten()).enumerate() {
        println!("k={} clean {clean:.4} fgsm {fgsm:.4}", k + 1);
    }
    Ok(())
}
