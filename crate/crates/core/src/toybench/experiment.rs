//! Trained domain bundles and the FSD versus mixed-accuracy experiment.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{make_domain, DomainDataset, DomainSpec};
use super::eval::{evaluate, Attack};
use super::model::{Backbone, Head};
use super::stats::spearman;
use super::train::{mix_seed, train_adapter, TrainConfig, TrainHistory};
use crate::checkpoint::{load_checkpoint, save_checkpoint, AdapterCheckpoint};
use crate::error::{Error, Result};
use crate::fsd::{fsd_matrix, FsdMatrix};
use crate::fsutil;
use crate::mixer::{enumerate_mixtures, mix_uniform, SubsetSizes};

pub const BUNDLE_DOMAINS_FILE: &str = "domains.json";
pub const BUNDLE_CONFIG_FILE: &str = "train_config.json";
pub const BUNDLE_HISTORY_FILE: &str = "history.json";
pub const BUNDLE_BACKBONE_FILE: &str = "backbone.adpt";
pub const BUNDLE_ADAPTER_DIR: &str = "adapters";
pub const BUNDLE_HEAD_DIR: &str = "heads";
pub const CHECKPOINT_EXTENSION: &str = "adpt";

/// One backbone plus a trained adapter and head per domain.
#[derive(Debug, Clone)]
pub struct ToyBundle {
    pub config: TrainConfig,
    pub backbone: Backbone,
    /// Datasets generated from the effective (seed-mixed) domain specs.
    pub domains: Vec<DomainDataset>,
    pub adapters: Vec<AdapterCheckpoint>,
    pub heads: Vec<Head>,
    pub histories: Vec<TrainHistory>,
}

fn check_specs(specs: &[DomainSpec]) -> Result<()> {
    let first = specs
        .first()
        .ok_or_else(|| Error::out_of_range("domains", "at least one domain is required"))?;
    let mut ids = BTreeSet::new();
    for s in specs {
        s.validate()?;
        if !ids.insert(s.id.as_str()) {
            return Err(Error::out_of_range(
                "domains",
                format!("duplicate domain id `{}`", s.id),
            ));
        }
        if s.input_dim != first.input_dim {
            return Err(Error::Dimension(
                "all domains must share one input dimension".into(),
            ));
        }
    }
    Ok(())
}

/// Trains one adapter per domain over a backbone seeded by `cfg.seed`.
///
/// Each domain's data seed is mixed with `cfg.seed`, so one list of specs
/// yields an independent replicate per training seed.
pub fn train_bundle(specs: &[DomainSpec], cfg: &TrainConfig) -> Result<ToyBundle> {
    check_specs(specs)?;
    cfg.validate()?;
    let backbone = Backbone::init(specs[0].input_dim, cfg.seed);
    let trained = specs
        .par_iter()
        .map(|spec| {
            let effective = DomainSpec {
                seed: mix_seed(spec.seed, cfg.seed),
                ..spec.clone()
            };
            let data = make_domain(&effective)?;
            let t = train_adapter(&backbone, &data, cfg)?;
            Ok((data, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut bundle = ToyBundle {
        config: cfg.clone(),
        backbone,
        domains: Vec::with_capacity(specs.len()),
        adapters: Vec::with_capacity(specs.len()),
        heads: Vec::with_capacity(specs.len()),
        histories: Vec::with_capacity(specs.len()),
    };
    for (data, t) in trained {
        bundle.domains.push(data);
        bundle.adapters.push(t.adapter);
        bundle.heads.push(t.head);
        bundle.histories.push(t.history);
    }
    Ok(bundle)
}

impl ToyBundle {
    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.spec.id.clone()).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.spec.id == id)
    }

    pub fn fsd_matrix(&self) -> Result<FsdMatrix> {
        fsd_matrix(&self.adapters, &self.ids())
    }

    /// Test accuracy on `target`'s domain using its own head and `adapter`.
    pub fn accuracy_with(
        &self,
        target: usize,
        adapter: &AdapterCheckpoint,
        attack: Attack,
    ) -> Result<f64> {
        evaluate(
            &self.backbone,
            adapter,
            &self.heads[target],
            &self.domains[target].test,
            attack,
        )
    }

    /// In-domain accuracy of the uniform mixture of `members` on `target`.
    pub fn mixture_accuracy(&self, target: usize, members: &[usize], attack: Attack) -> Result<f64> {
        let chosen: Vec<&AdapterCheckpoint> = members.iter().map(|&i| &self.adapters[i]).collect();
        self.accuracy_with(target, &mix_uniform(&chosen)?, attack)
    }

    /// Writes the bundle layout:
    /// `domains.json`, `train_config.json`, `history.json`, `backbone.adpt`,
    /// `adapters/<id>.adpt` and `heads/<id>.adpt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mkdir = |p: &Path| {
            std::fs::create_dir_all(p).map_err(|source| Error::Write {
                path: p.to_path_buf(),
                source,
            })
        };
        let adapter_dir = dir.join(BUNDLE_ADAPTER_DIR);
        let head_dir = dir.join(BUNDLE_HEAD_DIR);
        mkdir(&adapter_dir)?;
        mkdir(&head_dir)?;
        let specs: Vec<&DomainSpec> = self.domains.iter().map(|d| &d.spec).collect();
        write_json(&dir.join(BUNDLE_DOMAINS_FILE), &specs)?;
        write_json(&dir.join(BUNDLE_CONFIG_FILE), &self.config)?;
        write_json(&dir.join(BUNDLE_HISTORY_FILE), &self.histories)?;
        save_checkpoint(&self.backbone.to_checkpoint(), dir.join(BUNDLE_BACKBONE_FILE))?;
        for ((d, a), h) in self.domains.iter().zip(&self.adapters).zip(&self.heads) {
            let file = format!("{}.{CHECKPOINT_EXTENSION}", d.spec.id);
            save_checkpoint(a, adapter_dir.join(&file))?;
            save_checkpoint(&h.to_checkpoint().with_name(d.spec.id.clone()), head_dir.join(&file))?;
        }
        Ok(())
    }

    /// Reads a bundle written by [`ToyBundle::save`], regenerating the datasets.
    pub fn load(dir: &Path) -> Result<Self> {
        let specs: Vec<DomainSpec> = read_json(&dir.join(BUNDLE_DOMAINS_FILE))?;
        check_specs(&specs)?;
        let config: TrainConfig = read_json(&dir.join(BUNDLE_CONFIG_FILE))?;
        let histories: Vec<TrainHistory> = read_json(&dir.join(BUNDLE_HISTORY_FILE))?;
        let backbone = Backbone::from_checkpoint(&load_checkpoint(dir.join(BUNDLE_BACKBONE_FILE))?)?;
        let mut bundle = ToyBundle {
            config,
            backbone,
            domains: Vec::new(),
            adapters: Vec::new(),
            heads: Vec::new(),
            histories,
        };
        for spec in specs {
            let file = format!("{}.{CHECKPOINT_EXTENSION}", spec.id);
            bundle
                .adapters
                .push(load_checkpoint(dir.join(BUNDLE_ADAPTER_DIR).join(&file))?);
            bundle.heads.push(Head::from_checkpoint(&load_checkpoint(
                dir.join(BUNDLE_HEAD_DIR).join(&file),
            )?)?);
            bundle.domains.push(make_domain(&spec)?);
        }
        Ok(bundle)
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Parse {
        what: path.display().to_string(),
        reason: e.to_string(),
    })?;
    bytes.push(b'\n');
    fsutil::write_atomic(path, &bytes)
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|source| Error::Open {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        what: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Domains at the given rotation angles, otherwise copying `template`.
pub fn domains_from_angles(angles: &[f64], template: &DomainSpec) -> Vec<DomainSpec> {
    angles
        .iter()
        .enumerate()
        .map(|(i, &angle)| DomainSpec {
            id: format!("d{i}"),
            rotation_angle: angle,
            seed: template.seed.wrapping_add(i as u64),
            ..template.clone()
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrelationOptions {
    /// Also evaluate every mixture under FGSM with this step.
    pub fgsm_epsilon: Option<f64>,
    /// Largest mixture size for the per-k summary (defaults to all domains).
    pub max_k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetCorrelation {
    pub target: String,
    /// `None` when either series is constant.
    pub spearman: Option<f64>,
    pub n_pairs: usize,
}

/// One two-adapter mixture evaluated on its target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub seed: u64,
    pub target: String,
    pub other: String,
    pub fsd: f64,
    pub clean_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fgsm_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub per_target: Vec<TargetCorrelation>,
    pub pooled_spearman: Option<f64>,
    /// Entry `k-1`: mean in-domain accuracy over every mixture of size `k`.
    pub per_k_mean_acc: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_k_mean_fgsm_acc: Option<Vec<f64>>,
    pub pairs: Vec<PairRecord>,
}

struct Evaluated {
    bundle: usize,
    target: usize,
    members: Vec<usize>,
    clean: f64,
    fgsm: Option<f64>,
}

/// Spearman correlation between pairwise FSD and the in-domain accuracy of
/// two-adapter mixtures, plus mean accuracy per mixture size.
pub fn correlation_from_bundles(
    bundles: &[ToyBundle],
    opts: &CorrelationOptions,
) -> Result<CorrelationReport> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::out_of_range("seeds", "at least one replicate is required"))?;
    let ids = first.ids();
    let n = ids.len();
    if n < 3 {
        return Err(Error::out_of_range(
            "num_domains",
            format!("need at least 3 domains, got {n}"),
        ));
    }
    if bundles.iter().any(|b| b.ids() != ids) {
        return Err(Error::Dimension(
            "replicates must share the same domain ids".into(),
        ));
    }
    let max_k = opts.max_k.unwrap_or(n);
    if !(1..=n).contains(&max_k) {
        return Err(Error::out_of_range(
            "max_k",
            format!("must be in 1..={n}, got {max_k}"),
        ));
    }
    let top = max_k.max(2);

    let mut jobs = Vec::new();
    for b in 0..bundles.len() {
        for t in 0..n {
            for spec in enumerate_mixtures(t, n, SubsetSizes::Range { min: 1, max: top })? {
                jobs.push((b, t, spec.members));
            }
        }
    }
    let evaluated = jobs
        .into_par_iter()
        .map(|(b, t, members)| {
            let bundle = &bundles[b];
            let clean = bundle.mixture_accuracy(t, &members, Attack::None)?;
            let fgsm = opts
                .fgsm_epsilon
                .map(|epsilon| bundle.mixture_accuracy(t, &members, Attack::Fgsm { epsilon }))
                .transpose()?;
            Ok(Evaluated {
                bundle: b,
                target: t,
                members,
                clean,
                fgsm,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let matrices = bundles
        .iter()
        .map(ToyBundle::fsd_matrix)
        .collect::<Result<Vec<_>>>()?;

    let pairs: Vec<PairRecord> = evaluated
        .iter()
        .filter(|e| e.members.len() == 2)
        .map(|e| {
            let other = *e.members.iter().find(|&&m| m != e.target).expect("pair");
            PairRecord {
                seed: bundles[e.bundle].config.seed,
                target: ids[e.target].clone(),
                other: ids[other].clone(),
                fsd: matrices[e.bundle].get(e.target, other),
                clean_acc: e.clean,
                fgsm_acc: e.fgsm,
            }
        })
        .collect();

    let per_target = ids
        .iter()
        .map(|id| {
            let (fsd, acc): (Vec<f64>, Vec<f64>) = pairs
                .iter()
                .filter(|p| &p.target == id)
                .map(|p| (p.fsd, p.clean_acc))
                .unzip();
            TargetCorrelation {
                target: id.clone(),
                spearman: spearman(&fsd, &acc),
                n_pairs: fsd.len(),
            }
        })
        .collect();
    let (fsd, acc): (Vec<f64>, Vec<f64>) = pairs.iter().map(|p| (p.fsd, p.clean_acc)).unzip();

    let mean_by_k = |pick: &dyn Fn(&Evaluated) -> f64| -> Vec<f64> {
        (1..=max_k)
            .map(|k| {
                let vals: Vec<f64> = evaluated
                    .iter()
                    .filter(|e| e.members.len() == k)
                    .map(pick)
                    .collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            })
            .collect()
    };
    let per_k_mean_acc = mean_by_k(&|e| e.clean);
    let per_k_mean_fgsm_acc = opts
        .fgsm_epsilon
        .map(|_| mean_by_k(&|e| e.fgsm.expect("fgsm evaluated")));

    Ok(CorrelationReport {
        per_target,
        pooled_spearman: spearman(&fsd, &acc),
        per_k_mean_acc,
        per_k_mean_fgsm_acc,
        pairs,
    })
}

/// Trains one bundle per seed and runs [`correlation_from_bundles`].
pub fn correlation_experiment(
    specs: &[DomainSpec],
    cfg: &TrainConfig,
    seeds: &[u64],
    opts: &CorrelationOptions,
) -> Result<CorrelationReport> {
    if specs.len() < 3 {
        return Err(Error::out_of_range(
            "num_domains",
            format!("need at least 3 domains, got {}", specs.len()),
        ));
    }
    let bundles = seeds
        .iter()
        .map(|&s| train_bundle(specs, &cfg.clone().with_seed(s)))
        .collect::<Result<Vec<_>>>()?;
    correlation_from_bundles(&bundles, opts)
}
