//! Desk-scale benchmark: synthetic rotated-cluster domains, a frozen tiny
//! backbone with bottleneck adapters, per-domain heads, clean and FGSM
//! evaluation, and the FSD versus mixed-accuracy experiment.

pub mod data;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod stats;
pub mod train;

pub use data::{make_domain, DomainDataset, DomainSpec, Split};
pub use eval::{evaluate, fgsm_perturb, Attack, DEFAULT_FGSM_EPSILON};
pub use experiment::{
    correlation_experiment, correlation_from_bundles, domains_from_angles, train_bundle,
    CorrelationOptions, CorrelationReport, PairRecord, TargetCorrelation, ToyBundle,
};
pub use gradcheck::{central_difference_check, grad_check};
pub use model::{AdapterParams, Backbone, Head, ToyModel, ADAPTER_TENSORS};
pub use stats::spearman;
pub use train::{train_adapter, TrainConfig, TrainHistory, TrainedAdapter};
