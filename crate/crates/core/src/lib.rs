//! Weight-space mixing of adapter checkpoints.
//!
//! - [`checkpoint`]: canonical binary checkpoint format and compatibility checks
//! - [`fsd`]: fraction of sign difference between adapters
//! - [`mixer`]: uniform averaging, mixture enumeration, greedy FSD-guided selection
//! - [`pruner`]: magnitude pruning and sparse mixing of high-conflict tensors
//! - [`toybench`]: a small synthetic benchmark that trains, mixes and attacks adapters
//! - [`cli`]: the `adapter-mixer` command line
//!
//! Runnable walkthroughs live in `examples/`.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod fsd;
pub mod fsutil;
pub mod mixer;
pub mod pruner;
pub mod report;
pub mod toybench;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, validate_compat, AdapterCheckpoint, CompatReport, Tensor,
};
pub use error::{Error, Result};
pub use fsd::{fsd_matrix, fsd_pair, fsd_per_tensor, mean_fsd_rows, FsdMatrix};
pub use mixer::{
    count_all_mixtures, enumerate_mixtures, greedy_mix, mix_uniform, MixMethod, MixtureSpec,
    SubsetSizes,
};
pub use pruner::{
    magnitude_prune, select_conflict_layers, sparse_mix, ConflictPool, PruneMask, PruneScope,
};
