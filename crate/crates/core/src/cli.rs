//! The `adapter-mixer` command line.
//!
//! Every command that writes files also writes a [`RunManifest`] beside its
//! primary output (`<output>.manifest.json`, or `manifest.json` inside an
//! output directory). `adapter-mixer replay --manifest m.json` re-runs the
//! recorded command and checks that every output is byte-identical.
//!
//! Exit codes: 0 on success, 1 on domain errors, 2 on usage errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, AdapterCheckpoint};
use crate::error::{Error, Result};
use crate::fsd::{fsd_matrix, fsd_per_tensor, FsdMatrix};
use crate::fsutil::{sha256_file, sha256_hex, write_atomic};
use crate::mixer::{enumerate_mixtures, greedy_mix, mix_uniform, SubsetSizes};
use crate::pruner::{magnitude_prune, sparse_mix_with_pool, ConflictPool, PruneScope};
use crate::report::{emit_heatmap_svg, emit_report_csv, read_report_csv, summarize_sweep, summary_csv, SweepRow};
use crate::toybench::experiment::{BUNDLE_DOMAINS_FILE, CHECKPOINT_EXTENSION};
use crate::toybench::{
    correlation_experiment, train_bundle, Attack, CorrelationOptions, DomainSpec, ToyBundle,
    TrainConfig, DEFAULT_FGSM_EPSILON,
};

pub const THREADS_ENV: &str = "ADAPTER_MIXER_THREADS";
pub const MANIFEST_SUFFIX: &str = ".manifest.json";
pub const DIR_MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "adapter-mixer", version, about = "Mix, compare and prune adapter checkpoints")]
pub struct Cli {
    /// Worker threads (default: available cores). ADAPTER_MIXER_THREADS wins.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for commands that train or sample.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Pairwise fraction-of-sign-difference matrix.
    Fsd(FsdArgs),
    /// Uniform average of the inputs.
    Mix(MixArgs),
    /// Average of the `l` inputs with the smallest mean FSD.
    GreedyMix(GreedyMixArgs),
    /// Magnitude pruning of one checkpoint.
    Prune(PruneArgs),
    /// Greedy selection, conflict-layer pruning, then averaging.
    SparseMix(SparseMixArgs),
    /// Every mixture over a pool, optionally evaluated on a toy bundle.
    Sweep(SweepArgs),
    /// Synthetic benchmark.
    #[command(subcommand)]
    Toy(ToyCommand),
    /// Heatmap SVG from an FSD CSV and/or per-(target, k) summary from a sweep CSV.
    Report(ReportArgs),
    /// Re-run a recorded command and verify byte-identical outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
struct FsdArgs {
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write one matrix per tensor into this directory.
    #[arg(long)]
    per_tensor: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct MixArgs {
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct GreedyMixArgs {
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    fsd: PathBuf,
    #[arg(short = 'l')]
    l: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ScopeArg {
    PerTensor,
    Global,
}

impl From<ScopeArg> for PruneScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::PerTensor => PruneScope::PerTensor,
            ScopeArg::Global => PruneScope::Global,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum PoolArg {
    Selected,
    All,
}

impl From<PoolArg> for ConflictPool {
    fn from(p: PoolArg) -> Self {
        match p {
            PoolArg::Selected => ConflictPool::Selected,
            PoolArg::All => ConflictPool::All,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct PruneArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(short = 's')]
    sparsity: f64,
    #[arg(long, value_enum, default_value = "per-tensor")]
    scope: ScopeArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SparseMixArgs {
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    fsd: PathBuf,
    #[arg(short = 'l')]
    l: usize,
    #[arg(short = 'm')]
    m: usize,
    #[arg(short = 's')]
    sparsity: f64,
    #[arg(long, value_enum, default_value = "selected")]
    conflict_pool: PoolArg,
    #[arg(long)]
    out: PathBuf,
}

/// `a..b`, `a..`, `..b` or a single size `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SizeRange {
    pub min: Option<usize>,
    pub max: Option<usize>,
}

impl SizeRange {
    fn resolve(self, pool_size: usize) -> SubsetSizes {
        SubsetSizes::Range {
            min: self.min.unwrap_or(1),
            max: self.max.unwrap_or(pool_size),
        }
    }
}

pub fn parse_sizes(text: &str) -> std::result::Result<SizeRange, String> {
    let num = |s: &str| -> std::result::Result<Option<usize>, String> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(None);
        }
        s.parse()
            .map(Some)
            .map_err(|_| format!("`{s}` is not a mixture size"))
    };
    let range = match text.split_once("..") {
        Some((a, b)) => SizeRange {
            min: num(a)?,
            max: num(b.strip_prefix('=').unwrap_or(b))?,
        },
        None => {
            let k = num(text)?.ok_or("empty size")?;
            SizeRange {
                min: Some(k),
                max: Some(k),
            }
        }
    };
    if range.min == Some(0) {
        return Err("mixture sizes start at 1".into());
    }
    if let (Some(a), Some(b)) = (range.min, range.max) {
        if a > b {
            return Err(format!("empty size range {text}"));
        }
    }
    Ok(range)
}

#[derive(Debug, Clone, Args, Serialize)]
struct SweepArgs {
    /// Directory of `.adpt` files, or a toy bundle written by `toy train`.
    #[arg(long)]
    pool: PathBuf,
    /// Restrict to one target (default: every adapter in the pool).
    #[arg(long)]
    target: Option<String>,
    #[arg(long, value_parser = parse_sizes)]
    sizes: Option<SizeRange>,
    #[arg(long)]
    report: PathBuf,
    /// FGSM step for bundle evaluation.
    #[arg(long, default_value_t = DEFAULT_FGSM_EPSILON)]
    fgsm: f64,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ToyCommand {
    /// Train one adapter and head per domain and write a bundle.
    Train(ToyTrainArgs),
    /// FSD versus mixed-accuracy correlation over one or more seeds.
    Correlate(ToyCorrelateArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
struct ToyTrainArgs {
    #[arg(long)]
    domains: PathBuf,
    /// Training configuration JSON (defaults apply to missing fields).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct ToyCorrelateArgs {
    #[arg(long)]
    domains: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated replicate seeds (default: the global seed, else 0).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Largest mixture size in the per-k summary.
    #[arg(long)]
    max_k: Option<usize>,
    /// Also evaluate every mixture under FGSM with this step.
    #[arg(long)]
    fgsm: Option<f64>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(group = clap::ArgGroup::new("source").required(true).multiple(true).args(["fsd", "sweep"]))]
struct ReportArgs {
    #[arg(long, requires = "svg")]
    fsd: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long, requires = "summary")]
    sweep: Option<PathBuf>,
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
}

/// A file read or written by a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    /// Digest of the canonical serialization, for checkpoint files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canonical_sha256: Option<String>,
}

/// Provenance of one command run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    /// Arguments after the program name, verbatim.
    pub argv: Vec<String>,
    pub cwd: String,
    /// SHA-256 of the parsed command configuration.
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub created_unix: u64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        crate::toybench::experiment::read_json(path)
    }
}

struct Context {
    argv: Vec<String>,
    global_seed: Option<u64>,
    quiet: bool,
}

impl Context {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// What a command touched, for its manifest.
#[derive(Default)]
struct Run {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seeds: Vec<u64>,
    manifest: Option<PathBuf>,
}

impl Run {
    fn primary(&mut self, path: &Path) {
        self.manifest.get_or_insert_with(|| manifest_path_for(path));
        self.outputs.push(path.to_path_buf());
    }
}

fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(MANIFEST_SUFFIX);
    output.with_file_name(name)
}

fn open_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Open {
        path: path.to_path_buf(),
        source,
    }
}

fn digest(path: &Path) -> Result<FileDigest> {
    let sha256 = sha256_file(path)?;
    let canonical_sha256 = if path.extension().is_some_and(|e| e == CHECKPOINT_EXTENSION) {
        Some(sha256_hex(&load_checkpoint(path)?.to_bytes()?))
    } else {
        None
    };
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256,
        canonical_sha256,
    })
}

/// Regular files under `dir`, sorted, skipping manifests.
fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(open_err(&d))? {
            let path = entry.map_err(open_err(&d))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if !path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n == DIR_MANIFEST_FILE || n.ends_with(MANIFEST_SUFFIX))
            {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn expand(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            out.extend(files_under(p)?);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn write_manifest(ctx: &Context, command: &Command, run: &Run) -> Result<()> {
    let Some(path) = &run.manifest else {
        return Ok(());
    };
    let config = serde_json::to_vec(command).map_err(|e| Error::Parse {
        what: "command configuration".into(),
        reason: e.to_string(),
    })?;
    let mut seeds = run.seeds.clone();
    if let Some(s) = ctx.global_seed {
        if !seeds.contains(&s) {
            seeds.insert(0, s);
        }
    }
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").into(),
        argv: ctx.argv.clone(),
        cwd: std::env::current_dir()
            .map(|p| p.display().to_string())
            .unwrap_or_default(),
        config_digest: sha256_hex(&config),
        seeds,
        inputs: expand(&run.inputs)?
            .iter()
            .map(|p| digest(p))
            .collect::<Result<_>>()?,
        outputs: expand(&run.outputs)?
            .iter()
            .map(|p| digest(p))
            .collect::<Result<_>>()?,
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    crate::toybench::experiment::write_json(path, &manifest)
}

fn file_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Loads checkpoints, naming unnamed ones after their file stem.
fn load_named(paths: &[PathBuf]) -> Result<Vec<AdapterCheckpoint>> {
    paths
        .iter()
        .map(|p| {
            let ckpt = load_checkpoint(p)?;
            Ok(match ckpt.name() {
                Some(_) => ckpt,
                None => ckpt.with_name(file_label(p)),
            })
        })
        .collect()
}

fn labels(adapters: &[AdapterCheckpoint]) -> Vec<String> {
    adapters
        .iter()
        .map(|a| a.name().unwrap_or_default().to_string())
        .collect()
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

fn cmd_fsd(ctx: &Context, a: &FsdArgs, run: &mut Run) -> Result<()> {
    run.inputs.extend(a.inputs.iter().cloned());
    let adapters = load_named(&a.inputs)?;
    let names = labels(&adapters);
    let matrix = fsd_matrix(&adapters, &names)?;
    matrix.save_csv(&a.out)?;
    run.primary(&a.out);
    if let Some(dir) = &a.per_tensor {
        std::fs::create_dir_all(dir).map_err(|source| Error::Write {
            path: dir.clone(),
            source,
        })?;
        let k = adapters.len();
        let pairs: Vec<(usize, usize)> = (0..k)
            .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
            .collect();
        let per_pair = pairs
            .par_iter()
            .map(|&(i, j)| fsd_per_tensor(&adapters[i], &adapters[j]))
            .collect::<Result<Vec<_>>>()?;
        let tensor_names: Vec<String> = adapters[0].tensor_names().map(String::from).collect();
        for t in &tensor_names {
            let mut values = vec![vec![0.0; k]; k];
            for (&(i, j), fsd) in pairs.iter().zip(&per_pair) {
                values[i][j] = fsd[t];
                values[j][i] = fsd[t];
            }
            let path = dir.join(format!("{}.csv", sanitize(t)));
            FsdMatrix::new(names.clone(), values)?.save_csv(&path)?;
            run.outputs.push(path);
        }
    }
    ctx.say(format!("wrote {}x{} FSD matrix to {}", names.len(), names.len(), a.out.display()));
    Ok(())
}

fn cmd_mix(ctx: &Context, a: &MixArgs, run: &mut Run) -> Result<()> {
    run.inputs.extend(a.inputs.iter().cloned());
    let adapters = load_named(&a.inputs)?;
    let mixed = mix_uniform(&adapters)?;
    save_checkpoint(&mixed, &a.out)?;
    run.primary(&a.out);
    ctx.say(format!("mixed {} adapters into {}", adapters.len(), a.out.display()));
    Ok(())
}

fn cmd_greedy(ctx: &Context, a: &GreedyMixArgs, run: &mut Run) -> Result<()> {
    run.inputs.extend(a.inputs.iter().cloned());
    run.inputs.push(a.fsd.clone());
    let adapters = load_named(&a.inputs)?;
    let matrix = FsdMatrix::load_csv(&a.fsd)?;
    let (mixed, selected) = greedy_mix(&adapters, &matrix, a.l)?;
    save_checkpoint(&mixed, &a.out)?;
    run.primary(&a.out);
    let chosen: Vec<&str> = selected.iter().map(|&i| matrix.labels()[i].as_str()).collect();
    ctx.say(format!("selected {}; wrote {}", chosen.join(", "), a.out.display()));
    Ok(())
}

fn cmd_prune(ctx: &Context, a: &PruneArgs, run: &mut Run) -> Result<()> {
    run.inputs.push(a.input.clone());
    let adapter = load_checkpoint(&a.input)?;
    let (pruned, mask) = magnitude_prune(&adapter, a.sparsity, a.scope.into())?;
    save_checkpoint(&pruned, &a.out)?;
    run.primary(&a.out);
    if let Some(path) = &a.mask {
        mask.save_json(path)?;
        run.outputs.push(path.clone());
    }
    let kept: usize = mask.iter().map(|(_, m)| m.iter().filter(|&&k| k).count()).sum();
    ctx.say(format!(
        "kept {kept} of {} parameters; wrote {}",
        adapter.param_count(),
        a.out.display()
    ));
    Ok(())
}

fn cmd_sparse(ctx: &Context, a: &SparseMixArgs, run: &mut Run) -> Result<()> {
    run.inputs.extend(a.inputs.iter().cloned());
    run.inputs.push(a.fsd.clone());
    let adapters = load_named(&a.inputs)?;
    let matrix = FsdMatrix::load_csv(&a.fsd)?;
    let (mixed, selected) = sparse_mix_with_pool(
        &adapters,
        &matrix,
        a.l,
        a.m,
        a.sparsity,
        a.conflict_pool.into(),
    )?;
    save_checkpoint(&mixed, &a.out)?;
    run.primary(&a.out);
    let chosen: Vec<&str> = selected.iter().map(|&i| matrix.labels()[i].as_str()).collect();
    ctx.say(format!("selected {}; wrote {}", chosen.join(", "), a.out.display()));
    Ok(())
}

enum Pool {
    Plain(Vec<AdapterCheckpoint>),
    Bundle(Box<ToyBundle>),
}

impl Pool {
    fn load(dir: &Path) -> Result<Self> {
        if dir.join(BUNDLE_DOMAINS_FILE).is_file() {
            return Ok(Pool::Bundle(Box::new(ToyBundle::load(dir)?)));
        }
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(open_err(dir))?
            .map(|e| e.map(|e| e.path()).map_err(open_err(dir)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == CHECKPOINT_EXTENSION))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::InvalidCheckpoint(format!(
                "no .{CHECKPOINT_EXTENSION} files in {}",
                dir.display()
            )));
        }
        Ok(Pool::Plain(load_named(&paths)?))
    }

    fn adapters(&self) -> &[AdapterCheckpoint] {
        match self {
            Pool::Plain(a) => a,
            Pool::Bundle(b) => &b.adapters,
        }
    }

    fn labels(&self) -> Vec<String> {
        match self {
            Pool::Plain(a) => labels(a),
            Pool::Bundle(b) => b.ids(),
        }
    }
}

fn cmd_sweep(ctx: &Context, a: &SweepArgs, run: &mut Run) -> Result<()> {
    run.inputs.push(a.pool.clone());
    if !a.pool.is_dir() {
        return Err(Error::Open {
            path: a.pool.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "pool is not a directory"),
        });
    }
    let pool = Pool::load(&a.pool)?;
    let names = pool.labels();
    let n = names.len();
    let matrix = fsd_matrix(pool.adapters(), &names)?;
    let targets: Vec<usize> = match &a.target {
        Some(t) => vec![names.iter().position(|n| n == t).ok_or_else(|| {
            Error::out_of_range("target", format!("`{t}` is not in the pool ({})", names.join(", ")))
        })?],
        None => (0..n).collect(),
    };
    let sizes = a
        .sizes
        .unwrap_or(SizeRange { min: None, max: None })
        .resolve(n);
    let mut jobs = Vec::new();
    for &t in &targets {
        jobs.extend(enumerate_mixtures(t, n, sizes)?.map(|spec| (t, spec.members)));
    }
    let rows = jobs
        .par_iter()
        .map(|(t, members)| {
            let pairs: Vec<f64> = members
                .iter()
                .enumerate()
                .flat_map(|(x, &i)| members[x + 1..].iter().map(move |&j| (i, j)))
                .map(|(i, j)| matrix.get(i, j))
                .collect();
            let fsd_mean = if pairs.is_empty() {
                0.0
            } else {
                pairs.iter().sum::<f64>() / pairs.len() as f64
            };
            let (clean_acc, fgsm_acc) = match &pool {
                Pool::Plain(_) => (None, None),
                Pool::Bundle(b) => {
                    let chosen: Vec<&AdapterCheckpoint> = members.iter().map(|&i| &b.adapters[i]).collect();
                    let mixed = mix_uniform(&chosen)?;
                    (
                        Some(b.accuracy_with(*t, &mixed, Attack::None)?),
                        Some(b.accuracy_with(*t, &mixed, Attack::Fgsm { epsilon: a.fgsm })?),
                    )
                }
            };
            Ok(SweepRow {
                target: names[*t].clone(),
                k: members.len(),
                members: members.iter().map(|&i| names[i].clone()).collect(),
                clean_acc,
                fgsm_acc,
                fsd_mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    emit_report_csv(&rows, &a.report)?;
    run.primary(&a.report);
    ctx.say(format!("wrote {} mixtures to {}", rows.len(), a.report.display()));
    Ok(())
}

fn read_train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match path {
        Some(p) => crate::toybench::experiment::read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_toy_train(ctx: &Context, a: &ToyTrainArgs, run: &mut Run) -> Result<()> {
    run.inputs.push(a.domains.clone());
    run.inputs.extend(a.config.iter().cloned());
    let specs: Vec<DomainSpec> = crate::toybench::experiment::read_json(&a.domains)?;
    let cfg = read_train_config(a.config.as_deref(), ctx.global_seed)?;
    run.seeds.push(cfg.seed);
    let bundle = train_bundle(&specs, &cfg)?;
    bundle.save(&a.out_dir)?;
    run.outputs.push(a.out_dir.clone());
    run.manifest = Some(a.out_dir.join(DIR_MANIFEST_FILE));
    ctx.say(format!("trained {} adapters into {}", bundle.len(), a.out_dir.display()));
    Ok(())
}

fn cmd_toy_correlate(ctx: &Context, a: &ToyCorrelateArgs, run: &mut Run) -> Result<()> {
    run.inputs.push(a.domains.clone());
    run.inputs.extend(a.config.iter().cloned());
    let specs: Vec<DomainSpec> = crate::toybench::experiment::read_json(&a.domains)?;
    let cfg = read_train_config(a.config.as_deref(), None)?;
    let seeds = if a.seeds.is_empty() {
        vec![ctx.global_seed.unwrap_or(cfg.seed)]
    } else {
        a.seeds.clone()
    };
    run.seeds.extend(&seeds);
    let opts = CorrelationOptions {
        fgsm_epsilon: a.fgsm,
        max_k: a.max_k,
    };
    let report = correlation_experiment(&specs, &cfg, &seeds, &opts)?;
    crate::toybench::experiment::write_json(&a.report, &report)?;
    run.primary(&a.report);
    match report.pooled_spearman {
        Some(r) => ctx.say(format!("pooled Spearman {r:.4}; wrote {}", a.report.display())),
        None => ctx.say(format!("pooled Spearman undefined; wrote {}", a.report.display())),
    }
    Ok(())
}

fn cmd_report(ctx: &Context, a: &ReportArgs, run: &mut Run) -> Result<()> {
    if let (Some(fsd), Some(svg)) = (&a.fsd, &a.svg) {
        run.inputs.push(fsd.clone());
        emit_heatmap_svg(&FsdMatrix::load_csv(fsd)?, svg)?;
        run.primary(svg);
        ctx.say(format!("wrote {}", svg.display()));
    }
    if let (Some(sweep), Some(summary)) = (&a.sweep, &a.summary) {
        run.inputs.push(sweep.clone());
        let groups = summarize_sweep(&read_report_csv(sweep)?);
        write_atomic(summary, &summary_csv(&groups)?)?;
        run.primary(summary);
        ctx.say(format!("wrote {}", summary.display()));
    }
    Ok(())
}

fn cmd_replay(ctx: &Context, a: &ReplayArgs) -> Result<()> {
    let manifest = RunManifest::load(&a.manifest)?;
    for input in &manifest.inputs {
        let actual = sha256_file(Path::new(&input.path))?;
        if actual != input.sha256 {
            return Err(Error::ReplayMismatch {
                path: input.path.clone(),
                expected: input.sha256.clone(),
                actual,
            });
        }
    }
    let mut argv = vec![OsString::from("adapter-mixer")];
    argv.extend(manifest.argv.iter().map(OsString::from));
    let cli = Cli::try_parse_from(&argv).map_err(|e| Error::Parse {
        what: a.manifest.display().to_string(),
        reason: e.to_string(),
    })?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(Error::Parse {
            what: a.manifest.display().to_string(),
            reason: "a manifest cannot record a replay".into(),
        });
    }
    execute(cli, manifest.argv.clone())?;
    for output in &manifest.outputs {
        let actual = sha256_file(Path::new(&output.path))?;
        if actual != output.sha256 {
            return Err(Error::ReplayMismatch {
                path: output.path.clone(),
                expected: output.sha256.clone(),
                actual,
            });
        }
    }
    ctx.say(format!("{} outputs reproduced byte-for-byte", manifest.outputs.len()));
    Ok(())
}

fn thread_count(flag: Option<usize>) -> std::result::Result<Option<usize>, String> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(format!("{THREADS_ENV} must be a positive integer, got `{v}`")),
        },
        _ => match flag {
            Some(0) => Err("--threads must be positive".into()),
            other => Ok(other),
        },
    }
}

fn execute(cli: Cli, argv: Vec<String>) -> Result<()> {
    let ctx = Context {
        argv,
        global_seed: cli.seed,
        quiet: cli.quiet,
    };
    let mut run = Run::default();
    match &cli.command {
        Command::Fsd(a) => cmd_fsd(&ctx, a, &mut run)?,
        Command::Mix(a) => cmd_mix(&ctx, a, &mut run)?,
        Command::GreedyMix(a) => cmd_greedy(&ctx, a, &mut run)?,
        Command::Prune(a) => cmd_prune(&ctx, a, &mut run)?,
        Command::SparseMix(a) => cmd_sparse(&ctx, a, &mut run)?,
        Command::Sweep(a) => cmd_sweep(&ctx, a, &mut run)?,
        Command::Toy(ToyCommand::Train(a)) => cmd_toy_train(&ctx, a, &mut run)?,
        Command::Toy(ToyCommand::Correlate(a)) => cmd_toy_correlate(&ctx, a, &mut run)?,
        Command::Report(a) => cmd_report(&ctx, a, &mut run)?,
        Command::Replay(a) => return cmd_replay(&ctx, a),
    }
    write_manifest(&ctx, &cli.command, &run)
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let threads = match thread_count(cli.threads) {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 2;
        }
    };
    let argv: Vec<String> = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return 1;
        }
    };
    match pool.install(|| execute(cli, argv)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
