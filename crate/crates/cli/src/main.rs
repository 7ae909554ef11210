//! `hgr`: generate synthetic taxonomies, validate hierarchies, train class
//! embeddings with the hierarchical contrastive objective, evaluate, and run
//! ablation and k-shot sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use hgr::experiment::{
    load_checkpoint, load_data_dir, run_ablate, run_eval, run_fewshot, run_train, save_checkpoint,
    write_data_dir, AblateAxis, DataDir, RunConfig,
};
use hgr::featurestore::ClassEncoder;
use hgr::formats::{read_edge_list, read_split};
use hgr::hgrloss::{LossConfig, LossVariant, RangeConvention};
use hgr::hierarchy::{HierarchyDag, LoadOptions};
use hgr::levelweights::WeightingStrategy;
use hgr::negsampling::SamplingStrategy;
use hgr::synthgen::{generate, SynthConfig};
use hgr::trainer::{LrSchedule, TrainConfig};
use hgr::zsmetrics::CandidateMode;
use hgr::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "hgr", version, about = "Hierarchical contrastive training for zero-shot classification")]
struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic data directory.
    Synth(SynthArgs),
    /// Check a hierarchy edge list and print its statistics.
    Validate(ValidateArgs),
    /// Train class embeddings on the seen classes of a data directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the unseen classes of a data directory.
    Eval(EvalArgs),
    /// Train and evaluate once per value of one configuration axis.
    Ablate(AblateArgs),
    /// Train and evaluate with k images of each unseen class added to training.
    Fewshot(FewshotArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    depth: usize,
    #[arg(long, default_value_t = 3)]
    branching: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Per-level class noise, comma separated, one per level.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.6, 0.45, 0.35, 0.25])]
    sigma_class: Vec<f64>,
    #[arg(long, default_value_t = 0.3)]
    sigma_image: f64,
    #[arg(long, default_value_t = 20)]
    images_per_class: usize,
    #[arg(long, default_value_t = 0.7)]
    seen_fraction: f64,
}

#[derive(Args, Debug)]
struct HierarchyArgs {
    /// Root node name; otherwise the single source or a synthetic root.
    #[arg(long)]
    root: Option<String>,
    /// Drop nodes unreachable from the root instead of failing.
    #[arg(long)]
    prune_unreachable: bool,
}

impl HierarchyArgs {
    fn options(&self) -> LoadOptions {
        LoadOptions {
            declared_root: self.root.clone(),
            prune_unreachable: self.prune_unreachable,
            ..Default::default()
        }
    }
}

#[derive(Args, Debug)]
struct ValidateArgs {
    /// Edge list, one `child<TAB>parent` per line.
    hierarchy: PathBuf,
    /// Optional split file to check against the hierarchy.
    #[arg(long)]
    split: Option<PathBuf>,
    #[command(flatten)]
    h: HierarchyArgs,
}

#[derive(Args, Debug, Clone)]
struct LossArgs {
    /// Outer ratio.
    #[arg(long, default_value_t = 0.25)]
    k: f64,
    /// Inner ratio.
    #[arg(long, default_value_t = 0.5)]
    m: f64,
    #[arg(long, default_value_t = 256)]
    epsilon: usize,
    #[arg(long, default_value_t = 0.07)]
    tau_init: f64,
    /// random | sibling | similarity | topm
    #[arg(long, default_value = "topm")]
    sampling: String,
    #[arg(long, default_value_t = 1)]
    topm_m: usize,
    /// adaptive | equal | lin-inc | lin-dec | exp-inc | exp-dec | inv-freq
    #[arg(long, default_value = "adaptive")]
    weighting: String,
    /// algorithmic | ablation
    #[arg(long, default_value = "algorithmic")]
    range_convention: String,
    /// full | outer-only | inner-only | flat
    #[arg(long, default_value = "full")]
    variant: String,
    /// Divide the weighted sum by the weights of the levels actually used.
    #[arg(long)]
    renormalize_active: bool,
    /// path-sum | table
    #[arg(long, default_value = "path-sum")]
    encoder: String,
}

#[derive(Args, Debug, Clone)]
struct OptimArgs {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr_adaptive: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 1.0)]
    clip_norm: f64,
    /// constant | cosine
    #[arg(long, default_value = "cosine")]
    schedule: String,
}

#[derive(Args, Debug, Clone)]
struct EvalOpts {
    /// zsl | gzsl
    #[arg(long, default_value = "zsl")]
    mode: String,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 5, 10, 20])]
    ks: Vec<usize>,
    /// Number of top predictions counted by TOR.
    #[arg(long, default_value_t = 1)]
    tor_topk: usize,
    /// Also write the report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    loss: LossArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    h: HierarchyArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    eval: EvalOpts,
    #[command(flatten)]
    h: HierarchyArgs,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// k | m | sampling | weighting | variant
    #[arg(long)]
    axis: String,
    /// Comma-separated values for the axis.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    values: Vec<String>,
    #[command(flatten)]
    loss: LossArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    eval: EvalOpts,
    #[command(flatten)]
    h: HierarchyArgs,
}

#[derive(Args, Debug)]
struct FewshotArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated shot counts.
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 3, 5, 10])]
    shots: Vec<usize>,
    #[command(flatten)]
    loss: LossArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    eval: EvalOpts,
    #[command(flatten)]
    h: HierarchyArgs,
}

fn run_config(seed: u64, loss: &LossArgs, optim: &OptimArgs, eval: Option<&EvalOpts>) -> Result<RunConfig> {
    let loss_cfg = LossConfig {
        outer_ratio: loss.k,
        inner_ratio: loss.m,
        epsilon: loss.epsilon,
        tau: loss.tau_init,
        sampling: SamplingStrategy::parse(&loss.sampling, loss.topm_m)?,
        weighting: WeightingStrategy::parse(&loss.weighting)?,
        range_convention: RangeConvention::parse(&loss.range_convention)?,
        variant: LossVariant::parse(&loss.variant)?,
        renormalize_active: loss.renormalize_active,
    };
    loss_cfg.validate()?;
    let train = TrainConfig {
        epochs: optim.epochs,
        batch_size: optim.batch_size,
        lr_main: optim.lr,
        lr_adaptive: optim.lr_adaptive,
        weight_decay: optim.weight_decay,
        clip_norm: optim.clip_norm,
        schedule: LrSchedule::parse(&optim.schedule)?,
        seed,
    };
    train.validate()?;
    let mut cfg = RunConfig {
        loss: loss_cfg,
        train,
        encoder: ClassEncoder::parse(&loss.encoder)?,
        ..Default::default()
    };
    if let Some(e) = eval {
        apply_eval(&mut cfg, e)?;
    }
    Ok(cfg)
}

fn apply_eval(cfg: &mut RunConfig, e: &EvalOpts) -> Result<()> {
    cfg.mode = CandidateMode::parse(&e.mode)?;
    if e.ks.is_empty() || e.ks.contains(&0) || e.tor_topk == 0 {
        return Err(Error::Config("--ks and --tor-topk need positive values".into()));
    }
    cfg.ks = e.ks.clone();
    cfg.tor_topk = e.tor_topk;
    Ok(())
}

fn emit(text: &str, path: Option<&Path>) -> Result<()> {
    print!("{text}");
    if let Some(p) = path {
        fs::write(p, text)?;
        info!("report written to {}", p.display());
    }
    Ok(())
}

fn cmd_synth(seed: u64, a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        depth: a.depth,
        branching: a.branching,
        dim: a.dim,
        sigma_class: a.sigma_class.clone(),
        sigma_image: a.sigma_image,
        images_per_class: a.images_per_class,
        seen_fraction: a.seen_fraction,
        seed,
    };
    let (dag, _, data, split) = generate(&cfg)?;
    write_data_dir(&a.out, &DataDir { dag, data, split: split.clone() }, &cfg.to_key_values())?;
    println!(
        "wrote {}: {} images, {} seen / {} unseen classes",
        a.out.display(),
        cfg.images_per_class * (split.seen.len() + split.unseen.len()),
        split.seen.len(),
        split.unseen.len()
    );
    Ok(())
}

fn cmd_validate(a: &ValidateArgs) -> Result<()> {
    let edges = read_edge_list(&a.hierarchy)?;
    let dag = HierarchyDag::load(&edges, &a.h.options())?;
    println!("nodes\t{}", dag.node_count());
    println!("edges\t{}", dag.edge_count());
    println!("root\t{}{}", dag.name(dag.root()), if dag.has_synthetic_root() { " (synthetic)" } else { "" });
    println!("max_depth\t{}", dag.max_depth());
    if !dag.pruned().is_empty() {
        println!("pruned\t{}", dag.pruned().len());
    }
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for c in dag.nodes() {
        *hist.entry(dag.depth(c)).or_default() += 1;
    }
    println!("depth\tcount");
    for (d, n) in hist {
        println!("{d}\t{n}");
    }
    if let Some(s) = &a.split {
        let split = read_split(s, &dag)?;
        println!("seen\t{}", split.seen.len());
        println!("unseen\t{}", split.unseen.len());
    }
    Ok(())
}

fn cmd_train(seed: u64, a: &TrainArgs) -> Result<()> {
    let cfg = run_config(seed, &a.loss, &a.optim, None)?;
    let d = load_data_dir(&a.data, &a.h.options())?;
    let out = run_train(&d.dag, &d.train_set(), &d.split, &cfg)?;
    save_checkpoint(&a.out, &out, &cfg)?;
    println!("initial_loss={}", out.log.initial_loss);
    println!("final_loss={}", out.log.final_loss);
    println!("tau={}", out.tau);
    println!("steps={}", out.log.steps);
    println!("checkpoint={}", a.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let d = load_data_dir(&a.data, &a.h.options())?;
    let ck = load_checkpoint(&a.checkpoint, &d.dag)?;
    let mut cfg = RunConfig::default();
    apply_eval(&mut cfg, &a.eval)?;
    let report = run_eval(&d.dag, &d.test_set(), &d.split, &ck.store, &cfg)?;
    emit(&report.render(), a.eval.report.as_deref())
}

fn cmd_ablate(seed: u64, a: &AblateArgs) -> Result<()> {
    let cfg = run_config(seed, &a.loss, &a.optim, Some(&a.eval))?;
    let axis = AblateAxis::parse(&a.axis)?;
    let d = load_data_dir(&a.data, &a.h.options())?;
    let table = run_ablate(&d, &cfg, axis, &a.values)?;
    emit(&table.render(), a.eval.report.as_deref())
}

fn cmd_fewshot(seed: u64, a: &FewshotArgs) -> Result<()> {
    let cfg = run_config(seed, &a.loss, &a.optim, Some(&a.eval))?;
    let d = load_data_dir(&a.data, &a.h.options())?;
    let table = run_fewshot(&d, &cfg, &a.shots)?;
    emit(&table.render(), a.eval.report.as_deref())
}

fn run(cli: &Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.cmd {
        Command::Synth(a) => cmd_synth(cli.seed, a),
        Command::Validate(a) => cmd_validate(a),
        Command::Train(a) => cmd_train(cli.seed, a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(cli.seed, a),
        Command::Fewshot(a) => cmd_fewshot(cli.seed, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
