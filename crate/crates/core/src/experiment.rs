//! End-to-end runs shared by the CLI and the acceptance suite: data
//! directories, checkpoints, train+eval, ablation sweeps and k-shot runs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::featurestore::{normalize, read_features, write_features, ClassEncoder, Dataset, FeatureMatrix, FeatureStore};
use crate::formats::{read_edge_list, read_labels, read_split, write_edge_list, write_labels, write_split, KeyValues};
use crate::hgrloss::{LossConfig, LossVariant};
use crate::hierarchy::{ClassSplit, HierarchyDag, LoadOptions};
use crate::levelweights::{AdaptiveParams, WeightingStrategy};
use crate::negsampling::SamplingStrategy;
use crate::rng;
use crate::trainer::{fewshot_extend, train, TrainConfig, TrainOutput};
use crate::zsmetrics::{evaluate, CandidateMode, MetricReport};

pub const HIERARCHY_FILE: &str = "hierarchy.tsv";
pub const SPLIT_FILE: &str = "split.tsv";
pub const IMAGES_FILE: &str = "images.hgrf";
pub const LABELS_FILE: &str = "labels.tsv";
pub const META_FILE: &str = "meta";
pub const CLASSES_FILE: &str = "classes.hgrf";

/// A taxonomy with labelled image features and a seen/unseen split.
#[derive(Debug, Clone)]
pub struct DataDir {
    pub dag: HierarchyDag,
    /// Images of every class, seen and unseen.
    pub data: Dataset,
    pub split: ClassSplit,
}

impl DataDir {
    pub fn train_set(&self) -> Dataset {
        self.data.filter(|c| self.split.seen.contains(&c))
    }

    pub fn test_set(&self) -> Dataset {
        self.data.filter(|c| self.split.unseen.contains(&c))
    }
}

pub fn write_data_dir(dir: &Path, d: &DataDir, meta: &KeyValues) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_edge_list(&d.dag, &dir.join(HIERARCHY_FILE))?;
    write_split(&d.split, &d.dag, &dir.join(SPLIT_FILE))?;
    write_features(&d.data.images, &dir.join(IMAGES_FILE))?;
    let pairs: Vec<_> = d.data.images.owners().iter().copied().zip(d.data.labels.iter().copied()).collect();
    write_labels(pairs, &d.dag, &dir.join(LABELS_FILE))?;
    meta.write(&dir.join(META_FILE))
}

/// Reads a data directory. Image features are normalized on load.
pub fn load_data_dir(dir: &Path, opts: &LoadOptions) -> Result<DataDir> {
    let edges = read_edge_list(&dir.join(HIERARCHY_FILE))?;
    let dag = HierarchyDag::load(&edges, opts)?;
    let split = read_split(&dir.join(SPLIT_FILE), &dag)?;
    let images = read_features(&dir.join(IMAGES_FILE))?.l2_normalize()?;
    let labels = read_labels(&dir.join(LABELS_FILE), &dag)?;
    let data = Dataset::from_label_map(&dag, images, &labels)?;
    Ok(DataDir { dag, data, split })
}

/// Random unit rows, one per node, from the class-init stream.
pub fn init_class_table(dag: &HierarchyDag, dim: usize, seed: u64, encoder: ClassEncoder) -> Result<FeatureStore> {
    let mut r = rng::stream(seed, &[rng::tag::CLASS_INIT]);
    let scale = 1.0 / (dim as f64).sqrt();
    let mut m = FeatureMatrix::new(dim);
    for c in dag.nodes() {
        let mut v: Vec<f64> = (0..dim).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect();
        normalize(&mut v).ok_or(Error::ZeroVector(c.index() as u64))?;
        m.push(c.index() as u64, &v)?;
    }
    FeatureStore::new(dag, m, encoder)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub encoder: ClassEncoder,
    pub mode: CandidateMode,
    pub ks: Vec<usize>,
    pub tor_topk: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            encoder: ClassEncoder::default(),
            mode: CandidateMode::Zsl,
            ks: vec![1, 2, 5, 10, 20],
            tor_topk: 1,
        }
    }
}

impl RunConfig {
    pub fn to_key_values(&self) -> KeyValues {
        let l = &self.loss;
        let t = &self.train;
        let mut kv = KeyValues::default();
        kv.push("k", l.outer_ratio);
        kv.push("m", l.inner_ratio);
        kv.push("epsilon", l.epsilon);
        kv.push("tau_init", l.tau);
        kv.push("sampling", l.sampling.name());
        if let SamplingStrategy::TopM { m } = l.sampling {
            kv.push("topm_m", m);
        }
        kv.push("weighting", l.weighting.name());
        kv.push("range_convention", l.range_convention.name());
        kv.push("variant", l.variant.name());
        kv.push("encoder", self.encoder.name());
        kv.push("epochs", t.epochs);
        kv.push("batch_size", t.batch_size);
        kv.push("lr", t.lr_main);
        kv.push("lr_adaptive", t.lr_adaptive);
        kv.push("weight_decay", t.weight_decay);
        kv.push("clip_norm", t.clip_norm);
        kv.push("schedule", t.schedule.name());
        kv.push("seed", t.seed);
        kv
    }
}

/// Trains on the seen images of `train_data`, starting from a fresh table.
pub fn run_train(dag: &HierarchyDag, train_data: &Dataset, split: &ClassSplit, cfg: &RunConfig) -> Result<TrainOutput> {
    let store = init_class_table(dag, train_data.dim(), cfg.train.seed, cfg.encoder)?;
    train(dag, train_data, split, &cfg.loss, &cfg.train, store)
}

pub fn run_eval(dag: &HierarchyDag, test: &Dataset, split: &ClassSplit, store: &FeatureStore, cfg: &RunConfig) -> Result<MetricReport> {
    let reps = store.encode(dag)?;
    evaluate(dag, test, split, &reps, cfg.mode, &cfg.ks, cfg.tor_topk)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub trained: TrainOutput,
    pub report: MetricReport,
}

/// Train on seen images, evaluate on unseen images.
pub fn run_train_eval(d: &DataDir, cfg: &RunConfig) -> Result<RunResult> {
    let trained = run_train(&d.dag, &d.train_set(), &d.split, cfg)?;
    let report = run_eval(&d.dag, &d.test_set(), &d.split, &trained.store, cfg)?;
    Ok(RunResult { trained, report })
}

pub fn save_checkpoint(dir: &Path, out: &TrainOutput, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_features(&out.store.classes, &dir.join(CLASSES_FILE))?;
    let mut kv = cfg.to_key_values();
    kv.push("tau", out.tau);
    kv.push("adaptive_raw", join(&out.adaptive.raw));
    if let Some(last) = out.log.epochs.last() {
        kv.push("weights", join(&last.weights));
    }
    kv.push("initial_loss", out.log.initial_loss);
    kv.push("final_loss", out.log.final_loss);
    kv.write(&dir.join(META_FILE))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub store: FeatureStore,
    pub tau: f64,
    pub adaptive: AdaptiveParams,
}

pub fn load_checkpoint(dir: &Path, dag: &HierarchyDag) -> Result<Checkpoint> {
    let meta_path = dir.join(META_FILE);
    let kv = KeyValues::read(&meta_path)?;
    let field = |k: &str| {
        kv.get(k).ok_or_else(|| Error::Parse {
            path: meta_path.clone(),
            line: 0,
            msg: format!("missing key '{k}'"),
        })
    };
    let bad = |k: &str| Error::Parse {
        path: meta_path.clone(),
        line: 0,
        msg: format!("bad value for '{k}'"),
    };
    let encoder = ClassEncoder::parse(field("encoder")?)?;
    let tau: f64 = field("tau")?.parse().map_err(|_| bad("tau"))?;
    let raw = field("adaptive_raw")?;
    let raw: Vec<f64> = if raw.is_empty() {
        Vec::new()
    } else {
        raw.split(',').map(|x| x.parse().map_err(|_| bad("adaptive_raw"))).collect::<Result<_>>()?
    };
    // rows are stored as f32; renormalize to undo rounding
    let classes = read_features(&dir.join(CLASSES_FILE))?.l2_normalize()?;
    Ok(Checkpoint {
        store: FeatureStore::new(dag, classes, encoder)?,
        tau,
        adaptive: AdaptiveParams { raw },
    })
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

/// One labelled row of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub report: MetricReport,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub axis: String,
    pub header: KeyValues,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Key=value header, a blank line, then one TSV row per value.
    pub fn render(&self) -> String {
        let mut out = self.header.render();
        out.push('\n');
        let ks: Vec<usize> = self.rows.first().map(|r| r.report.hit_at.keys().copied().collect()).unwrap_or_default();
        let _ = write!(out, "{}", self.axis);
        for k in &ks {
            let _ = write!(out, "\thit@{k}");
        }
        out.push_str("\ttor\tpor\tn_images\tfinal_loss\n");
        for r in &self.rows {
            out.push_str(&r.value);
            for k in &ks {
                let _ = write!(out, "\t{}", r.report.hit(*k));
            }
            let _ = writeln!(out, "\t{}\t{}\t{}\t{}", r.report.tor, r.report.por, r.report.n_images, r.final_loss);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateAxis {
    K,
    M,
    Sampling,
    Weighting,
    Variant,
}

impl AblateAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblateAxis::K => "k",
            AblateAxis::M => "m",
            AblateAxis::Sampling => "sampling",
            AblateAxis::Weighting => "weighting",
            AblateAxis::Variant => "variant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "k" => Ok(Self::K),
            "m" => Ok(Self::M),
            "sampling" => Ok(Self::Sampling),
            "weighting" => Ok(Self::Weighting),
            "variant" => Ok(Self::Variant),
            _ => Err(Error::Config(format!("unknown ablation axis '{s}'"))),
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let ratio = |v: &str| -> Result<f64> {
            let r: f64 = v.parse().map_err(|_| Error::Config(format!("'{v}' is not a number")))?;
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidRatio(r));
            }
            Ok(r)
        };
        match self {
            AblateAxis::K => cfg.loss.outer_ratio = ratio(value)?,
            AblateAxis::M => cfg.loss.inner_ratio = ratio(value)?,
            AblateAxis::Sampling => {
                let m = match base.loss.sampling {
                    SamplingStrategy::TopM { m } => m,
                    _ => 1,
                };
                cfg.loss.sampling = SamplingStrategy::parse(value, m)?;
            }
            AblateAxis::Weighting => cfg.loss.weighting = WeightingStrategy::parse(value)?,
            AblateAxis::Variant => cfg.loss.variant = LossVariant::parse(value)?,
        }
        Ok(cfg)
    }
}

/// One train+eval per value on the same data and seed.
pub fn run_ablate(d: &DataDir, base: &RunConfig, axis: AblateAxis, values: &[String]) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config(format!("no values given for axis '{}'", axis.name())));
    }
    let cfgs: Vec<RunConfig> = values.iter().map(|v| axis.apply(base, v)).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (v, cfg) in values.iter().zip(&cfgs) {
        let r = run_train_eval(d, cfg)?;
        rows.push(SweepRow {
            value: v.clone(),
            final_loss: r.trained.log.final_loss,
            report: r.report,
        });
    }
    let mut header = base.to_key_values();
    header.push("axis", axis.name());
    Ok(SweepTable {
        axis: axis.name().into(),
        header,
        rows,
    })
}

/// Sorted, deduplicated shot counts; warns when duplicates were dropped.
pub fn dedup_shots(shots: &[usize]) -> Vec<usize> {
    let set: BTreeSet<usize> = shots.iter().copied().collect();
    if set.len() != shots.len() {
        warn!("duplicate shot values ignored");
    }
    set.into_iter().collect()
}

/// For each k: move k images per unseen class into training, retrain from
/// scratch, evaluate on the remaining unseen images.
pub fn run_fewshot(d: &DataDir, base: &RunConfig, shots: &[usize]) -> Result<SweepTable> {
    let shots = dedup_shots(shots);
    if shots.is_empty() {
        return Err(Error::Config("no shot values given".into()));
    }
    let mut rows = Vec::with_capacity(shots.len());
    for k in shots {
        let fs = fewshot_extend(&d.dag, &d.data, &d.split, k, base.train.seed)?;
        let trained = run_train(&d.dag, &fs.train, &fs.train_split, base)?;
        let report = run_eval(&d.dag, &fs.test, &d.split, &trained.store, base)?;
        rows.push(SweepRow {
            value: k.to_string(),
            final_loss: trained.log.final_loss,
            report,
        });
    }
    let mut header = base.to_key_values();
    header.push("axis", "shots");
    Ok(SweepTable {
        axis: "shots".into(),
        header,
        rows,
    })
}
