//! Seeded synthetic taxonomies with hierarchy-correlated features.
//!
//! Prototypes diffuse down a balanced tree: each child is its parent plus
//! Gaussian noise, renormalized. Noise vectors have per-coordinate standard
//! deviation `sigma / sqrt(dim)`, so `sigma` is the expected noise norm
//! relative to the unit prototype. Only leaves carry images.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::featurestore::{normalize, Dataset, FeatureMatrix};
use crate::formats::KeyValues;
use crate::hierarchy::{ClassSplit, HierarchyDag, LoadOptions, NodeId};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub depth: usize,
    pub branching: usize,
    pub dim: usize,
    /// Noise scale per level, `sigma_class[l - 1]` for nodes at depth `l`.
    pub sigma_class: Vec<f64>,
    pub sigma_image: f64,
    pub images_per_class: usize,
    pub seen_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            branching: 3,
            dim: 32,
            sigma_class: vec![0.8, 0.6, 0.45, 0.35, 0.25],
            sigma_image: 0.3,
            images_per_class: 20,
            seen_fraction: 0.7,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config("synthetic depth must be at least 2".into()));
        }
        if self.branching < 2 {
            return Err(Error::Config("branching must be at least 2".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if self.sigma_class.len() != self.depth {
            return Err(Error::Config(format!(
                "need {} class sigmas, got {}",
                self.depth,
                self.sigma_class.len()
            )));
        }
        if self.sigma_class.iter().any(|&s| !(s >= 0.0)) || !(self.sigma_image >= 0.0) {
            return Err(Error::Config("sigmas must be non-negative".into()));
        }
        if !(self.seen_fraction > 0.0 && self.seen_fraction < 1.0) {
            return Err(Error::InvalidRatio(self.seen_fraction));
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.push("depth", self.depth);
        kv.push("branching", self.branching);
        kv.push("dim", self.dim);
        let sig: Vec<String> = self.sigma_class.iter().map(f64::to_string).collect();
        kv.push("sigma_class", sig.join(","));
        kv.push("sigma_image", self.sigma_image);
        kv.push("images_per_class", self.images_per_class);
        kv.push("seen_fraction", self.seen_fraction);
        kv.push("seed", self.seed);
        kv
    }
}

pub const ROOT_NAME: &str = "root";

/// Balanced tree. Children of `root` are `n0, n1, ..`; children of `n0` are
/// `n0.0, n0.1, ..`. Ids follow first appearance in breadth-first edge order.
pub fn gen_hierarchy(cfg: &SynthConfig) -> Result<HierarchyDag> {
    cfg.validate()?;
    let mut edges = Vec::new();
    let mut frontier = vec![String::new()];
    for _ in 0..cfg.depth {
        let mut next = Vec::with_capacity(frontier.len() * cfg.branching);
        for parent in &frontier {
            for b in 0..cfg.branching {
                let (child, pname) = if parent.is_empty() {
                    (format!("n{b}"), ROOT_NAME.to_string())
                } else {
                    (format!("{parent}.{b}"), parent.clone())
                };
                edges.push((child.clone(), pname));
                next.push(child);
            }
        }
        frontier = next;
    }
    let opts = LoadOptions {
        declared_root: Some(ROOT_NAME.into()),
        ..Default::default()
    };
    HierarchyDag::load(&edges, &opts)
}

fn noisy(rng: &mut impl Rng, base: &[f64], sigma: f64) -> Vec<f64> {
    let scale = sigma / (base.len() as f64).sqrt();
    base.iter()
        .map(|b| b + scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// One unit prototype per node, rows in node-id order.
pub fn gen_prototypes(dag: &HierarchyDag, cfg: &SynthConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let dim = cfg.dim;
    let mut rng = rng::stream(cfg.seed, &[rng::tag::PROTOTYPES]);
    let mut protos = vec![vec![0.0; dim]; dag.node_count()];
    let mut root: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut root).ok_or(Error::ZeroVector(dag.root().index() as u64))?;
    protos[dag.root().index()] = root;
    for l in 1..=dag.max_depth() {
        let sigma = cfg.sigma_class.get(l - 1).copied().unwrap_or(0.0);
        for &c in dag.nodes_at_depth(l)? {
            let p = dag.ancestor_path(c)?[l - 1];
            let mut v = noisy(&mut rng, &protos[p.index()], sigma);
            normalize(&mut v).ok_or(Error::ZeroVector(c.index() as u64))?;
            protos[c.index()] = v;
        }
    }
    let mut m = FeatureMatrix::new(dim);
    for (i, v) in protos.iter().enumerate() {
        m.push(i as u64, v)?;
    }
    Ok(m)
}

/// Stratified seen/unseen assignment of leaves, grouped by parent.
fn split_leaves(dag: &HierarchyDag, cfg: &SynthConfig) -> Result<ClassSplit> {
    let mut strata: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for c in dag.leaves() {
        strata.entry(dag.parents(c)[0]).or_default().push(c);
    }
    let total: usize = strata.values().map(Vec::len).sum();
    let f = cfg.seen_fraction;
    let target = (f * total as f64).round() as usize;

    // Each stratum starts at floor(f·n), kept within [1, n-1] so both sides
    // are represented. Remaining seen slots go by largest remainder (ties in
    // seeded order); only when every stratum is at n-1 may one fill up.
    let mut quota: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut remainders = Vec::new();
    for (&p, leaves) in &strata {
        let n = leaves.len();
        let exact = f * n as f64;
        let base = if n >= 2 { (exact.floor() as usize).clamp(1, n - 1) } else { exact.round() as usize };
        quota.insert(p, base);
        remainders.push((exact - base as f64, p));
    }
    let mut rng = rng::stream(cfg.seed, &[rng::tag::SPLIT]);
    remainders.shuffle(&mut rng);
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut assigned: usize = quota.values().sum();
    for full_ok in [false, true] {
        for &(_, p) in &remainders {
            if assigned >= target {
                break;
            }
            let n = strata[&p].len();
            let cap = if full_ok || n < 2 { n } else { n - 1 };
            let q = quota.get_mut(&p).unwrap();
            if *q < cap {
                *q += 1;
                assigned += 1;
            }
        }
    }

    let mut seen = BTreeSet::new();
    let mut unseen = BTreeSet::new();
    for (p, mut leaves) in strata {
        leaves.shuffle(&mut rng);
        let q = quota[&p];
        seen.extend(leaves[..q].iter().copied());
        unseen.extend(leaves[q..].iter().copied());
    }
    ClassSplit::new(dag, seen, unseen)
}

/// Images for every leaf, with owner ids `0..`, plus the class split.
pub fn gen_dataset(
    dag: &HierarchyDag,
    prototypes: &FeatureMatrix,
    cfg: &SynthConfig,
) -> Result<(Dataset, ClassSplit)> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, &[rng::tag::IMAGES]);
    let mut images = FeatureMatrix::new(prototypes.dim());
    let mut labels = Vec::new();
    let mut owner = 0u64;
    for c in dag.leaves() {
        let proto = prototypes.row(c.index());
        for _ in 0..cfg.images_per_class {
            let mut v = noisy(&mut rng, proto, cfg.sigma_image);
            normalize(&mut v).ok_or(Error::ZeroVector(owner))?;
            images.push(owner, &v)?;
            labels.push(c);
            owner += 1;
        }
    }
    let split = split_leaves(dag, cfg)?;
    Ok((Dataset::new(dag, images, labels)?, split))
}

/// Hierarchy, prototypes, images and split in one call.
pub fn generate(cfg: &SynthConfig) -> Result<(HierarchyDag, FeatureMatrix, Dataset, ClassSplit)> {
    let dag = gen_hierarchy(cfg)?;
    let protos = gen_prototypes(&dag, cfg)?;
    let (data, split) = gen_dataset(&dag, &protos, cfg)?;
    Ok((dag, protos, data, split))
}
