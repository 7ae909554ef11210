//! Zero-shot evaluation: candidate ranking, Hit@k, TOR and POR.
//!
//! Metric paths exclude the root, so a label at depth `q` has a path of
//! exactly `q` nodes. Rankings use raw cosine similarity with ties broken by
//! ascending id; the temperature never changes an argmax and is ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featurestore::{dot, ClassReps, Dataset};
use crate::formats::KeyValues;
use crate::hierarchy::{ClassSplit, HierarchyDag, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CandidateMode {
    /// Unseen classes only.
    #[default]
    Zsl,
    /// Seen and unseen classes.
    Gzsl,
}

impl CandidateMode {
    pub fn name(self) -> &'static str {
        match self {
            CandidateMode::Zsl => "zsl",
            CandidateMode::Gzsl => "gzsl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zsl" => Ok(Self::Zsl),
            "gzsl" => Ok(Self::Gzsl),
            _ => Err(Error::Config(format!("unknown candidate mode '{s}'"))),
        }
    }

    /// Label classes eligible as predictions.
    pub fn classes(self, split: &ClassSplit) -> BTreeSet<NodeId> {
        match self {
            CandidateMode::Zsl => split.unseen.clone(),
            CandidateMode::Gzsl => split.seen.union(&split.unseen).copied().collect(),
        }
    }
}

/// Candidates sorted by descending similarity to `image`, ties by id.
pub fn rank_candidates(
    image: &[f64],
    candidates: &BTreeSet<NodeId>,
    reps: &ClassReps,
) -> Result<Vec<NodeId>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut scored: Vec<(f64, NodeId)> =
        candidates.iter().map(|&c| (dot(image, reps.rep(c)), c)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, c)| c).collect())
}

fn argmax(image: &[f64], candidates: &[NodeId], reps: &ClassReps) -> Option<NodeId> {
    let mut best: Option<(f64, NodeId)> = None;
    for &c in candidates {
        let s = dot(image, reps.rep(c));
        match best {
            Some((b, bc)) if b > s || (b == s && bc < c) => {}
            _ => best = Some((s, c)),
        }
    }
    best.map(|(_, c)| c)
}

/// Fraction of rankings whose label is among the first `k`, per `k`.
pub fn hit_at_k(rankings: &[Vec<NodeId>], labels: &[NodeId], ks: &[usize]) -> BTreeMap<usize, f64> {
    let n = rankings.len().max(1) as f64;
    let positions: Vec<Option<usize>> = rankings
        .iter()
        .zip(labels)
        .map(|(r, l)| r.iter().position(|c| c == l))
        .collect();
    ks.iter()
        .map(|&k| {
            let hits = positions.iter().filter(|p| p.is_some_and(|i| i < k)).count();
            (k, hits as f64 / n)
        })
        .collect()
}

/// Non-root path of `label`, ending with the label itself.
fn metric_path(dag: &HierarchyDag, label: NodeId) -> Result<Vec<NodeId>> {
    if !dag.contains(label) {
        return Err(Error::UnknownNode(label.to_string()));
    }
    if label == dag.root() {
        return Err(Error::RootLabel(label));
    }
    let mut p = dag.true_path(label)?;
    p.remove(0);
    Ok(p)
}

/// Top-overlap ratio of a set of top predictions (usually one).
pub fn tor(dag: &HierarchyDag, preds: &[NodeId], label: NodeId) -> Result<f64> {
    let path = metric_path(dag, label)?;
    for &p in preds {
        if !dag.contains(p) {
            return Err(Error::UnknownNode(p.to_string()));
        }
    }
    let hits = preds.iter().filter(|p| path.contains(p)).collect::<BTreeSet<_>>().len();
    Ok(hits as f64 / path.len() as f64)
}

/// Per-level candidates: label classes of the mode plus concept nodes,
/// grouped by depth.
#[derive(Debug, Clone)]
pub struct LevelCandidates {
    by_depth: Vec<Vec<NodeId>>,
}

impl LevelCandidates {
    pub fn new(dag: &HierarchyDag, split: &ClassSplit, mode: CandidateMode) -> Self {
        let pool: BTreeSet<NodeId> = mode
            .classes(split)
            .into_iter()
            .chain(split.concepts(dag))
            .collect();
        let mut by_depth = vec![Vec::new(); dag.max_depth() + 1];
        for c in pool {
            by_depth[dag.depth(c)].push(c);
        }
        Self { by_depth }
    }

    pub fn at(&self, depth: usize) -> &[NodeId] {
        self.by_depth.get(depth).map_or(&[], |v| v.as_slice())
    }
}

/// Per-level argmax predictions for the label's depths; `None` where a level
/// has no candidates.
pub fn por_predictions(
    dag: &HierarchyDag,
    image: &[f64],
    label: NodeId,
    reps: &ClassReps,
    levels: &LevelCandidates,
) -> Result<Vec<Option<NodeId>>> {
    let q = metric_path(dag, label)?.len();
    Ok((1..=q).map(|l| argmax(image, levels.at(l), reps)).collect())
}

/// Point-overlap ratio for one image.
pub fn por(
    dag: &HierarchyDag,
    image: &[f64],
    label: NodeId,
    reps: &ClassReps,
    levels: &LevelCandidates,
) -> Result<f64> {
    let path = metric_path(dag, label)?;
    let preds = por_predictions(dag, image, label, reps, levels)?;
    let hits = preds.iter().flatten().filter(|p| path.contains(p)).count();
    Ok(hits as f64 / path.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DepthBreakdown {
    pub n_images: usize,
    pub hit1: f64,
    pub tor: f64,
    pub por: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub mode: CandidateMode,
    pub hit_at: BTreeMap<usize, f64>,
    pub tor: f64,
    pub por: f64,
    /// Keyed by label depth.
    pub per_depth: BTreeMap<usize, DepthBreakdown>,
    pub n_images: usize,
    pub n_candidates: usize,
}

impl MetricReport {
    pub fn hit(&self, k: usize) -> f64 {
        self.hit_at.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.push("mode", self.mode.name());
        kv.push("n_images", self.n_images.to_string());
        kv.push("n_candidates", self.n_candidates.to_string());
        for (k, v) in &self.hit_at {
            kv.push(format!("hit@{k}"), v.to_string());
        }
        kv.push("tor", self.tor.to_string());
        kv.push("por", self.por.to_string());
        kv
    }

    /// Key=value header, a blank line, then a per-depth TSV table.
    pub fn render(&self) -> String {
        let mut out = self.to_key_values().render();
        out.push('\n');
        out.push_str("depth\tn_images\thit@1\ttor\tpor\n");
        for (d, b) in &self.per_depth {
            let _ = writeln!(out, "{d}\t{}\t{}\t{}\t{}", b.n_images, b.hit1, b.tor, b.por);
        }
        out
    }
}

struct ImageResult {
    depth: usize,
    rank: Option<usize>,
    tor: f64,
    por: f64,
}

/// Scores every image of `data` against the mode's candidates.
/// `tor_topk` sets how many top predictions enter the TOR overlap.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    dag: &HierarchyDag,
    data: &Dataset,
    split: &ClassSplit,
    reps: &ClassReps,
    mode: CandidateMode,
    ks: &[usize],
    tor_topk: usize,
) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if ks.contains(&0) || tor_topk == 0 {
        return Err(Error::Config("k values must be positive".into()));
    }
    let candidates = mode.classes(split);
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if let Some(&l) = data.labels.iter().find(|l| !candidates.contains(l)) {
        return Err(Error::Config(format!(
            "test label '{}' is not a {} candidate",
            dag.name(l),
            mode.name()
        )));
    }
    let levels = LevelCandidates::new(dag, split, mode);
    let results: Vec<ImageResult> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let image = data.image(i);
            let label = data.labels[i];
            let ranking = rank_candidates(image, &candidates, reps)?;
            let top = &ranking[..tor_topk.min(ranking.len())];
            Ok(ImageResult {
                depth: dag.depth(label),
                rank: ranking.iter().position(|&c| c == label),
                tor: tor(dag, top, label)?,
                por: por(dag, image, label, reps, &levels)?,
            })
        })
        .collect::<Result<_>>()?;

    let n = results.len() as f64;
    let hit_at = ks
        .iter()
        .map(|&k| {
            let h = results.iter().filter(|r| r.rank.is_some_and(|p| p < k)).count();
            (k, h as f64 / n)
        })
        .collect();
    let mut per_depth: BTreeMap<usize, DepthBreakdown> = BTreeMap::new();
    for r in &results {
        let b = per_depth.entry(r.depth).or_default();
        b.n_images += 1;
        b.hit1 += f64::from(r.rank == Some(0));
        b.tor += r.tor;
        b.por += r.por;
    }
    for b in per_depth.values_mut() {
        let m = b.n_images as f64;
        b.hit1 /= m;
        b.tor /= m;
        b.por /= m;
    }
    Ok(MetricReport {
        mode,
        hit_at,
        tor: results.iter().map(|r| r.tor).sum::<f64>() / n,
        por: results.iter().map(|r| r.por).sum::<f64>() / n,
        per_depth,
        n_images: results.len(),
        n_candidates: candidates.len(),
    })
}
