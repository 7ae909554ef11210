//! Negative class sampling for one inner level.
//!
//! A strategy defines a candidate pool relative to an anchor node; the pool
//! is filtered by a forbidden set (the whole true-label path), then up to
//! `epsilon` classes are taken. `Similarity` takes the most similar
//! candidates deterministically; the other strategies draw uniformly without
//! replacement with a partial Fisher–Yates shuffle over the pool in
//! ascending id order, driven by the caller's seeded stream.

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::featurestore::{dot, ClassReps};
use crate::hierarchy::{HierarchyDag, NodeId};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingStrategy {
    /// Any non-root class.
    Random,
    /// Classes sharing a parent with the anchor.
    Sibling,
    /// Non-root classes ranked by representation similarity to the anchor.
    Similarity,
    /// Classes whose depth lies in `[depth(anchor) - m, depth(anchor)]`.
    TopM { m: usize },
}

impl Default for SamplingStrategy {
    fn default() -> Self {
        SamplingStrategy::TopM { m: 1 }
    }
}

impl SamplingStrategy {
    pub fn name(self) -> &'static str {
        match self {
            SamplingStrategy::Random => "random",
            SamplingStrategy::Sibling => "sibling",
            SamplingStrategy::Similarity => "similarity",
            SamplingStrategy::TopM { .. } => "topm",
        }
    }

    pub fn parse(s: &str, m: usize) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "sibling" => Ok(Self::Sibling),
            "similarity" => Ok(Self::Similarity),
            "topm" => Ok(Self::TopM { m }),
            _ => Err(Error::Config(format!("unknown sampling strategy '{s}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SamplerContext<'a> {
    /// Per-level cap on the number of negatives.
    pub epsilon: usize,
    /// Seed of this call's private stream.
    pub seed: u64,
    pub forbidden: &'a BTreeSet<NodeId>,
}

/// Candidate pool before forbidden-set filtering, ascending by id.
pub fn candidate_pool(
    dag: &HierarchyDag,
    strategy: SamplingStrategy,
    anchor: NodeId,
) -> Result<Vec<NodeId>> {
    let root = dag.root();
    Ok(match strategy {
        SamplingStrategy::Sibling => dag.siblings(anchor)?.to_vec(),
        SamplingStrategy::TopM { m } => {
            let d = dag.depth(anchor);
            let lo = d.saturating_sub(m).max(1);
            let mut pool: Vec<NodeId> = (lo..=d)
                .flat_map(|l| dag.nodes_at_depth(l).unwrap().iter().copied())
                .filter(|&c| c != anchor)
                .collect();
            pool.sort_unstable();
            pool
        }
        SamplingStrategy::Random | SamplingStrategy::Similarity => {
            dag.nodes().filter(|&c| c != root && c != anchor).collect()
        }
    })
}

pub fn sample_negatives(
    dag: &HierarchyDag,
    strategy: SamplingStrategy,
    anchor: NodeId,
    ctx: &SamplerContext<'_>,
    reps: Option<&ClassReps>,
) -> Result<Vec<NodeId>> {
    if !dag.contains(anchor) {
        return Err(Error::UnknownNode(anchor.to_string()));
    }
    if anchor == dag.root() {
        return Err(Error::RootLabel(anchor));
    }
    let mut pool: Vec<NodeId> = candidate_pool(dag, strategy, anchor)?
        .into_iter()
        .filter(|c| !ctx.forbidden.contains(c))
        .collect();
    let n = ctx.epsilon.min(pool.len());

    if let SamplingStrategy::Similarity = strategy {
        let reps = reps.ok_or(Error::MissingEmbeddings)?;
        let a = reps.rep(anchor);
        let mut scored: Vec<(f64, NodeId)> =
            pool.into_iter().map(|c| (dot(reps.rep(c), a), c)).collect();
        scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        return Ok(scored.into_iter().take(n).map(|(_, c)| c).collect());
    }

    let mut rng = rng::stream(ctx.seed, &[]);
    for i in 0..n {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(n);
    Ok(pool)
}
