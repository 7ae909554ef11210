//! Two-level hierarchical contrastive loss.
//!
//! For an image labelled `c` at depth `d`, with root-first true path
//! `P = [root, p_1, .., p_{d-1}, c]` (entry `i` sits at depth `i`):
//!
//! ```text
//! L_cont  = Σ_{j = k_s..=k_e} w_j · L_j
//! L_j     = mean_{l = m_s..=m_e} L_{j,l}          (m range from depth j)
//! L_{j,l} = -log( e^{s(P_j)/τ} / (e^{s(P_j)/τ} + Σ_q e^{s(n_q)/τ}) )
//! ```
//!
//! where `s(x) = ⟨T(x), v⟩` and the negatives `n_q` are sampled against the
//! inner anchor `P_l` with the whole true path forbidden. The positive `P_j`
//! stays fixed across the inner loop.
//!
//! Gradients are derived by hand: per pair, `∂L/∂s_i = (p_i − [i = pos]) / τ`
//! with `p = softmax(s / τ)`, then chained into the image vector, the class
//! representations (and through [`ClassReps::backward`] into table rows), the
//! temperature and the level weights.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featurestore::{dot, ClassReps, Dataset, FeatureStore};
use crate::hierarchy::{HierarchyDag, NodeId};
use crate::levelweights::{softmax_backward, WeightVector, WeightingStrategy};
use crate::negsampling::{sample_negatives, SamplerContext, SamplingStrategy};
use crate::rng;

/// How fractional ratios map to loop start levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RangeConvention {
    /// `start = clamp(⌈ratio·d⌉, 1, d)`: ratio 1 keeps only the deepest level.
    #[default]
    Algorithmic,
    /// `start = clamp(d − ⌊ratio·d⌋, 1, d)`: ratio 0 keeps only the deepest level.
    Ablation,
}

impl RangeConvention {
    pub fn name(self) -> &'static str {
        match self {
            RangeConvention::Algorithmic => "algorithmic",
            RangeConvention::Ablation => "ablation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "algorithmic" => Ok(Self::Algorithmic),
            "ablation" => Ok(Self::Ablation),
            _ => Err(Error::Config(format!("unknown range convention '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossVariant {
    #[default]
    Full,
    /// Outer loop only; each level contrasts against its own level's negatives.
    OuterOnly,
    /// Inner loop only, with the label itself as the single positive.
    InnerOnly,
    /// Single contrast of the label against its siblings.
    Flat,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::Full,
        LossVariant::OuterOnly,
        LossVariant::InnerOnly,
        LossVariant::Flat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Full => "full",
            LossVariant::OuterOnly => "outer-only",
            LossVariant::InnerOnly => "inner-only",
            LossVariant::Flat => "flat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss variant '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub outer_ratio: f64,
    pub inner_ratio: f64,
    pub epsilon: usize,
    /// Current temperature.
    pub tau: f64,
    pub sampling: SamplingStrategy,
    pub weighting: WeightingStrategy,
    pub range_convention: RangeConvention,
    pub variant: LossVariant,
    /// Divide by the sum of weights over the sample's active outer levels.
    pub renormalize_active: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            outer_ratio: 0.25,
            inner_ratio: 0.5,
            epsilon: 256,
            tau: 0.07,
            sampling: SamplingStrategy::default(),
            weighting: WeightingStrategy::default(),
            range_convention: RangeConvention::default(),
            variant: LossVariant::default(),
            renormalize_active: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for r in [self.outer_ratio, self.inner_ratio] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidRatio(r));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::NonPositiveTemperature(self.tau));
        }
        if self.epsilon == 0 {
            return Err(Error::Config("epsilon must be at least 1".into()));
        }
        Ok(())
    }
}

// Products like 0.7 * 10 land a few ulps off the integer.
const RATIO_SLACK: f64 = 1e-9;

fn loop_range(ratio: f64, d: usize, conv: RangeConvention) -> Result<(usize, usize)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidRatio(ratio));
    }
    if d == 0 {
        return Err(Error::Config("loop range needs depth >= 1".into()));
    }
    let x = ratio * d as f64;
    let start = match conv {
        RangeConvention::Algorithmic => (x - RATIO_SLACK).ceil().max(0.0) as usize,
        RangeConvention::Ablation => d - ((x + RATIO_SLACK).floor() as usize).min(d),
    };
    Ok((start.clamp(1, d), d))
}

/// Outer loop bounds `(k_s, k_e)` for a label at depth `d`.
pub fn outer_range(ratio: f64, d: usize, conv: RangeConvention) -> Result<(usize, usize)> {
    loop_range(ratio, d, conv)
}

/// Inner loop bounds `(m_s, m_e)` for a positive at depth `d_pos`.
pub fn inner_range(ratio: f64, d_pos: usize, conv: RangeConvention) -> Result<(usize, usize)> {
    loop_range(ratio, d_pos, conv)
}

/// Stable `-log softmax` of index 0 over `logits`, with the softmax itself.
fn nll_first(logits: &[f64]) -> (f64, Vec<f64>) {
    let (imax, m) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, z)| if z > acc.1 { (i, z) } else { acc });
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let rest: f64 = e
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != imax)
        .map(|(_, x)| x)
        .sum();
    let z = 1.0 + rest;
    let loss = (m - logits[0]) + rest.ln_1p();
    (loss, e.into_iter().map(|x| x / z).collect())
}

/// Temperature-scaled contrastive loss of one positive against negatives.
pub fn pair_loss(pos_sim: f64, neg_sims: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    let logits: Vec<f64> = std::iter::once(pos_sim)
        .chain(neg_sims.iter().copied())
        .map(|s| s / tau)
        .collect();
    Ok(nll_first(&logits).0)
}

/// Identifies the random streams of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngContext {
    pub seed: u64,
    pub epoch: u64,
    /// Image id.
    pub item: u64,
}

impl RngContext {
    pub fn level_seed(&self, j: usize, l: usize) -> u64 {
        rng::derive_seed(
            self.seed,
            &[rng::tag::NEGATIVES, self.epoch, self.item, j as u64, l as u64],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    /// `(j, l) → L_{j,l}`
    pub terms: BTreeMap<(usize, usize), f64>,
    /// `j → L_j`
    pub per_level: BTreeMap<usize, f64>,
    pub total: f64,
    /// Effective weight applied to each `L_j`.
    pub weights_used: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet {
    /// Gradient w.r.t. the image vector; empty for batch results.
    pub d_image: Vec<f64>,
    /// Gradient w.r.t. class table rows.
    pub d_class: BTreeMap<NodeId, Vec<f64>>,
    pub d_tau: f64,
    /// Gradient w.r.t. the adaptive logits; zero unless weighting is adaptive.
    pub d_adaptive: Vec<f64>,
}

impl GradientSet {
    pub fn global_norm(&self) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        (sq(&self.d_image)
            + self.d_class.values().map(|v| sq(v)).sum::<f64>()
            + self.d_tau * self.d_tau
            + sq(&self.d_adaptive))
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.d_image.iter_mut().for_each(|x| *x *= s);
        for v in self.d_class.values_mut() {
            v.iter_mut().for_each(|x| *x *= s);
        }
        self.d_tau *= s;
        self.d_adaptive.iter_mut().for_each(|x| *x *= s);
    }
}

struct InnerStep {
    l: usize,
    negatives: Vec<NodeId>,
}

struct OuterStep {
    j: usize,
    positive: NodeId,
    inner: Vec<InnerStep>,
}

/// Resolves loop ranges and draws every negative set for one sample.
fn plan(
    dag: &HierarchyDag,
    cfg: &LossConfig,
    label: NodeId,
    reps: &ClassReps,
    ctx: &RngContext,
) -> Result<Vec<OuterStep>> {
    if !dag.contains(label) {
        return Err(Error::UnknownNode(label.to_string()));
    }
    if label == dag.root() {
        return Err(Error::RootLabel(label));
    }
    let path = dag.true_path(label)?;
    let d = path.len() - 1;
    let forbidden: BTreeSet<NodeId> = path.iter().copied().collect();
    let conv = cfg.range_convention;
    let (ks, ke) = match cfg.variant {
        LossVariant::Full | LossVariant::OuterOnly => outer_range(cfg.outer_ratio, d, conv)?,
        LossVariant::InnerOnly | LossVariant::Flat => (d, d),
    };
    let strategy = match cfg.variant {
        LossVariant::Flat => SamplingStrategy::Sibling,
        _ => cfg.sampling,
    };
    let mut steps = Vec::with_capacity(ke - ks + 1);
    for j in ks..=ke {
        let (ms, me) = match cfg.variant {
            LossVariant::Full | LossVariant::InnerOnly => inner_range(cfg.inner_ratio, j, conv)?,
            LossVariant::OuterOnly | LossVariant::Flat => (j, j),
        };
        let mut inner = Vec::with_capacity(me - ms + 1);
        for l in ms..=me {
            let sctx = SamplerContext {
                epsilon: cfg.epsilon,
                seed: ctx.level_seed(j, l),
                forbidden: &forbidden,
            };
            let negatives = sample_negatives(dag, strategy, path[l], &sctx, Some(reps))?;
            inner.push(InnerStep { l, negatives });
        }
        steps.push(OuterStep {
            j,
            positive: path[j],
            inner,
        });
    }
    Ok(steps)
}

/// Gradients before pulling back through the class encoder and the weight
/// parameterization.
#[derive(Default)]
struct RawGrads {
    d_image: Vec<f64>,
    d_reps: BTreeMap<NodeId, Vec<f64>>,
    d_tau: f64,
    d_weights: Vec<f64>,
}

fn forward(
    cfg: &LossConfig,
    image: &[f64],
    steps: &[OuterStep],
    reps: &ClassReps,
    weights: &WeightVector,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<RawGrads>)> {
    let tau = cfg.tau;
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    if image.len() != reps.dim() {
        return Err(Error::DimMismatch {
            expected: reps.dim(),
            got: image.len(),
        });
    }
    if let Some(last) = steps.last() {
        if last.j > weights.max_depth() {
            return Err(Error::Config(format!(
                "weight vector covers depths 1..={}, label needs {}",
                weights.max_depth(),
                last.j
            )));
        }
    }

    let mut out = LossBreakdown::default();
    // per (j, l): classes in logit order and their softmax
    let mut cache: Vec<(usize, Vec<(NodeId, f64)>, Vec<f64>)> = Vec::new();
    for step in steps {
        let pos_sim = dot(reps.rep(step.positive), image);
        let mut lj = 0.0;
        for inner in &step.inner {
            let mut sims = Vec::with_capacity(inner.negatives.len() + 1);
            sims.push((step.positive, pos_sim));
            sims.extend(inner.negatives.iter().map(|&c| (c, dot(reps.rep(c), image))));
            let logits: Vec<f64> = sims.iter().map(|(_, s)| s / tau).collect();
            let (loss, probs) = nll_first(&logits);
            out.terms.insert((step.j, inner.l), loss);
            lj += loss;
            if want_grad {
                cache.push((step.j, sims, probs));
            }
        }
        lj /= step.inner.len() as f64;
        out.per_level.insert(step.j, lj);
    }

    let norm = if cfg.renormalize_active {
        out.per_level.keys().map(|&j| weights.get(j)).sum::<f64>()
    } else {
        1.0
    };
    for (&j, &lj) in &out.per_level {
        let w = weights.get(j) / norm;
        out.weights_used.insert(j, w);
        out.total += w * lj;
    }
    if !want_grad {
        return Ok((out, None));
    }

    let dim = image.len();
    let mut g = RawGrads {
        d_image: vec![0.0; dim],
        d_weights: vec![0.0; weights.max_depth()],
        ..Default::default()
    };
    let inner_count: BTreeMap<usize, usize> =
        steps.iter().map(|s| (s.j, s.inner.len())).collect();
    for (j, sims, probs) in &cache {
        let coef = out.weights_used[j] / inner_count[j] as f64;
        for (i, ((c, s), p)) in sims.iter().zip(probs).enumerate() {
            let target = if i == 0 { 1.0 } else { 0.0 };
            let ds = coef * (p - target) / tau;
            if ds == 0.0 && i != 0 {
                g.d_reps.entry(*c).or_insert_with(|| vec![0.0; dim]);
                continue;
            }
            g.d_tau -= ds * s / tau;
            let t = reps.rep(*c);
            g.d_image.iter_mut().zip(t).for_each(|(x, ti)| *x += ds * ti);
            let e = g.d_reps.entry(*c).or_insert_with(|| vec![0.0; dim]);
            e.iter_mut().zip(image).for_each(|(x, vi)| *x += ds * vi);
        }
    }
    for (&j, &lj) in &out.per_level {
        g.d_weights[j - 1] = (lj - if cfg.renormalize_active { out.total } else { 0.0 }) / norm;
    }
    Ok((out, Some(g)))
}

fn finish_grads(
    dag: &HierarchyDag,
    cfg: &LossConfig,
    reps: &ClassReps,
    weights: &WeightVector,
    raw: RawGrads,
) -> GradientSet {
    let d_adaptive = match cfg.weighting {
        WeightingStrategy::AdaptiveLearned => softmax_backward(weights.as_slice(), &raw.d_weights),
        _ => vec![0.0; weights.max_depth()],
    };
    GradientSet {
        d_image: raw.d_image,
        d_class: reps.backward(dag, &raw.d_reps),
        d_tau: raw.d_tau,
        d_adaptive,
    }
}

/// Loss of one sample given precomputed class representations.
pub fn sample_loss_with_reps(
    dag: &HierarchyDag,
    cfg: &LossConfig,
    image: &[f64],
    label: NodeId,
    reps: &ClassReps,
    weights: &WeightVector,
    ctx: &RngContext,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let steps = plan(dag, cfg, label, reps, ctx)?;
    Ok(forward(cfg, image, &steps, reps, weights, false)?.0)
}

pub fn sample_loss(
    dag: &HierarchyDag,
    cfg: &LossConfig,
    image: &[f64],
    label: NodeId,
    store: &FeatureStore,
    weights: &WeightVector,
    ctx: &RngContext,
) -> Result<LossBreakdown> {
    let reps = store.encode(dag)?;
    sample_loss_with_reps(dag, cfg, image, label, &reps, weights, ctx)
}

/// Loss and gradients of one sample. Negative draws are identical to
/// [`sample_loss`] under the same context.
pub fn sample_grad(
    dag: &HierarchyDag,
    cfg: &LossConfig,
    image: &[f64],
    label: NodeId,
    store: &FeatureStore,
    weights: &WeightVector,
    ctx: &RngContext,
) -> Result<(LossBreakdown, GradientSet)> {
    cfg.validate()?;
    let reps = store.encode(dag)?;
    let steps = plan(dag, cfg, label, &reps, ctx)?;
    let (loss, raw) = forward(cfg, image, &steps, &reps, weights, true)?;
    Ok((loss, finish_grads(dag, cfg, &reps, weights, raw.unwrap())))
}

/// Mean loss and gradients over `rows` of `data`.
///
/// Samples are evaluated in parallel; the reduction runs in row order, so
/// the result does not depend on the worker count. Terms and per-level
/// losses are averaged with absent entries counted as zero.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    dag: &HierarchyDag,
    cfg: &LossConfig,
    data: &Dataset,
    rows: &[usize],
    store: &FeatureStore,
    weights: &WeightVector,
    seed: u64,
    epoch: u64,
) -> Result<(LossBreakdown, GradientSet)> {
    if rows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    cfg.validate()?;
    let reps = store.encode(dag)?;
    let results: Vec<(LossBreakdown, RawGrads)> = rows
        .par_iter()
        .map(|&r| {
            let ctx = RngContext {
                seed,
                epoch,
                item: data.images.owner(r),
            };
            let steps = plan(dag, cfg, data.labels[r], &reps, &ctx)?;
            let (loss, g) = forward(cfg, data.image(r), &steps, &reps, weights, true)?;
            Ok((loss, g.unwrap()))
        })
        .collect::<Result<_>>()?;

    let n = rows.len() as f64;
    let dim = store.dim();
    let mut mean = LossBreakdown::default();
    let mut acc = RawGrads {
        d_weights: vec![0.0; weights.max_depth()],
        ..Default::default()
    };
    for (loss, g) in results {
        mean.total += loss.total;
        for (k, v) in loss.terms {
            *mean.terms.entry(k).or_default() += v;
        }
        for (k, v) in loss.per_level {
            *mean.per_level.entry(k).or_default() += v;
        }
        for (c, v) in g.d_reps {
            let e = acc.d_reps.entry(c).or_insert_with(|| vec![0.0; dim]);
            e.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
        }
        acc.d_tau += g.d_tau;
        acc.d_weights.iter_mut().zip(&g.d_weights).for_each(|(a, b)| *a += b);
    }
    mean.total /= n;
    mean.terms.values_mut().for_each(|v| *v /= n);
    mean.per_level.values_mut().for_each(|v| *v /= n);
    mean.weights_used = (1..=weights.max_depth()).map(|j| (j, weights.get(j))).collect();
    acc.d_reps
        .values_mut()
        .for_each(|v| v.iter_mut().for_each(|x| *x /= n));
    acc.d_tau /= n;
    acc.d_weights.iter_mut().for_each(|x| *x /= n);

    let mut grads = finish_grads(dag, cfg, &reps, weights, acc);
    grads.d_image.clear();
    Ok((mean, grads))
}

/// Mean forward loss over every row of `data`, without gradients.
pub fn mean_loss(
    dag: &HierarchyDag,
    cfg: &LossConfig,
    data: &Dataset,
    store: &FeatureStore,
    weights: &WeightVector,
    seed: u64,
    epoch: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let reps = store.encode(dag)?;
    let totals: Vec<f64> = (0..data.len())
        .into_par_iter()
        .map(|r| {
            let ctx = RngContext {
                seed,
                epoch,
                item: data.images.owner(r),
            };
            sample_loss_with_reps(dag, cfg, data.image(r), data.labels[r], &reps, weights, &ctx)
                .map(|b| b.total)
        })
        .collect::<Result<_>>()?;
    Ok(totals.iter().sum::<f64>() / data.len() as f64)
}
