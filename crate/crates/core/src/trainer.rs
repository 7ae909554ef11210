//! Optimization of the class table, temperature and adaptive level weights.
//!
//! Class rows and the temperature share an AdamW optimizer (the temperature
//! is stepped in log space and carries no weight decay); the adaptive logits
//! use plain SGD. After every step the class rows are projected back onto the
//! unit sphere and the temperature is clamped to `[TAU_MIN, TAU_MAX]`.

use std::f64::consts::PI;

use log::info;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::featurestore::{normalize, Dataset, FeatureStore};
use crate::hgrloss::{batch_loss, mean_loss, GradientSet, LossConfig};
use crate::hierarchy::{ClassSplit, HierarchyDag};
use crate::levelweights::{compute_weights, AdaptiveParams, WeightVector};
use crate::rng;

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

/// Epoch coordinate reserved for the before/after full-set loss evaluation.
const EVAL_EPOCH: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            _ => Err(Error::Config(format!("unknown schedule '{s}'"))),
        }
    }

    /// Learning-rate multiplier for 0-based `step` out of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_adaptive: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            lr_main: 1e-2,
            lr_adaptive: 1e-4,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            schedule: LrSchedule::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        for (name, v) in [
            ("lr", self.lr_main),
            ("lr-adaptive", self.lr_adaptive),
            ("clip-norm", self.clip_norm),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Scales all gradients by `max_norm / g` when the global L2 norm `g`
/// exceeds `max_norm`.
pub fn clip_grad_norm(mut grads: GradientSet, max_norm: f64) -> GradientSet {
    let g = grads.global_norm();
    if g > max_norm {
        grads.scale(max_norm / g);
    }
    grads
}

/// Adam moments for one flat parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// One AdamW step with decoupled weight decay.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + Self::EPS);
            *p -= lr * (update + weight_decay * *p);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub tau: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Full-set loss before the first step.
    pub initial_loss: f64,
    /// Full-set loss after the last step, on the same negative draws.
    pub final_loss: f64,
    pub steps: usize,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub store: FeatureStore,
    pub adaptive: AdaptiveParams,
    pub tau: f64,
    pub log: TrainLog,
}

fn level_weights(
    dag: &HierarchyDag,
    cfg: &LossConfig,
    adaptive: &AdaptiveParams,
) -> Result<WeightVector> {
    compute_weights(
        cfg.weighting,
        dag.max_depth(),
        Some(&dag.class_counts()),
        Some(adaptive),
    )
}

pub fn train(
    dag: &HierarchyDag,
    data: &Dataset,
    split: &ClassSplit,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    store: FeatureStore,
) -> Result<TrainOutput> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if let Some(&bad) = data.labels.iter().find(|l| !split.seen.contains(l)) {
        return Err(Error::LabelNotSeen(dag.name(bad).to_string()));
    }
    if data.dim() != store.dim() && !data.is_empty() {
        return Err(Error::DimMismatch {
            expected: store.dim(),
            got: data.dim(),
        });
    }

    let mut store = store;
    let mut adaptive = AdaptiveParams::zeros(dag.max_depth());
    let mut lcfg = loss_cfg.clone();
    lcfg.tau = lcfg.tau.clamp(TAU_MIN, TAU_MAX);

    let initial_loss = if data.is_empty() {
        0.0
    } else {
        let w = level_weights(dag, &lcfg, &adaptive)?;
        mean_loss(dag, &lcfg, data, &store, &w, cfg.seed, EVAL_EPOCH)?
    };

    let n = data.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let dim = store.dim();
    let rows = store.classes.len();
    let mut table_opt = AdamState::new(rows * dim);
    let mut tau_opt = AdamState::new(1);
    let mut step = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, &[rng::tag::SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let weights = level_weights(dag, &lcfg, &adaptive)?;
            let (loss, grads) = batch_loss(
                dag,
                &lcfg,
                data,
                batch,
                &store,
                &weights,
                cfg.seed,
                epoch as u64,
            )?;
            loss_sum += loss.total * batch.len() as f64;
            let grads = clip_grad_norm(grads, cfg.clip_norm);
            let lr = cfg.lr_main * cfg.schedule.factor(step, total_steps);

            let mut dense = vec![0.0; rows * dim];
            for (c, g) in &grads.d_class {
                dense[c.index() * dim..(c.index() + 1) * dim].copy_from_slice(g);
            }
            table_opt.step(store.classes.as_mut_slice(), &dense, lr, cfg.weight_decay);
            for r in 0..rows {
                normalize(store.classes.row_mut(r));
            }

            let mut log_tau = [lcfg.tau.ln()];
            tau_opt.step(&mut log_tau, &[grads.d_tau * lcfg.tau], lr, 0.0);
            lcfg.tau = log_tau[0].exp().clamp(TAU_MIN, TAU_MAX);

            for (p, g) in adaptive.raw.iter_mut().zip(&grads.d_adaptive) {
                *p -= cfg.lr_adaptive * g;
            }
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: if n == 0 { 0.0 } else { loss_sum / n as f64 },
            tau: lcfg.tau,
            weights: level_weights(dag, &lcfg, &adaptive)?.as_slice().to_vec(),
        };
        info!(
            "epoch {} loss {:.6} tau {:.4}",
            record.epoch, record.mean_loss, record.tau
        );
        epochs.push(record);
    }

    let final_loss = if data.is_empty() {
        0.0
    } else {
        let w = level_weights(dag, &lcfg, &adaptive)?;
        mean_loss(dag, &lcfg, data, &store, &w, cfg.seed, EVAL_EPOCH)?
    };
    Ok(TrainOutput {
        store,
        adaptive,
        tau: lcfg.tau,
        log: TrainLog {
            initial_loss,
            final_loss,
            steps: step,
            epochs,
        },
    })
}

/// Training and test sets for k-shot evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotData {
    pub train: Dataset,
    pub test: Dataset,
    /// Label space for training: seen classes plus every unseen class that
    /// received shots.
    pub train_split: ClassSplit,
}

/// Moves `k` seeded-random images of every unseen class into the training
/// set. `data` holds images of both seen and unseen classes.
pub fn fewshot_extend(
    dag: &HierarchyDag,
    data: &Dataset,
    split: &ClassSplit,
    k: usize,
    seed: u64,
) -> Result<FewShotData> {
    let mut to_train: Vec<bool> = data.labels.iter().map(|l| split.seen.contains(l)).collect();
    if k > 0 {
        for &c in &split.unseen {
            let mut rows: Vec<usize> = (0..data.len()).filter(|&r| data.labels[r] == c).collect();
            if rows.len() < k + 1 {
                return Err(Error::InsufficientImages {
                    class: dag.name(c).to_string(),
                    have: rows.len(),
                    need: k + 1,
                });
            }
            rows.shuffle(&mut rng::stream(seed, &[rng::tag::FEWSHOT, c.index() as u64]));
            for &r in &rows[..k] {
                to_train[r] = true;
            }
        }
    }
    let train_rows: Vec<usize> = (0..data.len()).filter(|&r| to_train[r]).collect();
    let test_rows: Vec<usize> = (0..data.len())
        .filter(|&r| !to_train[r] && split.unseen.contains(&data.labels[r]))
        .collect();
    let train_split = if k == 0 {
        split.clone()
    } else {
        ClassSplit::new(
            dag,
            split.seen.union(&split.unseen).copied().collect(),
            Default::default(),
        )?
    };
    Ok(FewShotData {
        train: data.subset(&train_rows),
        test: data.subset(&test_rows),
        train_split,
    })
}
