//! Per-depth weights `w_j`, `j = 1..=D_max`, applied to the outer-level
//! losses. Every strategy returns a vector summing to one.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightingStrategy {
    Equal,
    /// `w_j ∝ j`
    LinearInc,
    /// `w_j ∝ D_max - j + 1`
    LinearDec,
    /// `w_j ∝ 2^j`
    ExpInc,
    /// `w_j ∝ 2^-j`
    ExpDec,
    /// `w = softmax(raw)` with learnable `raw`.
    #[default]
    AdaptiveLearned,
    /// `w_j ∝ 1 / N_j` where `N_j` is the class count at depth `j`.
    InverseFrequency,
}

impl WeightingStrategy {
    pub const ALL: [WeightingStrategy; 7] = [
        WeightingStrategy::Equal,
        WeightingStrategy::LinearInc,
        WeightingStrategy::LinearDec,
        WeightingStrategy::ExpInc,
        WeightingStrategy::ExpDec,
        WeightingStrategy::AdaptiveLearned,
        WeightingStrategy::InverseFrequency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightingStrategy::Equal => "equal",
            WeightingStrategy::LinearInc => "lin-inc",
            WeightingStrategy::LinearDec => "lin-dec",
            WeightingStrategy::ExpInc => "exp-inc",
            WeightingStrategy::ExpDec => "exp-dec",
            WeightingStrategy::AdaptiveLearned => "adaptive",
            WeightingStrategy::InverseFrequency => "inv-freq",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown weighting strategy '{s}'")))
    }
}

/// Normalized weights indexed by depth (`get(1)` is the first level).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
}

impl WeightVector {
    pub fn get(&self, depth: usize) -> f64 {
        self.weights[depth - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn max_depth(&self) -> usize {
        self.weights.len()
    }

    /// Unnormalized weights, for tests that probe linearity of the loss.
    #[doc(hidden)]
    pub fn raw_for_tests(weights: Vec<f64>) -> Self {
        Self { weights }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveParams {
    pub raw: Vec<f64>,
}

impl AdaptiveParams {
    /// Zero logits, i.e. equal weights.
    pub fn zeros(max_depth: usize) -> Self {
        Self {
            raw: vec![0.0; max_depth],
        }
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Gradient w.r.t. softmax logits given the softmax output and the gradient
/// w.r.t. that output.
pub fn softmax_backward(w: &[f64], dw: &[f64]) -> Vec<f64> {
    let inner: f64 = w.iter().zip(dw).map(|(a, b)| a * b).sum();
    w.iter().zip(dw).map(|(wi, gi)| wi * (gi - inner)).collect()
}

fn normalized(v: Vec<f64>) -> WeightVector {
    let z: f64 = v.iter().sum();
    WeightVector {
        weights: v.into_iter().map(|x| x / z).collect(),
    }
}

pub fn compute_weights(
    strategy: WeightingStrategy,
    max_depth: usize,
    class_counts: Option<&[usize]>,
    params: Option<&AdaptiveParams>,
) -> Result<WeightVector> {
    if max_depth == 0 {
        return Err(Error::Config("weights need at least one depth".into()));
    }
    let depths = 1..=max_depth;
    Ok(match strategy {
        WeightingStrategy::Equal => normalized(vec![1.0; max_depth]),
        WeightingStrategy::LinearInc => normalized(depths.map(|j| j as f64).collect()),
        WeightingStrategy::LinearDec => {
            normalized(depths.map(|j| (max_depth - j + 1) as f64).collect())
        }
        WeightingStrategy::ExpInc => normalized(depths.map(|j| 2f64.powi(j as i32)).collect()),
        WeightingStrategy::ExpDec => normalized(depths.map(|j| 2f64.powi(-(j as i32))).collect()),
        WeightingStrategy::AdaptiveLearned => {
            let p = params.ok_or(Error::MissingParams)?;
            if p.raw.len() != max_depth {
                return Err(Error::DimMismatch {
                    expected: max_depth,
                    got: p.raw.len(),
                });
            }
            if p.raw.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config("non-finite adaptive parameter".into()));
            }
            WeightVector {
                weights: softmax(&p.raw),
            }
        }
        WeightingStrategy::InverseFrequency => {
            let counts = class_counts.ok_or(Error::MissingCounts)?;
            if counts.len() != max_depth {
                return Err(Error::DimMismatch {
                    expected: max_depth,
                    got: counts.len(),
                });
            }
            if let Some(j) = counts.iter().position(|&n| n == 0) {
                return Err(Error::ZeroCount(j + 1));
            }
            normalized(counts.iter().map(|&n| 1.0 / n as f64).collect())
        }
    })
}
