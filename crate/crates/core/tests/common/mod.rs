//! Independent reference code shared by the integration tests.
//!
//! Nothing in here calls into the loss, sampling or metric modules of the
//! crate; the routines work on plain string-keyed maps so they can be used as
//! oracles against the library.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

/// Hand-built tree used by several oracle tests.
///
/// ```text
/// R ─ A ─ C ─ F
///   │   │   └ G
///   │   └ D
///   └ B ─ E
/// ```
pub const FIXTURE_EDGES: &[(&str, &str)] = &[
    ("A", "R"),
    ("B", "R"),
    ("C", "A"),
    ("D", "A"),
    ("E", "B"),
    ("F", "C"),
    ("G", "C"),
];

/// Unit-norm 4-d class representations for the fixture (root excluded).
pub fn fixture_reps() -> BTreeMap<&'static str, Vec<f64>> {
    let raw: &[(&str, [f64; 4])] = &[
        ("A", [0.9, 0.3, 0.1, 0.2]),
        ("B", [-0.7, 0.5, 0.2, -0.1]),
        ("C", [0.8, -0.1, 0.5, 0.1]),
        ("D", [0.6, 0.6, -0.3, 0.2]),
        ("E", [-0.5, 0.4, 0.6, -0.4]),
        ("F", [0.7, -0.2, 0.6, 0.3]),
        ("G", [0.5, -0.4, 0.4, -0.6]),
    ];
    raw.iter()
        .map(|(n, v)| (*n, unit(v)))
        .collect()
}

pub fn fixture_image() -> Vec<f64> {
    unit(&[0.75, -0.15, 0.55, 0.2])
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Tree described by child → parent links.
pub struct OracleTree<'a> {
    pub parent: BTreeMap<&'a str, &'a str>,
    pub root: &'a str,
}

impl<'a> OracleTree<'a> {
    pub fn new(edges: &[(&'a str, &'a str)], root: &'a str) -> Self {
        Self {
            parent: edges.iter().copied().collect(),
            root,
        }
    }

    /// Root-first path ending at `c`, inclusive on both ends.
    pub fn path(&self, c: &'a str) -> Vec<&'a str> {
        let mut p = vec![c];
        let mut cur = c;
        while cur != self.root {
            cur = self.parent[cur];
            p.push(cur);
        }
        p.reverse();
        p
    }

    pub fn depth(&self, c: &'a str) -> usize {
        self.path(c).len() - 1
    }

    pub fn nodes(&self) -> Vec<&'a str> {
        let mut all: BTreeSet<&str> = self.parent.keys().copied().collect();
        all.insert(self.root);
        all.into_iter().collect()
    }

    pub fn siblings(&self, c: &'a str) -> Vec<&'a str> {
        if c == self.root {
            return Vec::new();
        }
        let p = self.parent[c];
        self.parent
            .iter()
            .filter(|(k, v)| **v == p && **k != c)
            .map(|(k, _)| *k)
            .collect()
    }
}

#[derive(Clone, Copy)]
pub enum OraclePool {
    Sibling,
    TopM(usize),
}

/// Straight-line hierarchical loss for one image, taking every candidate in
/// each negative pool (the cap is assumed to exceed every pool).
#[allow(clippy::too_many_arguments)]
pub fn straight_line_loss(
    tree: &OracleTree,
    reps: &BTreeMap<&str, Vec<f64>>,
    image: &[f64],
    label: &str,
    outer: f64,
    inner: f64,
    tau: f64,
    weights: &[f64],
    pool: OraclePool,
) -> f64 {
    let path = tree.path(label);
    let d = path.len() - 1;
    let on_path: BTreeSet<&str> = path.iter().copied().collect();
    let ks = ((outer * d as f64).ceil() as usize).clamp(1, d);
    let mut total = 0.0;
    for j in ks..=d {
        let pos = path[j];
        let pos_logit = dot(&reps[pos], image) / tau;
        let ms = ((inner * j as f64).ceil() as usize).clamp(1, j);
        let mut lj = 0.0;
        for l in ms..=j {
            let anchor = path[l];
            let candidates: Vec<&str> = match pool {
                OraclePool::Sibling => tree.siblings(anchor),
                OraclePool::TopM(m) => tree
                    .nodes()
                    .into_iter()
                    .filter(|n| {
                        let dn = tree.depth(n);
                        dn >= 1 && dn + m >= l && dn <= l
                    })
                    .collect(),
            };
            let negs: Vec<&str> = candidates
                .into_iter()
                .filter(|n| !on_path.contains(n))
                .collect();
            let pos_e = pos_logit.exp();
            let neg_e: f64 = negs
                .iter()
                .map(|n| (dot(&reps[n], image) / tau).exp())
                .sum();
            lj += -(pos_e / (pos_e + neg_e)).ln();
        }
        lj /= (j - ms + 1) as f64;
        total += weights[j - 1] * lj;
    }
    total
}

/// −log softmax of `label` among `{label} ∪ siblings(label)`.
pub fn sibling_softmax_nll(
    tree: &OracleTree,
    reps: &BTreeMap<&str, Vec<f64>>,
    image: &[f64],
    label: &str,
    tau: f64,
) -> f64 {
    let mut logits = vec![dot(&reps[label], image) / tau];
    for s in tree.siblings(label) {
        logits.push(dot(&reps[s], image) / tau);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
    -(logits[0] - m - z.ln())
}

/// Central finite difference of `f` at `x` along every coordinate.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Maximum relative error over coordinates where either gradient exceeds
/// `floor` in magnitude.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, n)| a.abs() > floor || n.abs() > floor)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}
