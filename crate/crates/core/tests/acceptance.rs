//! Acceptance suite. Each test checks one criterion and writes a single
//! PASS/FAIL line to stderr (bypassing the harness capture).

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use hgr::experiment::{run_train_eval, DataDir, RunConfig, RunResult};
use hgr::featurestore::{ClassEncoder, Dataset, FeatureMatrix, FeatureStore};
use hgr::hgrloss::{sample_grad, sample_loss, LossConfig, LossVariant, RangeConvention, RngContext};
use hgr::hierarchy::{ClassSplit, HierarchyDag, LoadOptions, NodeId};
use hgr::levelweights::{compute_weights, AdaptiveParams, WeightingStrategy};
use hgr::negsampling::{sample_negatives, SamplerContext, SamplingStrategy};
use hgr::synthgen::{generate, SynthConfig};
use hgr::zsmetrics::{evaluate, hit_at_k, por, tor, CandidateMode, LevelCandidates};
use hgr::Error;

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "acceptance criterion {n} {name}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

/// Random tree named `r, x1, x2, ..` with every node at depth ≤ `max_depth`.
fn random_tree(rng: &mut ChaCha8Rng, nodes: usize, max_depth: usize) -> Vec<(String, String)> {
    let mut names = vec!["r".to_string()];
    let mut depth = vec![0usize];
    let mut edges = Vec::new();
    for i in 1..=nodes {
        let parents: Vec<usize> = (0..names.len()).filter(|&p| depth[p] < max_depth).collect();
        let p = parents[rng.random_range(0..parents.len())];
        let name = format!("x{i}");
        edges.push((name.clone(), names[p].clone()));
        names.push(name);
        depth.push(depth[p] + 1);
    }
    edges
}

fn load(edges: &[(String, String)]) -> HierarchyDag {
    HierarchyDag::load(edges, &LoadOptions::default()).unwrap()
}

fn store_from_rows(dag: &HierarchyDag, rows: &[Vec<f64>], encoder: ClassEncoder) -> FeatureStore {
    let mut m = FeatureMatrix::new(rows[0].len());
    for (i, r) in rows.iter().enumerate() {
        m.push(i as u64, r).unwrap();
    }
    FeatureStore::new(dag, m, encoder).unwrap()
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_gradient_check() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let dim = 8;
    let h = 1e-4;
    let floor = 1e-8;
    let mut worst: f64 = 0.0;
    let mut coords = 0usize;
    for inst in 0..20 {
        let n = rng.random_range(4..12);
        let edges = random_tree(&mut rng, n, 4);
        let dag = load(&edges);
        let encoder = if inst % 2 == 0 { ClassEncoder::PathSum } else { ClassEncoder::Table };
        let rows: Vec<Vec<f64>> = (0..dag.node_count()).map(|_| gauss(&mut rng, dim)).collect();
        let image = unit(&gauss(&mut rng, dim));
        let non_root: Vec<NodeId> = dag.nodes().filter(|&c| c != dag.root()).collect();
        let label = non_root[rng.random_range(0..non_root.len())];
        let weighting = WeightingStrategy::ALL[inst % 7];
        let sampling = match rng.random_range(0..3) {
            0 => SamplingStrategy::Random,
            1 => SamplingStrategy::Sibling,
            _ => SamplingStrategy::TopM { m: rng.random_range(0..3) },
        };
        let cfg = LossConfig {
            outer_ratio: rng.random_range(0.0..=1.0),
            inner_ratio: rng.random_range(0.0..=1.0),
            epsilon: rng.random_range(1..=6),
            tau: rng.random_range(0.1..1.0),
            sampling,
            weighting,
            range_convention: if rng.random_bool(0.5) { RangeConvention::Algorithmic } else { RangeConvention::Ablation },
            variant: LossVariant::ALL[inst % 4],
            renormalize_active: inst % 3 == 0,
        };
        let params = AdaptiveParams { raw: (0..dag.max_depth()).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let counts = dag.class_counts();
        let weights_of = |p: &AdaptiveParams| compute_weights(weighting, dag.max_depth(), Some(&counts), Some(p)).unwrap();
        let ctx = RngContext { seed: inst as u64, epoch: 0, item: 7 };
        let store = store_from_rows(&dag, &rows, encoder);
        let (_, g) = sample_grad(&dag, &cfg, &image, label, &store, &weights_of(&params), &ctx).unwrap();

        let loss = |cfg: &LossConfig, image: &[f64], store: &FeatureStore, p: &AdaptiveParams| {
            sample_loss(&dag, cfg, image, label, store, &weights_of(p), &ctx).unwrap().total
        };

        let mut check = |analytic: &[f64], numeric: &[f64]| {
            worst = worst.max(max_rel_err(analytic, numeric, floor));
            coords += analytic.iter().zip(numeric).filter(|(a, n)| a.abs() > floor || n.abs() > floor).count();
        };

        let num_img = central_diff(&image, h, |x| loss(&cfg, x, &store, &params));
        check(&g.d_image, &num_img);

        let flat: Vec<f64> = rows.concat();
        let num_cls = central_diff(&flat, h, |x| {
            let rs: Vec<Vec<f64>> = x.chunks(dim).map(<[f64]>::to_vec).collect();
            loss(&cfg, &image, &store_from_rows(&dag, &rs, encoder), &params)
        });
        let mut ana_cls = vec![0.0; flat.len()];
        for (c, v) in &g.d_class {
            ana_cls[c.index() * dim..(c.index() + 1) * dim].copy_from_slice(v);
        }
        check(&ana_cls, &num_cls);

        let num_tau = central_diff(&[cfg.tau], h, |x| loss(&LossConfig { tau: x[0], ..cfg.clone() }, &image, &store, &params));
        check(&[g.d_tau], &num_tau);

        if weighting == WeightingStrategy::AdaptiveLearned {
            let num_ad = central_diff(&params.raw, h, |x| loss(&cfg, &image, &store, &AdaptiveParams { raw: x.to_vec() }));
            check(&g.d_adaptive, &num_ad);
        } else {
            assert!(g.d_adaptive.iter().all(|&x| x == 0.0));
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(5);
    verdict(
        1,
        "gradient-check",
        pass,
        &format!("max rel err {worst:.3e} over {coords} coords, {:.2}s", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_flat_degenerate_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let mut worst: f64 = 0.0;
    for inst in 0..100 {
        let n = rng.random_range(3..15);
        let edges = random_tree(&mut rng, n, 4);
        let dag = load(&edges);
        let dim = 6;
        let unit_rows: Vec<Vec<f64>> = (0..dag.node_count()).map(|_| unit(&gauss(&mut rng, dim))).collect();
        let store = store_from_rows(&dag, &unit_rows, ClassEncoder::Table);
        let image = unit(&gauss(&mut rng, dim));
        let non_root: Vec<NodeId> = dag.nodes().filter(|&c| c != dag.root()).collect();
        let label = non_root[rng.random_range(0..non_root.len())];
        let tau = rng.random_range(0.05..1.0);

        let cfg = LossConfig {
            outer_ratio: 1.0,
            inner_ratio: 1.0,
            epsilon: 1000,
            tau,
            sampling: SamplingStrategy::Sibling,
            weighting: WeightingStrategy::Equal,
            range_convention: RangeConvention::Algorithmic,
            variant: LossVariant::Full,
            renormalize_active: true,
        };
        let w = compute_weights(WeightingStrategy::Equal, dag.max_depth(), None, None).unwrap();
        let ctx = RngContext { seed: inst, epoch: 0, item: 0 };
        let got = sample_loss(&dag, &cfg, &image, label, &store, &w, &ctx).unwrap().total;

        let tree_edges: Vec<(&str, &str)> = edges.iter().map(|(c, p)| (c.as_str(), p.as_str())).collect();
        let tree = OracleTree::new(&tree_edges, "r");
        let reps: BTreeMap<&str, Vec<f64>> = dag.nodes().map(|c| (dag.name(c), unit_rows[c.index()].clone())).collect();
        let want = sibling_softmax_nll(&tree, &reps, &image, dag.name(label), tau);
        worst = worst.max((got - want).abs());
    }
    let pass = worst <= 1e-12;
    verdict(2, "flat-equivalence", pass, &format!("max abs diff {worst:.3e} over 100 instances"));
    assert!(pass);
}

// ---------------------------------------------------------------- 3

fn fixture_store(dag: &HierarchyDag, reps: &BTreeMap<&str, Vec<f64>>) -> FeatureStore {
    let rows: Vec<Vec<f64>> = dag
        .nodes()
        .map(|c| reps.get(dag.name(c)).cloned().unwrap_or_else(|| unit(&[1.0, 1.0, 1.0, 1.0])))
        .collect();
    store_from_rows(dag, &rows, ClassEncoder::Table)
}

#[test]
fn criterion_3_reference_loop_oracle() {
    let dag = HierarchyDag::load(FIXTURE_EDGES, &LoadOptions::default()).unwrap();
    let tree = OracleTree::new(FIXTURE_EDGES, "R");
    let reps = fixture_reps();
    let store = fixture_store(&dag, &reps);
    let image = fixture_image();
    let weights = compute_weights(WeightingStrategy::Equal, 3, None, None).unwrap();
    let oracle_w = [1.0 / 3.0; 3];
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (pool, sampling) in [
        (OraclePool::Sibling, SamplingStrategy::Sibling),
        (OraclePool::TopM(0), SamplingStrategy::TopM { m: 0 }),
        (OraclePool::TopM(1), SamplingStrategy::TopM { m: 1 }),
    ] {
        for tau in [0.07, 0.5] {
            for label in ["A", "B", "C", "D", "E", "F", "G"] {
                let cfg = LossConfig {
                    outer_ratio: 0.5,
                    inner_ratio: 0.5,
                    epsilon: 256,
                    tau,
                    sampling,
                    weighting: WeightingStrategy::Equal,
                    ..Default::default()
                };
                let ctx = RngContext { seed: 1, epoch: 0, item: 0 };
                let got = sample_loss(&dag, &cfg, &image, dag.id(label).unwrap(), &store, &weights, &ctx).unwrap().total;
                let want = straight_line_loss(&tree, &reps, &image, label, 0.5, 0.5, tau, &oracle_w, pool);
                worst = worst.max((got - want).abs());
                cases += 1;
            }
        }
    }
    let pass = worst <= 1e-12;
    verdict(3, "reference-loop-oracle", pass, &format!("max abs diff {worst:.3e} over {cases} cases"));
    assert!(pass);
}

// ---------------------------------------------------------------- 4 and 5

const SEEDS: u64 = 5;

struct Runs {
    data: Vec<DataDir>,
    full: Vec<RunResult>,
    full_time: Duration,
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn variant_cfg(seed: u64, variant: LossVariant) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.seed = seed;
    cfg.loss.variant = variant;
    cfg
}

/// Default-instance runs of the full objective, shared by criteria 4 and 5.
fn full_runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        single_thread(|| {
            let data: Vec<DataDir> = (0..SEEDS)
                .map(|s| {
                    let (dag, _, data, split) = generate(&SynthConfig { seed: s, ..Default::default() }).unwrap();
                    DataDir { dag, data, split }
                })
                .collect();
            let start = Instant::now();
            let full = (0..SEEDS)
                .map(|s| run_train_eval(&data[s as usize], &variant_cfg(s, LossVariant::Full)).unwrap())
                .collect();
            Runs { data, full, full_time: start.elapsed() }
        })
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_4_loss_ablation_direction() {
    let runs = full_runs();
    let full_por = mean(runs.full.iter().map(|r| r.report.por));
    let mut detail = format!("full POR {full_por:.4}");
    let mut pass = true;
    for v in [LossVariant::OuterOnly, LossVariant::InnerOnly, LossVariant::Flat] {
        let pors: Vec<f64> = (0..SEEDS)
            .map(|s| run_train_eval(&runs.data[s as usize], &variant_cfg(s, v)).unwrap().report.por)
            .collect();
        let diff = mean(runs.full.iter().zip(&pors).map(|(f, p)| f.report.por - p));
        pass &= diff >= 0.0;
        detail += &format!(", {} POR {:.4} (paired diff {diff:+.4})", v.name(), mean(pors.iter().copied()));
    }
    verdict(4, "loss-ablation-direction", pass, &detail);
    assert!(pass);
}

#[test]
fn criterion_5_desk_scale_learning() {
    let runs = full_runs();
    let start = Instant::now();
    let flat: Vec<RunResult> = single_thread(|| {
        (0..SEEDS)
            .map(|s| run_train_eval(&runs.data[s as usize], &variant_cfg(s, LossVariant::Flat)).unwrap())
            .collect()
    });
    let elapsed = runs.full_time + start.elapsed();
    let hit_full = mean(runs.full.iter().map(|r| r.report.hit(1)));
    let hit_flat = mean(flat.iter().map(|r| r.report.hit(1)));
    let chance = mean(runs.data.iter().map(|d| 1.0 / d.split.unseen.len() as f64));
    let pass = hit_full >= 10.0 * chance && hit_full >= hit_flat && elapsed < Duration::from_secs(300);
    verdict(
        5,
        "desk-scale-learning",
        pass,
        &format!(
            "unseen Hit@1 {hit_full:.4} vs 10x chance {:.4}, flat baseline {hit_flat:.4}, {:.1}s single-threaded",
            10.0 * chance,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_6_metric_oracles() {
    let dag = HierarchyDag::load(FIXTURE_EDGES, &LoadOptions::default()).unwrap();
    let tree = OracleTree::new(FIXTURE_EDGES, "R");
    let reps_map = fixture_reps();
    let store = fixture_store(&dag, &reps_map);
    let reps = store.encode(&dag).unwrap();
    let id = |n: &str| dag.id(n).unwrap();
    let non_root = ["A", "B", "C", "D", "E", "F", "G"];
    let mut mismatches = 0;

    // TOR over every (prediction, label) pair
    for label in non_root {
        let path: Vec<&str> = tree.path(label)[1..].to_vec();
        for pred in non_root {
            let want = if path.contains(&pred) { 1.0 } else { 0.0 } / path.len() as f64;
            mismatches += usize::from(tor(&dag, &[id(pred)], id(label)).unwrap() != want);
        }
    }

    // POR: per-level argmax over mode classes plus unassigned concept nodes
    let seen = ["D", "F"];
    let unseen = ["E", "G"];
    let split = ClassSplit::new(
        &dag,
        seen.iter().map(|n| id(n)).collect(),
        unseen.iter().map(|n| id(n)).collect(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC6);
    for mode in [CandidateMode::Zsl, CandidateMode::Gzsl] {
        let mode_classes: Vec<&str> = match mode {
            CandidateMode::Zsl => unseen.to_vec(),
            CandidateMode::Gzsl => seen.iter().chain(&unseen).copied().collect(),
        };
        let pool: Vec<&str> = non_root
            .iter()
            .copied()
            .filter(|n| mode_classes.contains(n) || !(seen.contains(n) || unseen.contains(n)))
            .collect();
        let levels = LevelCandidates::new(&dag, &split, mode);
        let images: Vec<Vec<f64>> = (0..200).map(|_| unit(&gauss(&mut rng, 4))).collect();
        for image in &images {
            for label in non_root {
                let path: Vec<&str> = tree.path(label)[1..].to_vec();
                let mut hits = 0;
                for l in 1..=path.len() {
                    let best = pool
                        .iter()
                        .filter(|n| tree.depth(n) == l)
                        .max_by(|a, b| dot(&reps_map[**a], image).total_cmp(&dot(&reps_map[**b], image)));
                    hits += usize::from(best.is_some_and(|b| path.contains(b)));
                }
                let want = hits as f64 / path.len() as f64;
                mismatches += usize::from(por(&dag, image, id(label), &reps, &levels).unwrap() != want);
            }
        }

        // dataset aggregates equal the mean of brute-force per-image values
        let mut m = FeatureMatrix::new(4);
        let mut labels = Vec::new();
        for (i, image) in images.iter().enumerate() {
            m.push(i as u64, image).unwrap();
            labels.push(id(unseen[i % 2]));
        }
        let data = Dataset::new(&dag, m, labels.clone()).unwrap();
        let report = evaluate(&dag, &data, &split, &reps, mode, &[1, 2], 1).unwrap();
        let cands: BTreeSet<NodeId> = mode_classes.iter().map(|n| id(n)).collect();
        let mut tor_sum = 0.0;
        let mut por_sum = 0.0;
        for (image, &label) in images.iter().zip(&labels) {
            let top = cands
                .iter()
                .max_by(|a, b| dot(reps.rep(**a), image).total_cmp(&dot(reps.rep(**b), image)))
                .unwrap();
            tor_sum += tor(&dag, &[*top], label).unwrap();
            por_sum += por(&dag, image, label, &reps, &levels).unwrap();
        }
        let n = images.len() as f64;
        mismatches += usize::from((report.tor - tor_sum / n).abs() > 1e-15);
        mismatches += usize::from((report.por - por_sum / n).abs() > 1e-15);
    }

    // Hit@k on 1000 random rankings
    let mut hit_failures = 0;
    for _ in 0..1000 {
        let c = rng.random_range(2..20);
        let mut rankings = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..rng.random_range(1..12) {
            let mut r: Vec<NodeId> = (0..c).map(NodeId).collect();
            for i in (1..c).rev() {
                r.swap(i, rng.random_range(0..=i));
            }
            rankings.push(r);
            labels.push(NodeId(rng.random_range(0..c)));
        }
        let ks: Vec<usize> = (1..=c).collect();
        let h = hit_at_k(&rankings, &labels, &ks);
        let vals: Vec<f64> = ks.iter().map(|k| h[k]).collect();
        let monotone = vals.windows(2).all(|w| w[0] <= w[1]);
        let brute = ks.iter().all(|&k| {
            let count = rankings.iter().zip(&labels).filter(|(r, l)| r[..k].contains(l)).count();
            h[&k] == count as f64 / rankings.len() as f64
        });
        hit_failures += usize::from(!(monotone && h[&c] == 1.0 && brute));
    }

    let pass = mismatches == 0 && hit_failures == 0;
    verdict(
        6,
        "metric-oracles",
        pass,
        &format!("{mismatches} TOR/POR mismatches, {hit_failures} Hit@k failures over 1000 rankings"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_weighting() {
    let w = compute_weights(WeightingStrategy::InverseFrequency, 3, Some(&[2, 4, 8]), None).unwrap();
    let exact = w.as_slice().iter().zip([4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]).all(|(a, b)| (a - b).abs() <= 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(0xC7);
    let mut worst_sum: f64 = 0.0;
    let mut worst_shift: f64 = 0.0;
    for _ in 0..500 {
        let d = rng.random_range(1..10);
        let counts: Vec<usize> = (0..d).map(|_| rng.random_range(1..1000)).collect();
        let raw: Vec<f64> = (0..d).map(|_| rng.random_range(-8.0..8.0)).collect();
        let p = AdaptiveParams { raw: raw.clone() };
        for s in WeightingStrategy::ALL {
            let w = compute_weights(s, d, Some(&counts), Some(&p)).unwrap();
            worst_sum = worst_sum.max((w.as_slice().iter().sum::<f64>() - 1.0).abs());
        }
        let c = rng.random_range(-50.0..50.0);
        let shifted = AdaptiveParams { raw: raw.iter().map(|x| x + c).collect() };
        let a = compute_weights(WeightingStrategy::AdaptiveLearned, d, None, Some(&p)).unwrap();
        let b = compute_weights(WeightingStrategy::AdaptiveLearned, d, None, Some(&shifted)).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            worst_shift = worst_shift.max((x - y).abs());
        }
    }
    let pass = exact && worst_sum <= 1e-9 && worst_shift <= 1e-12;
    verdict(
        7,
        "weighting",
        pass,
        &format!("inverse-frequency exact: {exact}, max |sum-1| {worst_sum:.1e}, max shift drift {worst_shift:.1e}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

#[derive(Debug, Clone)]
struct SamplerCase {
    parents: Vec<usize>,
    anchor: usize,
    kind: usize,
    m: usize,
    epsilon: usize,
    seed: u64,
    reps: Vec<Vec<f64>>,
}

fn sampler_case() -> impl Strategy<Value = SamplerCase> {
    (2usize..16)
        .prop_flat_map(|n| {
            (
                // parent of node i (1-based) among 0..i, node 0 is the root
                (1..=n).map(|i| 0..i).collect::<Vec<_>>(),
                1..=n,
                0usize..4,
                0usize..4,
                1usize..12,
                any::<u64>(),
                proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), n + 1),
            )
        })
        .prop_map(|(parents, anchor, kind, m, epsilon, seed, reps)| SamplerCase {
            parents,
            anchor,
            kind,
            m,
            epsilon,
            seed,
            reps,
        })
}

fn check_sampler(case: &SamplerCase) -> Result<(), TestCaseError> {
    let name = |i: usize| if i == 0 { "r".to_string() } else { format!("x{i}") };
    let edges: Vec<(String, String)> = case.parents.iter().enumerate().map(|(i, &p)| (name(i + 1), name(p))).collect();
    let opts = LoadOptions { stable_ids: true, ..Default::default() };
    let dag = HierarchyDag::load(&edges, &opts).unwrap();
    let tree_edges: Vec<(&str, &str)> = edges.iter().map(|(c, p)| (c.as_str(), p.as_str())).collect();
    let tree = OracleTree::new(&tree_edges, "r");

    let anchor_name = name(case.anchor);
    let path = tree.path(&anchor_name);
    let forbidden_names: BTreeSet<&str> = path.iter().copied().collect();
    let forbidden: BTreeSet<NodeId> = forbidden_names.iter().map(|n| dag.id(n).unwrap()).collect();
    let strategy = match case.kind {
        0 => SamplingStrategy::Random,
        1 => SamplingStrategy::Sibling,
        2 => SamplingStrategy::Similarity,
        _ => SamplingStrategy::TopM { m: case.m },
    };
    let da = tree.depth(&anchor_name);
    let pool: Vec<&str> = match strategy {
        SamplingStrategy::Sibling => tree.siblings(&anchor_name),
        SamplingStrategy::TopM { m } => tree
            .nodes()
            .into_iter()
            .filter(|n| {
                let d = tree.depth(n);
                d >= 1 && d <= da && d + m >= da
            })
            .collect(),
        _ => tree.nodes().into_iter().filter(|n| *n != "r").collect(),
    };
    let pool_size = pool.iter().filter(|n| !forbidden_names.contains(*n)).count();

    let rows: Vec<Vec<f64>> = dag
        .nodes()
        .map(|c| {
            let i = if c == dag.root() { 0 } else { dag.name(c)[1..].parse::<usize>().unwrap() };
            let mut v = case.reps[i].clone();
            v[0] += 2.0; // keep rows away from zero
            v
        })
        .collect();
    let reps = store_from_rows(&dag, &rows, ClassEncoder::Table).encode(&dag).unwrap();
    let ctx = SamplerContext { epsilon: case.epsilon, seed: case.seed, forbidden: &forbidden };
    let anchor = dag.id(&anchor_name).unwrap();
    let out = sample_negatives(&dag, strategy, anchor, &ctx, Some(&reps)).unwrap();
    prop_assert!(out.iter().all(|c| !forbidden.contains(c)));
    prop_assert_eq!(out.len(), case.epsilon.min(pool_size));
    let uniq: BTreeSet<_> = out.iter().collect();
    prop_assert_eq!(uniq.len(), out.len());
    prop_assert_eq!(&out, &sample_negatives(&dag, strategy, anchor, &ctx, Some(&reps)).unwrap());
    Ok(())
}

#[test]
fn criterion_8_sampler_contracts() {
    let mut runner = TestRunner::new(Config { cases: 10_000, failure_persistence: None, ..Config::default() });
    let prop = runner.run(&sampler_case(), |c| check_sampler(&c));

    // uniformity of Random over a 4-element pool: R -> {a, b, c, d, e}, anchor a
    let dag = HierarchyDag::load(&[("a", "R"), ("b", "R"), ("c", "R"), ("d", "R"), ("e", "R")], &LoadOptions::default()).unwrap();
    let a = dag.id("a").unwrap();
    let forbidden: BTreeSet<NodeId> = [dag.root(), a].into();
    let trials = 20_000u64;
    let mut counts: BTreeMap<NodeId, usize> = BTreeMap::new();
    for seed in 0..trials {
        let ctx = SamplerContext { epsilon: 1, seed, forbidden: &forbidden };
        for c in sample_negatives(&dag, SamplingStrategy::Random, a, &ctx, None).unwrap() {
            *counts.entry(c).or_default() += 1;
        }
    }
    let freqs: Vec<f64> = counts.values().map(|&c| c as f64 / trials as f64).collect();
    let uniform = freqs.len() == 4 && freqs.iter().all(|f| (0.22..=0.28).contains(f));

    let pass = prop.is_ok() && uniform;
    let freq_txt: Vec<String> = freqs.iter().map(|f| format!("{f:.4}")).collect();
    verdict(
        8,
        "sampler-contracts",
        pass,
        &format!(
            "10000 property cases {}, Random frequencies [{}]",
            if prop.is_ok() { "held" } else { "failed" },
            freq_txt.join(", ")
        ),
    );
    if let Err(e) = prop {
        panic!("{e}");
    }
    assert!(pass);
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_9_reproducibility_and_io() {
    // identical seeds give identical reports
    let sc = SynthConfig { depth: 3, sigma_class: vec![0.8, 0.5, 0.3], dim: 16, images_per_class: 8, seed: 9, ..Default::default() };
    let run = || {
        let (dag, _, data, split) = generate(&sc).unwrap();
        let mut cfg = RunConfig::default();
        cfg.train.epochs = 4;
        cfg.train.batch_size = 64;
        cfg.train.seed = 9;
        run_train_eval(&DataDir { dag, data, split }, &cfg).unwrap()
    };
    let a = run();
    let b = run();
    let bits = |r: &RunResult| -> Vec<u64> {
        let rep = &r.report;
        rep.hit_at.values().chain([&rep.tor, &rep.por]).map(|x| x.to_bits()).collect()
    };
    let same_report = a.report == b.report && a.report.render() == b.report.render() && bits(&a) == bits(&b);
    let same_params = a.trained == b.trained;

    // feature files round-trip bit for bit
    let mut rng = ChaCha8Rng::seed_from_u64(0xC9);
    let mut m = FeatureMatrix::new(5);
    for o in 0..50u64 {
        let v: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0f32..3.0) as f64).collect();
        m.push(o * 7 + 3, &v).unwrap();
    }
    m.push(1000, &[f32::MIN_POSITIVE as f64, -0.0, f32::MAX as f64, 1e-40f32 as f64, 1.0]).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("f.hgrf");
    hgr::featurestore::write_features(&m, &path).unwrap();
    let back = hgr::featurestore::read_features(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let round_trip = back.owners() == m.owners()
        && (0..m.len()).all(|r| m.row(r).iter().zip(back.row(r)).all(|(x, y)| x.to_bits() == y.to_bits()))
        && back.to_bytes() == bytes;

    // cycles are rejected with a witness
    let two = HierarchyDag::load(&[("A", "B"), ("B", "A")], &LoadOptions::default());
    let witness_two = matches!(&two, Err(Error::CycleDetected(w))
        if *w == vec![("A".to_string(), "B".to_string()), ("B".to_string(), "A".to_string())]);
    let three = HierarchyDag::load(&[("x", "r"), ("a", "x"), ("b", "a"), ("c", "b"), ("a", "c")], &LoadOptions::default());
    let witness_three = match &three {
        Err(Error::CycleDetected(w)) => {
            let names: BTreeSet<&str> = w.iter().map(|(c, _)| c.as_str()).collect();
            w.len() == 3 && names == ["a", "b", "c"].into() && w.windows(2).all(|p| p[0].1 == p[1].0) && w[2].1 == w[0].0
        }
        _ => false,
    };

    let pass = same_report && same_params && round_trip && witness_two && witness_three;
    verdict(
        9,
        "reproducibility-io",
        pass,
        &format!(
            "reports identical: {same_report}, parameters identical: {same_params}, round-trip exact: {round_trip}, cycle witnesses: {}",
            witness_two && witness_three
        ),
    );
    assert!(pass);
}
