//! Oracles and property checks shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::Rng;

use cft_core::graph::Graph;
use cft_core::layers::multi_head_attention;
use cft_core::metrics::ConfusionMatrix;
use cft_core::param::Gradients;
use cft_core::rollout::{attention_rollout, StreamId};
use cft_core::{Cft, Tensor};

/// Expands a confusion matrix into paired truth/prediction label lists.
pub fn label_pairs(k: usize, counts: &[u64]) -> (Vec<usize>, Vec<usize>) {
    let (mut t, mut p) = (Vec::new(), Vec::new());
    for i in 0..k {
        for j in 0..k {
            for _ in 0..counts[i * k + j] {
                t.push(i);
                p.push(j);
            }
        }
    }
    (t, p)
}

/// Quadratic weighted kappa from label lists: one minus the mean squared grade
/// error over matched pairs divided by the mean over all truth/prediction pairs.
pub fn qwk_oracle(truths: &[usize], preds: &[usize]) -> f64 {
    let n = truths.len() as f64;
    let observed: f64 = truths
        .iter()
        .zip(preds)
        .map(|(&t, &p)| (t as f64 - p as f64).powi(2))
        .sum::<f64>()
        / n;
    let mut chance = 0.0;
    for &t in truths {
        for &p in preds {
            chance += (t as f64 - p as f64).powi(2);
        }
    }
    chance /= n * n;
    1.0 - observed / chance
}

/// Macro F1 from per-class precision and recall; an undefined or zero-hit class scores 0.
pub fn macro_f1_oracle(truths: &[usize], preds: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..k {
        let tp = truths
            .iter()
            .zip(preds)
            .filter(|&(&t, &p)| t == c && p == c)
            .count() as f64;
        let predicted = preds.iter().filter(|&&p| p == c).count() as f64;
        let actual = truths.iter().filter(|&&t| t == c).count() as f64;
        if tp == 0.0 {
            continue;
        }
        let (precision, recall) = (tp / predicted, tp / actual);
        total += 2.0 * precision * recall / (precision + recall);
    }
    total / k as f64
}

/// Random `k×k` count matrix with at least two distinct truth and prediction classes.
pub fn random_confusion<R: Rng>(rng: &mut R, k: usize) -> ConfusionMatrix {
    loop {
        let counts: Vec<u64> = (0..k * k)
            .map(|_| {
                if rng.gen_bool(0.3) {
                    0
                } else {
                    rng.gen_range(0..40)
                }
            })
            .collect();
        let cm = ConfusionMatrix::from_counts(k, counts).unwrap();
        let rows = cm.row_sums().iter().filter(|&&r| r > 0).count();
        let cols = cm.col_sums().iter().filter(|&&c| c > 0).count();
        if rows >= 2 && cols >= 2 {
            return cm;
        }
    }
}

/// Whether every gradient entry of parameters whose name starts with `prefix` is exactly zero.
pub fn grads_exactly_zero(model: &Cft<f64>, grads: &Gradients<f64>, prefix: &str) -> bool {
    model
        .params
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .all(|(id, _)| {
            grads
                .get(id)
                .is_none_or(|g| g.data().iter().all(|&v| v == 0.0))
        })
}

pub fn grads_nonzero(model: &Cft<f64>, grads: &Gradients<f64>, prefix: &str) -> bool {
    model
        .params
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .any(|(id, _)| {
            grads
                .get(id)
                .is_some_and(|g| g.data().iter().any(|&v| v != 0.0))
        })
}

pub const PROPERTY_CASES: u32 = 1000;

pub fn runner() -> TestRunner {
    let config = Config {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

#[derive(Debug, Clone)]
pub struct AttnCase {
    pub n_q: usize,
    pub n_kv: usize,
    pub heads: usize,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn attn_case() -> impl Strategy<Value = AttnCase> {
    (1usize..9, 1usize..9, 1usize..4, 1usize..5).prop_flat_map(|(n_q, n_kv, heads, dh)| {
        let d = heads * dh;
        (
            vec(-8.0..8.0f64, n_q * d),
            vec(-8.0..8.0f64, n_kv * d),
            vec(-8.0..8.0f64, n_kv * d),
        )
            .prop_map(move |(q, k, v)| AttnCase {
                n_q,
                n_kv,
                heads,
                q,
                k,
                v,
            })
    })
}

pub const ROW_SUM_TOL: f64 = 1e-12;

/// Every head's attention row is non-negative and sums to one.
pub fn check_attention(c: &AttnCase) -> Result<(), TestCaseError> {
    let d = c.q.len() / c.n_q;
    let mut g = Graph::<f64>::new();
    let q = g.input(Tensor::new(vec![c.n_q, d], c.q.clone()).unwrap());
    let k = g.input(Tensor::new(vec![c.n_kv, d], c.k.clone()).unwrap());
    let v = g.input(Tensor::new(vec![c.n_kv, d], c.v.clone()).unwrap());
    let (_, maps) = multi_head_attention(&mut g, q, k, v, c.heads).unwrap();
    prop_assert_eq!(maps.len(), c.heads);
    for m in maps {
        for row in g.value(m).data().chunks(c.n_kv) {
            prop_assert!(row.iter().all(|&a| a >= 0.0));
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= ROW_SUM_TOL, "row sum {}", s);
        }
    }
    Ok(())
}

pub fn softmax_case() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..6, 1usize..12)
        .prop_flat_map(|(rows, cols)| (Just(cols), vec(-300.0..300.0f64, rows * cols)))
}

pub fn check_softmax(cols: usize, x: &[f64]) -> Result<(), TestCaseError> {
    let mut g = Graph::<f64>::new();
    let v = g.input(Tensor::new(vec![x.len() / cols, cols], x.to_vec()).unwrap());
    let s = g.softmax(v).unwrap();
    for row in g.value(s).data().chunks(cols) {
        prop_assert!(row.iter().all(|&p| p >= 0.0 && p.is_finite()));
        let sum: f64 = row.iter().sum();
        prop_assert!((sum - 1.0).abs() <= ROW_SUM_TOL, "row sum {}", sum);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct NormCase {
    pub x: Vec<f64>,
    pub shift: f64,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn norm_case() -> impl Strategy<Value = NormCase> {
    (2usize..16).prop_flat_map(|c| {
        (
            vec(-10.0..10.0f64, c),
            -100.0..100.0f64,
            vec(-2.0..2.0f64, c),
            vec(-2.0..2.0f64, c),
        )
            .prop_map(|(x, shift, gamma, beta)| NormCase {
                x,
                shift,
                gamma,
                beta,
            })
    })
}

/// Adding a constant to every feature leaves the normalized output unchanged,
/// up to the rounding of the shifted inputs.
pub fn check_norm_shift(c: &NormCase) -> Result<(), TestCaseError> {
    let n = c.x.len();
    let mean = c.x.iter().sum::<f64>() / n as f64;
    let std = (c.x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if std < 1e-3 {
        return Ok(());
    }
    let run = |x: Vec<f64>| {
        let mut g = Graph::<f64>::new();
        let xv = g.input(Tensor::new(vec![1, n], x).unwrap());
        let gv = g.input(Tensor::new(vec![n], c.gamma.clone()).unwrap());
        let bv = g.input(Tensor::new(vec![n], c.beta.clone()).unwrap());
        let y = g.layer_norm(xv, gv, bv).unwrap();
        g.value(y).data().to_vec()
    };
    let base = run(c.x.clone());
    let shifted = run(c.x.iter().map(|v| v + c.shift).collect());
    let tol = 1e-13 * (c.shift.abs() + 10.0) / std;
    for (a, b) in base.iter().zip(&shifted) {
        prop_assert!((a - b).abs() <= tol, "{} vs {} (tol {})", a, b, tol);
    }
    Ok(())
}

pub fn rollout_case() -> impl Strategy<Value = (usize, Vec<Vec<f64>>)> {
    (2usize..10, 1usize..5)
        .prop_flat_map(|(n, layers)| (Just(n), vec(vec(0.0..1.0f64, n * n), layers)))
}

/// Rollout of random row-stochastic layers yields a probability vector over patches.
pub fn check_rollout(n: usize, raw: &[Vec<f64>]) -> Result<(), TestCaseError> {
    let layers: Vec<Tensor<f64>> = raw
        .iter()
        .map(|m| {
            let mut data = m.clone();
            for row in data.chunks_mut(n) {
                let s: f64 = row.iter().sum();
                if s > 0.0 {
                    row.iter_mut().for_each(|v| *v /= s);
                } else {
                    row.iter_mut().for_each(|v| *v = 1.0 / n as f64);
                }
            }
            Tensor::new(vec![n, n], data).unwrap()
        })
        .collect();
    let r = attention_rollout(&layers, StreamId::Cfp).unwrap();
    prop_assert_eq!(r.importance.len(), n - 1);
    prop_assert!(r.importance.iter().all(|&v| v >= 0.0 && v.is_finite()));
    let s: f64 = r.importance.iter().sum();
    prop_assert!((s - 1.0).abs() <= ROW_SUM_TOL, "sum {}", s);
    Ok(())
}
