//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    s.sqrt()
}

/// Brute-force LOF of `p` against reference set `r`, straight from the
/// textbook definitions with a full distance matrix and sorted rows.
pub fn batch_lof(p: &[f64], r: &[Vec<f64>], k: usize, floor: f64) -> f64 {
    let n = r.len();
    if n < k + 1 {
        return 1.0;
    }
    let m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dist(&r[i], &r[j])).collect()).collect();
    let kdist: Vec<f64> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| m[i][j]).collect();
            row.sort_by(|a, b| a.partial_cmp(b).unwrap());
            row[k - 1]
        })
        .collect();
    let lrd_of_member = |i: usize| -> f64 {
        let nb: Vec<usize> = (0..n).filter(|&j| j != i && m[i][j] <= kdist[i]).collect();
        let s: f64 = nb.iter().map(|&j| kdist[j].max(m[i][j]).max(floor)).sum();
        nb.len() as f64 / s
    };
    let dp: Vec<f64> = r.iter().map(|o| dist(p, o)).collect();
    let mut sorted = dp.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let kd_p = sorted[k - 1];
    let nb: Vec<usize> = (0..n).filter(|&j| dp[j] <= kd_p).collect();
    let s: f64 = nb.iter().map(|&j| kdist[j].max(dp[j]).max(floor)).sum();
    let lrd_p = nb.len() as f64 / s;
    nb.iter().map(|&j| lrd_of_member(j) / lrd_p).sum::<f64>() / nb.len() as f64
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect()).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Averaged multiclass perceptron via the delayed-update form
/// `avg = w - u / T`, where `u` accumulates each update scaled by the
/// number of steps preceding it. Returns label → (weights, bias).
pub fn perceptron_oracle(examples: &[(Vec<f64>, String)], epochs: usize) -> BTreeMap<String, (Vec<f64>, f64)> {
    let mut labels: Vec<String> = examples.iter().map(|(_, l)| l.clone()).collect();
    labels.sort();
    labels.dedup();
    let dim = examples[0].0.len() + 1;
    let mut w = vec![vec![0.0; dim]; labels.len()];
    let mut u = vec![vec![0.0; dim]; labels.len()];
    let mut step = 0usize;
    for _ in 0..epochs {
        for (x, y) in examples {
            let mut xa = x.clone();
            xa.push(1.0);
            let scores: Vec<f64> = w.iter().map(|wl| wl.iter().zip(&xa).map(|(a, b)| a * b).sum()).collect();
            let mut best = 0;
            for i in 1..scores.len() {
                if scores[i] > scores[best] {
                    best = i;
                }
            }
            let truth = labels.iter().position(|l| l == y).unwrap();
            if best != truth {
                for d in 0..dim {
                    w[truth][d] += xa[d];
                    w[best][d] -= xa[d];
                    u[truth][d] += step as f64 * xa[d];
                    u[best][d] -= step as f64 * xa[d];
                }
            }
            step += 1;
        }
    }
    let t = step as f64;
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let avg: Vec<f64> = (0..dim).map(|d| w[i][d] - u[i][d] / t).collect();
            (l, (avg[..dim - 1].to_vec(), avg[dim - 1]))
        })
        .collect()
}

/// Accuracy of a label → (weights, bias) model with margin abstention.
pub fn oracle_accuracy(model: &BTreeMap<String, (Vec<f64>, f64)>, margin: f64, data: &[(Vec<f64>, String)]) -> f64 {
    let mut hits = 0;
    for (x, y) in data {
        let mut scored: Vec<(f64, &String)> =
            model.iter().map(|(l, (w, b))| (w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b, l)).collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        let runner = if scored.len() > 1 { scored[1].0 } else { 0.0 };
        if scored[0].0 - runner >= margin && scored[0].1 == y {
            hits += 1;
        }
    }
    hits as f64 / data.len() as f64
}

use fleetmaint::bus::FaultModel;
use fleetmaint::edge::GatewayConfig;
use fleetmaint::sim::synth::{FleetSpec, SyntheticFailure};
use fleetmaint::telemetry::SignaturePattern;

/// A mid-sized fleet with stock, a printer, a lossy bus and several
/// failures; produces a few thousand events.
pub fn busy_spec(seed: u64) -> FleetSpec {
    let failures = (0..24)
        .map(|i| SyntheticFailure {
            vehicle: i * 2,
            channel: i % 3,
            onset_after_departure_ms: 3_600_000,
            pattern: SignaturePattern::Spike { magnitude: 10.0, every_n: 3 },
        })
        .collect();
    FleetSpec {
        seed,
        vehicles: 60,
        edge: GatewayConfig { cooldown_ms: 10 * 60_000, context_frames: 4 },
        stagger_ms: 10 * 60_000,
        failures,
        printers: 1,
        local_stock: 1,
        remote_stock: 1,
        bus: FaultModel { latency_ms: 200, latency_jitter_ms: 500, drop_probability: 0.2, duplicate_probability: 0.1, ..FaultModel::default() },
        ..FleetSpec::default()
    }
}

/// (filter, topic, matches)
pub const TOPIC_LAW: &[(&str, &str, bool)] = &[
    ("a", "a", true),
    ("a", "b", false),
    ("a/b", "a/b", true),
    ("a/b", "a", false),
    ("a", "a/b", false),
    ("a/b", "a/c", false),
    ("+", "a", true),
    ("+", "a/b", false),
    ("+/b", "a/b", true),
    ("+/b", "a/c", false),
    ("a/+", "a/b", true),
    ("a/+", "a", false),
    ("a/+", "a/b/c", false),
    ("+/+", "a/b", true),
    ("+/+", "a", false),
    ("a/+/c", "a/b/c", true),
    ("a/+/c", "a/b/d", false),
    ("a/+/c", "a/c", false),
    ("#", "a", true),
    ("#", "a/b/c/d", true),
    ("a/#", "a", true),
    ("a/#", "a/b", true),
    ("a/#", "a/b/c", true),
    ("a/#", "b/a", false),
    ("a/b/#", "a", false),
    ("a/b/#", "a/b", true),
    ("+/#", "a", true),
    ("+/#", "x/y/z", true),
    ("+/b/#", "a/b/c/d", true),
    ("+/b/#", "a/c/b", false),
    ("fleet/+/anomaly", "fleet/v0001/anomaly", true),
    ("fleet/+/anomaly", "fleet/v0001/raw", false),
    ("fleet/+/anomaly", "fleet/v0001/anomaly/extra", false),
    ("fleet/model", "fleet/model", true),
    ("vendor/print/+", "vendor/print/printer-00", true),
    ("Fleet/model", "fleet/model", false),
];
